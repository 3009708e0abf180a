"""Command-line front end.

Usage: ``periodicfp <subcommand> --config cfg.json --out DIR [--seed S] [--threads N]``

Each run writes into a staging directory inside ``DIR`` whose files are moved
up, next to ``manifest.json``, only on success.  On failure the staging
directory is deleted, ``DIR/error.json`` describes the problem and the exit
status is nonzero (2 for configuration errors, 1 otherwise).
"""

import argparse
import json
import os
import platform
import shutil
import sys
import tempfile
import time
import traceback

SUBCOMMANDS = ("simulate", "histogram", "solve-fd", "solve-penalty", "angles", "sample-points",
               "train-nn", "eval-nn", "couple", "fit-tail", "compare-exact")

_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")


def _parser():
    p = argparse.ArgumentParser(prog="periodicfp", description=__doc__.splitlines()[0])
    p.add_argument("subcommand", choices=SUBCOMMANDS)
    p.add_argument("--config", required=True, help="experiment config (JSON, version 1)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=None, help="root seed; overrides the config")
    p.add_argument("--threads", type=int, default=None, help="BLAS/OpenMP thread cap")
    return p


class _Run:
    """Shared state of one subcommand invocation."""

    def __init__(self, cfg, stage_dir, seeds):
        self.cfg = cfg
        self.dir = stage_dir
        self.seeds = seeds
        self.summary = {}
        self._sde = None

    def path(self, name):
        return os.path.join(self.dir, name)

    @property
    def plots(self):
        return self.cfg["output"]["plots"]

    # -- builders ---------------------------------------------------------
    def sde(self):
        from . import sde as sde_mod
        from .config import ConfigError

        if self._sde is None:
            s = self.cfg["sde"]
            try:
                if s["builtin"] is not None:
                    self._sde = sde_mod.builtin(s["builtin"], **s["params"])
                else:
                    self._sde = sde_mod.from_terms(s["drift"], s["diffusion"], s["period"],
                                                   s["label"], s["initial_state"])
            except (ValueError, TypeError) as exc:
                raise ConfigError("sde", str(exc)) from None
        return self._sde

    def grid(self):
        from .config import ConfigError
        from .grid import SpaceTimeGrid

        g = self.cfg["grid"]
        if g["lower"] is None:
            raise ConfigError("grid", "this subcommand needs a grid section")
        sde = self.sde()
        if len(g["counts"]) != sde.dimension:
            raise ConfigError("grid.counts", f"needs {sde.dimension} entries for this SDE")
        try:
            return SpaceTimeGrid(g["lower"], g["upper"], g["counts"], g["layers"], sde.period,
                                 g["t1"])
        except ValueError as exc:
            raise ConfigError("grid", str(exc)) from None

    def occupation(self):
        from . import histogram

        s = self.cfg["simulation"]
        return histogram.occupation_estimate(self.sde(), self.grid(), s["steps"], s["h_sim"],
                                             s["burn_in"], self.seeds["simulation"], s["ensemble"],
                                             s["init"], origin_radius=s["origin_radius"])

    def input_field(self, save_as="v"):
        """Field from ``inputs.field`` or a fresh occupation estimate (saved as ``save_as``)."""
        from .grid import load_field

        stem = self.cfg["inputs"]["field"]
        if stem is not None:
            return load_field(_stem(stem))
        fld = self.occupation()
        self.save_field(save_as, fld)
        return fld

    def save_field(self, name, fld, title=None):
        from .grid import save_field

        save_field(self.path(name), fld)
        if self.plots:
            from . import plotting

            plotting.density_slices(fld, self.path(f"{name}.png"), title=title or name)

    def write_json(self, name, obj):
        with open(self.path(name), "w") as fh:
            json.dump(obj, fh, indent=2, sort_keys=True, default=_json_default)


def _stem(path):
    """Strip a ``.csv``/``.json`` suffix so either file of a field pair can be named."""
    root, ext = os.path.splitext(path)
    return root if ext in (".csv", ".json") else path


def _json_default(obj):
    import numpy as np

    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    raise TypeError(f"not JSON serialisable: {type(obj).__name__}")


# ---------------------------------------------------------------------------
# subcommands


def cmd_simulate(run):
    import numpy as np

    from .sde import iter_ensemble

    sde = run.sde()
    s = run.cfg["simulation"]
    every = s["record_every"]
    x0 = sde.default_state()[None, :]
    t0 = run.cfg["grid"]["t1"]
    n = sde.dimension
    rows = 0
    kept_t, kept_x = [], []
    with open(run.path("trajectory.csv"), "w") as fh:
        fh.write(",".join(["step", "t"] + [f"x{i + 1}" for i in range(n)]) + "\n")
        fh.write(",".join(["0", repr(float(t0))] + [repr(float(v)) for v in x0[0]]) + "\n")
        step = 0
        for times, block in iter_ensemble(sde, x0, t0, s["steps"], s["h_sim"],
                                          run.seeds["simulation"]):
            idx = step + 1 + np.arange(len(times))
            sel = idx % every == 0
            for k, t, x in zip(idx[sel], times[sel], block[sel, 0]):
                fh.write(f"{k},{float(t)!r}," + ",".join(repr(float(v)) for v in x) + "\n")
            rows += int(sel.sum())
            if len(kept_t) < 200_000:
                kept_t.extend(times[sel])
                kept_x.extend(block[sel, 0])
            step += len(times)
    run.summary.update(steps=s["steps"], h_sim=s["h_sim"], recorded=rows + 1)
    if run.plots and kept_x:
        from . import plotting

        plotting.trajectory_plot(np.asarray(kept_t), np.asarray(kept_x), run.path("trajectory.png"))


def cmd_histogram(run):
    fld = run.occupation()
    run.save_field("v", fld, "occupation estimate")
    run.summary.update(sample_count=fld.sample_count, inside_fraction=fld.inside_fraction,
                       noise_std=fld.noise_std, warnings=fld.warnings)


def _solve(run, method):
    from . import fd

    sol = run.cfg["solver"]
    v = run.input_field()
    op = fd.assemble(run.sde(), v.grid, sol["scheme"], sol["variant"])
    solver = fd.least_norm_solve if method == "least_norm" else fd.penalty_solve
    rep = solver(op, v, tol=sol["tol"], max_iter=sol["max_iter"])
    rep.save(run.path("solve_report.json"))
    run.save_field("u", rep.solution, f"{method} solution")
    if sol["export_operator"]:
        fd.write_coo_csv(run.path("operator.csv"), op)
    run.summary.update(rep.to_dict())
    run.summary["shape"] = list(op.shape)
    if not rep.converged:
        print(f"warning: CG stopped at relative residual {rep.inner_residual:.3g} > tol",
              file=sys.stderr)


def cmd_solve_fd(run):
    _solve(run, "least_norm")


def cmd_solve_penalty(run):
    _solve(run, "penalty")


def cmd_angles(run):
    from . import angles

    a = run.cfg["angles"]
    reports = angles.angle_study(run.sde(), a["lower"], a["upper"], a["N"], a["layers"], a["scheme"],
                                 a["thicknesses"], a["variant"], a["method"])
    for rep in reports:
        rep.save(run.path(f"angles_D{rep.D}"))
    run.summary["p_D"] = {str(r.D): r.p_D for r in reports}
    run.summary.update(dk=reports[0].dk, method=reports[0].method, variant=a["variant"],
                       scheme=a["scheme"])
    if run.plots:
        from . import plotting

        plotting.angle_curve(reports, run.path("angles.png"))


def _point_sets(run, save=True):
    from . import histogram

    stored = run.cfg["inputs"]["points"]
    grid = run.grid()
    if stored is not None:
        return histogram.load_point_sets(stored, grid.period, grid.t1)
    p, s = run.cfg["points"], run.cfg["simulation"]
    field = None
    if p["ref_mode"] == "grid" and run.cfg["inputs"]["field"] is not None:
        field = run.input_field()
    sets = histogram.build_point_sets(
        run.sde(), grid, p["train"], p["reference"], p["boundary"], run.seeds["points"],
        p["alpha"], p["burn_in_time"], p["t_max"], s["h_sim"], p["ref_mode"], s["steps"],
        s["burn_in"], s["ensemble"], p["h_loc"], p["delta_loc"], field)
    if save:
        histogram.save_point_sets(run.dir, sets)
    return sets


def cmd_sample_points(run):
    sets = _point_sets(run)
    run.summary.update(train=len(sets.train), reference=len(sets.ref), boundary=len(sets.boundary),
                       ref_mode=run.cfg["points"]["ref_mode"])
    if run.plots:
        from . import plotting

        plotting.point_cloud(sets.train, run.path("points_train.png"), sets.period)


def _train_config(run):
    from . import nn

    c = dict(run.cfg["nn"])
    c.pop("hidden")
    return nn.TrainConfig(**c)


def cmd_train_nn(run):
    from . import nn

    sets = _point_sets(run, save=run.cfg["inputs"]["points"] is None)
    grid = run.grid()
    layers = (grid.dim + 1,) + tuple(run.cfg["nn"]["hidden"]) + (1,)
    cfg = _train_config(run)
    model = nn.MlpDensityModel.create(layers, run.seeds["nn/init"], grid.lower + (grid.t1,),
                                      grid.upper + (grid.t1 + grid.period,))

    def progress(epoch, l1, l2, l3):
        print(f"epoch {epoch}: L1={l1:.4g} L2={l2:.4g} L3={l3:.4g}", file=sys.stderr)

    rep = nn.train(model, run.sde(), sets, cfg, run.seeds["nn/train"], progress)
    nn.save_checkpoint(run.path("model.ckpt"), model, cfg.epochs,
                       {"train_config": nn.config_dict(cfg)})
    with open(run.path("history.csv"), "w") as fh:
        fh.write("epoch,L1,L2,L3\n")
        for row in rep.history_rows():
            fh.write(f"{row[0]}," + ",".join(repr(float(v)) for v in row[1:]) + "\n")
    run.summary.update(layer_sizes=list(layers), final_L1=rep.final[0], final_L2=rep.final[1],
                       final_L3=rep.final[2], train_wall_clock=rep.wall_clock,
                       train_config=nn.config_dict(cfg))
    if run.plots:
        from . import plotting

        plotting.loss_history(rep, run.path("history.png"))


def cmd_eval_nn(run):
    from . import nn
    from .config import ConfigError
    from .grid import exact_field, l2_error
    from .sde import exact_density

    ckpt = run.cfg["inputs"]["checkpoint"]
    if ckpt is None:
        raise ConfigError("inputs.checkpoint", "eval-nn needs a trained model checkpoint")
    model, header = nn.load_checkpoint(ckpt)
    grid = run.grid()
    if model.layer_sizes[0] != grid.dim + 1:
        raise ConfigError("grid", f"model expects {model.layer_sizes[0] - 1} spatial inputs")
    fld = nn.evaluate_on_grid(model, grid)
    run.save_field("u_nn", fld, "network")
    run.summary.update(layer_sizes=list(model.layer_sizes), epoch=header.get("epoch"),
                       negative_fraction=float((fld.values < 0).mean()))
    dens = exact_density(run.sde())
    if dens is not None:
        ex = exact_field(grid, dens)
        run.summary["relative_l2_error"] = l2_error(fld, ex) / l2_error(ex, 0 * ex.values)


def _couple(run):
    import numpy as np

    from . import coupling
    from .grid import load_field

    c = dict(run.cfg["coupling"])
    mode, layer = c.pop("init_mode"), c.pop("field_layer")
    cfg = coupling.CouplingConfig(seed=run.seeds["coupling"],
                                  **{k: (tuple(v) if isinstance(v, list) else v) for k, v in c.items()})
    sde = run.sde()
    y0 = None
    if mode == "field":
        from .config import ConfigError

        stem = run.cfg["inputs"]["field"]
        if stem is None:
            raise ConfigError("inputs.field", "init_mode 'field' needs a density table")
        fld = load_field(_stem(stem))
        if layer >= fld.grid.n_layers:
            raise ConfigError("coupling.field_layer", f"field has {fld.grid.n_layers} layers")
        y0 = coupling.sample_from_field(fld, layer, cfg.samples, run.seeds["coupling/mu0"])
    elif cfg.y0 is None:
        from .config import ConfigError

        raise ConfigError("coupling.y0", "required for init_mode 'fixed'")
    res = coupling.couple_pairs(sde, cfg, y0=y0)
    with open(run.path("tau.csv"), "w") as fh:
        fh.write("index,tau,censored\n")
        for i, (t, cen) in enumerate(zip(res.tau, res.censored)):
            fh.write(f"{i},{float(t)!r},{int(cen)}\n")
    run.summary.update(samples=cfg.samples, scheme_far=cfg.scheme_far, d_switch=res.d_switch,
                       t_max=res.t_max, censored_fraction=res.censored_fraction,
                       mean_tau_uncensored=float(np.mean(res.tau[~res.censored]))
                       if (~res.censored).any() else None)
    return res.tau, res.censored, res.t_max


def _survival(run, tau, censored, t_max):
    import numpy as np

    from . import coupling

    t = run.cfg["tail"]
    times = np.arange(0.0, t_max + 0.5 * t["dt"], t["dt"])
    surv = coupling.survival_estimate(tau, censored, times, t_max, t["min_events"])
    surv.save_csv(run.path("survival.csv"))
    return surv


def cmd_couple(run):
    tau, censored, t_max = _couple(run)
    if (~censored).sum() >= run.cfg["tail"]["min_events"]:
        surv = _survival(run, tau, censored, t_max)
        if run.plots:
            from . import plotting

            plotting.survival_plot(surv, run.path("survival.png"))


def cmd_fit_tail(run):
    import numpy as np

    from . import coupling

    stored = run.cfg["inputs"]["tau"]
    if stored is not None:
        data = np.atleast_2d(np.loadtxt(stored, delimiter=",", skiprows=1))
        tau, censored = data[:, 1], data[:, 2].astype(bool)
        t_max = float(tau[censored].max()) if censored.any() else float(tau.max())
        if run.cfg["coupling"]["t_max"] is not None:
            t_max = run.cfg["coupling"]["t_max"]
    else:
        tau, censored, t_max = _couple(run)
    surv = _survival(run, tau, censored, t_max)
    t = run.cfg["tail"]
    fit = coupling.fit_tail(surv, run.sde().period, t["k"], t["n_off"], t["tail_start"])
    fit.save(run.path("fit.json"))
    run.summary.update(fit.to_dict())
    if run.plots:
        from . import plotting

        plotting.survival_plot(surv, run.path("survival.png"), fit)


def cmd_compare_exact(run):
    import numpy as np

    from . import fd
    from .config import ConfigError
    from .grid import exact_field
    from .sde import exact_density

    dens = exact_density(run.sde())
    if dens is None:
        raise ConfigError("sde", "compare-exact needs a system with a closed-form density "
                                 "(stuart_landau or example3 with eps = sqrt(2))")
    if run.cfg["inputs"]["field"] is not None:
        est = run.input_field()
        v = None
    else:
        v = run.input_field()
        sol = run.cfg["solver"]
        op = fd.assemble(run.sde(), v.grid, sol["scheme"], sol["variant"])
        rep = fd.least_norm_solve(op, v, tol=sol["tol"], max_iter=sol["max_iter"])
        rep.save(run.path("solve_report.json"))
        est = rep.solution
        run.save_field("u", est, "least-norm solution")
    g = est.grid
    ex = exact_field(g, dens)
    cell = g.h ** g.dim

    def per_layer(a):
        diff = (a.values - ex.values).reshape(-1, g.n_layers)
        return np.sqrt(cell * np.sum(diff ** 2, axis=0))

    err = per_layer(est)
    norm = np.sqrt(cell * np.sum(ex.values.reshape(-1, g.n_layers) ** 2, axis=0))
    times = g.layer_times()
    with open(run.path("compare.csv"), "w") as fh:
        fh.write("k,t_center,l2_error,relative_l2_error,exact_l2_norm\n")
        for k in range(g.n_layers):
            fh.write(f"{k + 1},{float(times[k])!r},{float(err[k])!r},{float(err[k] / norm[k])!r},"
                     f"{float(norm[k])!r}\n")
    total = float(np.linalg.norm(est.values - ex.values) / np.linalg.norm(ex.values))
    run.summary.update(relative_l2_error=total, estimate_kind=est.kind)
    if v is not None:
        run.summary["input_relative_l2_error"] = float(np.linalg.norm(v.values - ex.values)
                                                       / np.linalg.norm(ex.values))
    if run.plots:
        from . import plotting

        rows = np.column_stack([np.arange(1, g.n_layers + 1), times, err]
                               + ([per_layer(v)] if v is not None else []))
        plotting.error_by_layer(rows, run.path("compare.png"))


COMMANDS = {
    "simulate": cmd_simulate, "histogram": cmd_histogram, "solve-fd": cmd_solve_fd,
    "solve-penalty": cmd_solve_penalty, "angles": cmd_angles, "sample-points": cmd_sample_points,
    "train-nn": cmd_train_nn, "eval-nn": cmd_eval_nn, "couple": cmd_couple,
    "fit-tail": cmd_fit_tail, "compare-exact": cmd_compare_exact,
}


# ---------------------------------------------------------------------------
# manifest and driver


def _artifact_entry(path, rel):
    import hashlib

    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    rows = None
    if rel.endswith(".csv"):
        with open(path, "rb") as fh:
            rows = max(sum(1 for _ in fh) - 1, 0)
    elif rel.endswith(".json"):
        rows = 1
    return {"path": rel, "bytes": os.path.getsize(path), "sha256": h.hexdigest(), "rows": rows}


def _versions():
    import matplotlib
    import numpy
    import scipy

    from . import __version__

    return {"periodicfp": __version__, "python": platform.python_version(),
            "numpy": numpy.__version__, "scipy": scipy.__version__,
            "matplotlib": matplotlib.__version__}


def _write_error(out, subcommand, exc):
    from .config import ConfigError

    os.makedirs(out, exist_ok=True)
    err = {"status": "error", "subcommand": subcommand, "error_type": type(exc).__name__,
           "message": str(exc), "field_path": getattr(exc, "path", None)}
    if not isinstance(exc, ConfigError):
        err["traceback"] = traceback.format_exception_only(type(exc), exc)[-1].strip()
    with open(os.path.join(out, "error.json"), "w") as fh:
        json.dump(err, fh, indent=2, sort_keys=True)
    return 2 if isinstance(exc, ConfigError) else 1


def run(subcommand, config_path, out, seed=None, threads=None):
    """Execute one subcommand; returns the process exit status."""
    if threads is not None:
        if threads < 1:
            return _write_error(out, subcommand, ValueError("--threads must be positive"))
        for var in _THREAD_VARS:
            os.environ[var] = str(threads)
    from . import config

    started = time.time()
    clock = time.perf_counter()
    stage = None
    try:
        cfg = config.load(config_path)
        if seed is not None:
            if not 0 <= seed < 2 ** 64:
                raise config.ConfigError("--seed", "must lie in [0, 2^64)")
            cfg["seed"] = seed
        seeds = config.stage_seeds(cfg["seed"])
        os.makedirs(out, exist_ok=True)
        stage = tempfile.mkdtemp(prefix=".staging-", dir=out)
        job = _Run(cfg, stage, seeds)
        COMMANDS[subcommand](job)
        artifacts = [_artifact_entry(os.path.join(stage, f), f) for f in sorted(os.listdir(stage))]
        manifest = {"status": "ok", "subcommand": subcommand, "config_path": os.path.abspath(config_path),
                    "config_hash": config.canonical_hash(cfg), "config": cfg,
                    "seed": cfg["seed"], "seeds": seeds, "threads": threads,
                    "versions": _versions(), "started_at": started,
                    "wall_clock_seconds": time.perf_counter() - clock,
                    "summary": job.summary, "artifacts": artifacts}
        job.write_json("manifest.json", manifest)
        stale = os.path.join(out, "error.json")
        if os.path.exists(stale):
            os.remove(stale)
        for name in os.listdir(stage):
            os.replace(os.path.join(stage, name), os.path.join(out, name))
        os.rmdir(stage)
        stage = None
        return 0
    except Exception as exc:  # noqa: BLE001 - every failure becomes error.json
        if stage is not None:
            shutil.rmtree(stage, ignore_errors=True)
        code = _write_error(out, subcommand, exc)
        print(f"periodicfp {subcommand}: {exc}", file=sys.stderr)
        return code


def main(argv=None):
    args = _parser().parse_args(argv)
    return run(args.subcommand, args.config, args.out, args.seed, args.threads)


if __name__ == "__main__":
    sys.exit(main())
