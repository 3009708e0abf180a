import json
import os

import numpy as np
import pytest

from periodicfp import cli, config

SL_CFG = {
    "version": 1, "seed": 7,
    "sde": {"builtin": "stuart_landau"},
    "grid": {"lower": [-3, -3], "upper": [3, 3], "counts": [10, 10], "layers": 9},
    "simulation": {"steps": 4000, "burn_in": 500, "ensemble": 10},
    "angles": {"N": 6, "layers": 6, "thicknesses": [1, 2]},
    "points": {"train": 60, "reference": 40, "boundary": 20, "t_max": 1.0, "burn_in_time": 1.0},
    "nn": {"hidden": [4, 4], "epochs": 2},
    "coupling": {"scheme_far": "reflection", "x0": [1.5, 0], "y0": [-1.5, 0], "samples": 300,
                 "t_max": 13},
    "tail": {"k": 1, "n_off": 20, "min_events": 10, "tail_start": 0.0},
    "output": {"plots": False},
}


def write(tmp_path, cfg, name="c.json"):
    p = tmp_path / name
    p.write_text(json.dumps(cfg))
    return str(p)


def run_ok(cmd, cfg_path, out, **kw):
    code = cli.run(cmd, cfg_path, str(out), **kw)
    assert code == 0, (out / "error.json").read_text()
    return json.loads((out / "manifest.json").read_text())


@pytest.mark.parametrize("patch,path", [
    ({"version": 2}, "version"),
    ({"simulation": {"h_sim": -1}}, "simulation.h_sim"),
    ({"sde": {"builtin": "nope"}}, "sde.builtin"),
    ({"grid": {"counts": [5, "x"]}}, "grid.counts[1]"),
    ({"coupling": {"scheme_far": "mirror"}}, "coupling.scheme_far"),
    ({"nn": {"hiddn": [3]}}, "nn.hiddn"),
    ({"extra": 1}, "extra"),
])
def test_field_path_errors(patch, path):
    raw = {"version": 1, "sde": {"builtin": "ring"}}
    raw.update(patch)
    with pytest.raises(config.ConfigError) as err:
        config.validate(raw)
    assert err.value.path == path


def test_cross_field_checks():
    with pytest.raises(config.ConfigError):
        config.validate({"version": 1, "sde": {"builtin": "ring", "drift": ["0", "0"]}})
    with pytest.raises(config.ConfigError):
        config.validate({"version": 1, "sde": {"builtin": "ring"},
                         "simulation": {"steps": 10, "burn_in": 20}})


def test_defaults_and_hash_stability():
    a = config.validate({"version": 1, "sde": {"builtin": "ring"}})
    b = config.validate({"sde": {"builtin": "ring"}, "version": 1})
    assert a["simulation"]["h_sim"] == 1e-3 and a["tail"]["k"] == 6
    assert config.canonical_hash(a) == config.canonical_hash(b)
    assert set(config.stage_seeds(3)) == set(config.SEED_STAGES)
    assert len(set(config.stage_seeds(3).values())) == len(config.SEED_STAGES)


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg_path = write(root, SL_CFG)
    return root, cfg_path


SMOKE = ["simulate", "histogram", "solve-fd", "solve-penalty", "angles", "sample-points",
         "train-nn", "couple", "fit-tail", "compare-exact"]
EXPECTED = {
    "simulate": ["trajectory.csv"],
    "histogram": ["v.csv", "v.json"],
    "solve-fd": ["u.csv", "u.json", "solve_report.json"],
    "solve-penalty": ["u.csv", "solve_report.json"],
    "angles": ["angles_D1.csv", "angles_D2.json"],
    "sample-points": ["points_train.csv", "points_reference.csv", "points_boundary.csv"],
    "train-nn": ["model.ckpt", "history.csv"],
    "couple": ["tau.csv", "survival.csv"],
    "fit-tail": ["fit.json", "survival.csv"],
    "compare-exact": ["compare.csv"],
}


@pytest.mark.parametrize("cmd", SMOKE)
def test_subcommand_smoke(workspace, cmd):
    root, cfg_path = workspace
    out = root / cmd
    manifest = run_ok(cmd, cfg_path, out)
    names = {a["path"] for a in manifest["artifacts"]}
    assert set(EXPECTED[cmd]) <= names
    for art in manifest["artifacts"]:
        assert os.path.getsize(out / art["path"]) == art["bytes"]
        assert len(art["sha256"]) == 64
        assert art["rows"] is None if art["path"].endswith((".ckpt", ".png")) else art["rows"] >= 1
    for key in ("config_hash", "seeds", "versions", "wall_clock_seconds", "started_at", "seed"):
        assert key in manifest
    assert not [p for p in os.listdir(out) if p.startswith(".staging")]


def test_eval_nn_reads_checkpoint(workspace):
    root, cfg_path = workspace
    run_ok("train-nn", cfg_path, root / "train")
    cfg = dict(SL_CFG, inputs={"checkpoint": "train/model.ckpt"})
    manifest = run_ok("eval-nn", write(root, cfg, "ev.json"), root / "eval")
    assert "relative_l2_error" in manifest["summary"]
    assert os.path.exists(root / "eval" / "u_nn.csv")


def test_rerun_is_byte_identical(workspace):
    root, cfg_path = workspace
    for tag in ("a", "b"):
        run_ok("histogram", cfg_path, root / f"rep_{tag}")
        run_ok("couple", cfg_path, root / f"rep_{tag}")
    for name in ("v.csv", "tau.csv", "survival.csv"):
        assert (root / "rep_a" / name).read_bytes() == (root / "rep_b" / name).read_bytes()


def test_seed_flag_changes_output(workspace):
    root, cfg_path = workspace
    m = run_ok("couple", cfg_path, root / "seed99", seed=99)
    assert m["seed"] == 99
    assert (root / "seed99" / "tau.csv").read_bytes() != (root / "rep_a" / "tau.csv").read_bytes()


def test_compare_exact_rows_per_layer(workspace):
    root, _ = workspace
    rows = np.loadtxt(root / "compare-exact" / "compare.csv", delimiter=",", skiprows=1)
    assert rows.shape == (SL_CFG["grid"]["layers"] - 1, 5)


def test_fit_tail_coefficients(workspace):
    root, _ = workspace
    fit = json.loads((root / "fit-tail" / "fit.json").read_text())
    assert len(fit["a"]) + len(fit["b"]) == 2 * fit["k"] + 1
    assert fit["r"] > 0


def test_failure_leaves_only_error_json(tmp_path):
    bad = write(tmp_path, {"version": 1, "sde": {"builtin": "ring"}, "simulation": {"h_sim": -1}})
    out = tmp_path / "out"
    assert cli.run("simulate", bad, str(out)) == 2
    assert os.listdir(out) == ["error.json"]
    err = json.loads((out / "error.json").read_text())
    assert err["status"] == "error" and err["field_path"] == "simulation.h_sim"


def test_runtime_failure_cleans_staging(tmp_path):
    cfg = dict(SL_CFG, inputs={"checkpoint": "missing.ckpt"})
    out = tmp_path / "out"
    assert cli.run("eval-nn", write(tmp_path, cfg), str(out)) == 1
    assert os.listdir(out) == ["error.json"]


def test_compare_exact_refuses_systems_without_closed_form(tmp_path):
    cfg = {"version": 1, "sde": {"builtin": "ring"}, "grid": SL_CFG["grid"]}
    out = tmp_path / "out"
    assert cli.run("compare-exact", write(tmp_path, cfg), str(out)) == 2
    assert json.loads((out / "error.json").read_text())["field_path"] == "sde"


def test_success_clears_stale_error(tmp_path):
    out = tmp_path / "out"
    out.mkdir()
    (out / "error.json").write_text("{}")
    cfg = {"version": 1, "sde": {"builtin": "ring"}, "simulation": {"steps": 50, "burn_in": 0},
           "output": {"plots": False}}
    assert cli.run("simulate", write(tmp_path, cfg), str(out)) == 0
    assert not (out / "error.json").exists()


def test_main_parses_flags(tmp_path):
    cfg = {"version": 1, "sde": {"builtin": "ring"}, "simulation": {"steps": 50, "burn_in": 0},
           "output": {"plots": False}}
    out = tmp_path / "o"
    assert cli.main(["simulate", "--config", write(tmp_path, cfg), "--out", str(out),
                     "--seed", "4", "--threads", "1"]) == 0
    m = json.loads((out / "manifest.json").read_text())
    assert m["threads"] == 1 and m["seed"] == 4


def test_plots_are_rendered(tmp_path):
    cfg = dict(SL_CFG, output={"plots": True})
    out = tmp_path / "p"
    run_ok("histogram", write(tmp_path, cfg), out)
    assert (out / "v.png").read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"
