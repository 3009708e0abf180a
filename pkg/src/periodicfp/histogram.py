"""Monte Carlo occupation estimates and collocation point sets.

Sample-to-box normalisation: with ``N_ret`` retained samples taken at a
uniform step, the table ``v = count * T / (N_ret * h^n * delta)`` makes each
time slice integrate (``h^n * sum``) to the fraction of that phase's samples
inside the domain.  Summed over the table, ``h^n * delta * sum(v) / T`` is the
overall inside fraction.
"""

import os
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from . import noise
from .grid import DensityField
from .sde import iter_ensemble

DEFAULT_BURN_IN = 100_000
N_BATCHES = 10


def initial_states(sde, grid, ensemble, seed, init="default"):
    """Starting states: all at ``sde.default_state()`` or uniform on the domain."""
    if init == "default":
        return np.tile(sde.default_state(), (ensemble, 1))
    if init == "uniform":
        u = noise.uniform(noise.derive_seed(seed, "init"), np.arange(ensemble)[:, None], 0,
                          np.arange(grid.dim)[None, :])
        lo, hi = np.asarray(grid.lower), np.asarray(grid.upper)
        return lo + (hi - lo) * u
    raise ValueError(f"init must be 'default' or 'uniform', got {init!r}")


def retained_samples(sde, grid, steps, h_sim, burn_in, seed, ensemble=1, init="default",
                     t0=None, chunk=2000, origin_radius=None):
    """Yield ``(times, states, alive)`` blocks after burn-in.

    ``steps`` counts every step of each member, burn-in included.  With
    ``origin_radius`` set, a member that ever enters that ball around the
    origin is dropped from all later blocks (``alive`` is False).
    """
    if steps <= burn_in:
        raise ValueError("steps must exceed burn_in")
    t0 = grid.t1 if t0 is None else t0
    x0 = initial_states(sde, grid, ensemble, seed, init)
    alive = np.ones(ensemble, dtype=bool)
    done = 0
    for times, block in iter_ensemble(sde, x0, t0, steps, h_sim, seed, chunk=chunk):
        c = len(times)
        if origin_radius is not None:
            hit = np.linalg.norm(block, axis=-1) < origin_radius
            first = np.where(hit.any(axis=0), hit.argmax(axis=0), c)
            mask = alive[None, :] & (np.arange(c)[:, None] < first[None, :])
            alive &= ~hit.any(axis=0)
        else:
            mask = np.ones((c, ensemble), dtype=bool)
        lo = max(burn_in - done, 0)
        if lo < c:
            yield times[lo:], block[lo:], mask[lo:]
        done += c


def _check_alignment(grid, h_sim):
    ratio = grid.delta / h_sim
    if abs(ratio - round(ratio)) > 1e-9 * ratio:
        return (f"simulation step {h_sim} does not divide the layer width {grid.delta:.6g}; "
                "layers receive slightly unequal sample counts")
    return None


def occupation_estimate(sde, grid, steps, h_sim, burn_in=DEFAULT_BURN_IN, seed=0, ensemble=1,
                        init=None, t0=None, origin_radius=None, batches=N_BATCHES):
    """Box-count estimate ``v`` of the periodic density on ``grid``.

    ``ensemble`` members each run ``steps`` steps (``burn_in`` discarded) with
    independent noise streams; ``init`` defaults to the system's state for a
    single run and to uniform starts on the domain for ensembles.  Per-box
    standard errors come from batch means over ``batches`` groups (members for
    ensembles, consecutive time blocks otherwise).
    """
    if sde.dimension != grid.dim:
        raise ValueError(f"grid dimension {grid.dim} does not match SDE dimension {sde.dimension}")
    if not h_sim > 0:
        raise ValueError("h_sim must be positive")
    init = init or ("default" if ensemble == 1 else "uniform")
    notes = []
    msg = _check_alignment(grid, h_sim)
    if msg:
        notes.append(msg)
    retained_per_member = steps - burn_in
    n_batch = max(1, min(batches, ensemble if ensemble > 1 else retained_per_member))
    counts = np.zeros((n_batch, grid.size), dtype=np.int64)
    kept = np.zeros(n_batch, dtype=np.int64)
    total = 0
    strides = np.array([int(np.prod(grid.shape[a + 1:])) for a in range(grid.dim + 1)])
    member_batch = np.arange(ensemble) % n_batch
    seen = 0
    for times, block, mask in retained_samples(sde, grid, steps, h_sim, burn_in, seed, ensemble,
                                               init, t0, origin_radius=origin_radius):
        c = len(times)
        if ensemble > 1:
            batch = np.broadcast_to(member_batch, (c, ensemble))
        else:
            step_index = seen + np.arange(c)
            batch = np.broadcast_to((step_index * n_batch // retained_per_member)[:, None], (c, 1))
        seen += c
        idx, inside = grid.box_of(block)
        layer = np.broadcast_to(grid.layer_of(times)[:, None], (c, ensemble))
        np.add.at(kept, batch[mask], 1)
        total += int(mask.sum())
        sel = inside & mask
        flat = (idx[sel] * strides[:-1]).sum(axis=-1) + layer[sel]
        key = batch[sel] * grid.size + flat
        counts += np.bincount(key, minlength=n_batch * grid.size).reshape(n_batch, grid.size)
    if total == 0:
        raise ValueError("no retained samples")
    scale = grid.period / (grid.h ** grid.dim * grid.delta)
    values = (counts.sum(axis=0) * scale / total).reshape(grid.shape)
    inside_fraction = counts.sum() / total
    stderr = None
    if n_batch > 1 and np.all(kept > 0):
        per_batch = counts * scale / kept[:, None]
        stderr = (per_batch.std(axis=0, ddof=1) / np.sqrt(n_batch)).reshape(grid.shape)
    if inside_fraction < 0.5:
        notes.append(f"{100 * (1 - inside_fraction):.1f}% of samples fell outside the domain")
    for m in notes:
        warnings.warn(m, RuntimeWarning, stacklevel=2)
    return DensityField(grid, values, "monte_carlo_v", sample_count=total, seed=seed, stderr=stderr,
                        inside_fraction=float(inside_fraction), warnings=notes,
                        meta={"steps": steps, "h_sim": h_sim, "burn_in": burn_in,
                              "ensemble": ensemble, "init": init})


# ---------------------------------------------------------------------------
# point sets for the neural solver

@dataclass
class PointSets:
    train: np.ndarray          # (NX, n+1) collocation points (x, t)
    ref: np.ndarray            # (NY, n+1) reference points
    ref_values: np.ndarray     # (NY,) density estimates at ref
    boundary: np.ndarray       # (NZ, n) spatial points, paired with t1 and t1+T
    t1: float
    period: float

    def boundary_points(self):
        """``(2*NZ, n+1)``: every boundary point at ``t1`` then at ``t1 + T``."""
        nz = len(self.boundary)
        lo = np.column_stack([self.boundary, np.full(nz, self.t1)])
        hi = np.column_stack([self.boundary, np.full(nz, self.t1 + self.period)])
        return np.concatenate([lo, hi])


def _uniform_points(grid, seed, stream, first, count):
    """``count`` uniform space-time points; point ``first + p`` is keyed by lane block."""
    d = grid.dim + 1
    steps = np.arange(first, first + count)
    u = noise.uniform(seed, stream, steps[:, None], np.arange(d)[None, :])
    lo = np.append(grid.lower, grid.t1)
    hi = np.append(grid.upper, grid.t1 + grid.period)
    return lo + (hi - lo) * u


def boundary_pairs(grid, count, seed):
    """``count`` uniform spatial points; each is used at both ends of the period."""
    if count < 1:
        raise ValueError("count must be at least 1")
    u = noise.uniform(noise.derive_seed(seed, "boundary"), 0, np.arange(count)[:, None],
                      np.arange(grid.dim)[None, :])
    lo, hi = np.asarray(grid.lower), np.asarray(grid.upper)
    return lo + (hi - lo) * u


def sample_collocation(sde, grid, count, alpha, burn_in_time, t_max, seed, h_sim=1e-3, chains=64):
    """Mixed trajectory/uniform collocation points on ``grid``'s domain.

    Each point first draws ``c ~ U(0, 1)``.  If ``c <= alpha`` the chain it
    belongs to evolves a further ``U(0, t_max)`` time and its position is
    recorded with the time folded into ``[t1, t1 + T)``; otherwise the point
    is uniform on the domain.  Trajectory points that leave the domain are
    discarded and replaced.  Points are spread round-robin over ``chains``
    independent chains so the work vectorises.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    if not t_max > 0:
        raise ValueError("t_max must be positive")
    n = grid.dim
    if count == 0:
        return np.empty((0, n + 1))
    s_dec = noise.derive_seed(seed, "collocation/decide")
    s_uni = noise.derive_seed(seed, "collocation/uniform")
    s_sde = noise.derive_seed(seed, "collocation/sde")
    burn_steps = int(round(burn_in_time / h_sim))
    x = initial_states(sde, grid, chains, seed, "uniform")
    step = 0
    if burn_steps > 0:
        for _, block in iter_ensemble(sde, x, grid.t1, burn_steps, h_sim, s_sde, chunk=1000):
            x = block[-1]
        step = burn_steps
    out, have, drawn = [], 0, 0
    while have < count:
        want = count - have
        batch = int(want * 1.1) + chains
        ids = drawn + np.arange(batch)
        c = noise.uniform(s_dec, 0, ids, 0)
        wait = noise.uniform(s_dec, 0, ids, 1) * t_max
        pts = _uniform_points(grid, s_uni, 0, drawn, batch)
        traj = np.flatnonzero(c <= alpha)
        if len(traj):
            chain = traj % chains
            wait_steps = np.maximum(1, np.round(wait[traj] / h_sim).astype(np.int64))
            target = np.empty(len(traj), dtype=np.int64)
            for ch in range(chains):
                sel = chain == ch
                target[sel] = np.cumsum(wait_steps[sel])
            horizon = int(target.max())
            order = np.argsort(target, kind="stable")
            pos, k0 = 0, 0
            for times, block in iter_ensemble(sde, x, grid.t1, horizon, h_sim, s_sde, chunk=1000,
                                              first_step=step):
                k1 = k0 + len(times)
                end = np.searchsorted(target[order], k1, side="right")
                for p in order[pos:end]:
                    row = target[p] - k0 - 1
                    pts[traj[p], :n] = block[row, chain[p]]
                    pts[traj[p], n] = grid.t1 + np.mod(times[row] - grid.t1, grid.period)
                pos, k0 = end, k1
                x = block[-1]
            step += horizon
        ok = grid.contains(pts[:, :n])
        pts = pts[ok][:want]
        out.append(pts)
        have += len(pts)
        drawn += batch
    return np.concatenate(out)


def local_density_at(points, sde, grid, steps, h_sim, burn_in, h_loc, delta_loc, seed, ensemble=1,
                     init=None, t0=None, max_block=1_000_000):
    """Mesh-free density estimate at each ``(x, t)`` in ``points``.

    Counts retained samples in the box of half-widths ``h_loc`` (space) and
    ``delta_loc`` (cyclic time) around each point and normalises with the same
    rule as :func:`occupation_estimate`.  ``grid`` only supplies the period,
    ``t1`` and (for uniform starts) the initial domain.
    """
    if not (h_loc > 0 and delta_loc > 0):
        raise ValueError("h_loc and delta_loc must be positive")
    points = np.atleast_2d(np.asarray(points, dtype=float))
    n, T = sde.dimension, grid.period
    init = init or ("default" if ensemble == 1 else "uniform")
    scale_t = h_loc / delta_loc

    def embed(x, t):
        phase = np.mod(t - grid.t1, T)
        return np.column_stack([x, phase * scale_t]), phase

    qry, _ = embed(points[:, :n], points[:, n])
    counts = np.zeros(len(points), dtype=np.int64)
    total = 0
    buf = []

    def flush():
        nonlocal counts
        if not buf:
            return
        pts = np.concatenate(buf)
        buf.clear()
        phase = pts[:, n] / scale_t
        lo = phase < delta_loc
        hi = phase > T - delta_loc
        wrap_lo, wrap_hi = pts[lo].copy(), pts[hi].copy()
        wrap_lo[:, n] += T * scale_t
        wrap_hi[:, n] -= T * scale_t
        tree = cKDTree(np.concatenate([pts, wrap_lo, wrap_hi]))
        counts += tree.query_ball_point(qry, h_loc, p=np.inf, return_length=True)

    held = 0
    for times, block, mask in retained_samples(sde, grid, steps, h_sim, burn_in, seed, ensemble,
                                               init, t0):
        c = len(times)
        x = block[mask]
        t = np.broadcast_to(times[:, None], (c, ensemble))[mask]
        emb, _ = embed(x, t)
        buf.append(emb)
        total += len(x)
        held += len(x)
        if held >= max_block:
            flush()
            held = 0
    flush()
    return counts * T / (total * (2 * h_loc) ** n * 2 * delta_loc)


def build_point_sets(sde, grid, n_train, n_ref, n_boundary, seed, alpha=0.5, burn_in_time=10.0,
                     t_max=5.0, h_sim=1e-3, ref_mode="mesh_free", steps=None, burn_in=None,
                     ensemble=1, h_loc=None, delta_loc=None, field=None):
    """The three training sets with reference values attached.

    ``ref_mode="mesh_free"`` samples 𝔜 like 𝔛 and estimates the density at
    each point with :func:`local_density_at` (``h_loc``/``delta_loc`` default to
    half a box and half a layer of ``grid``).  ``ref_mode="grid"`` takes
    box centres of the occupation table ``field`` (computed on ``grid`` when not
    supplied), keeping ``n_ref`` of them chosen at random, or all if ``n_ref``
    is ``None``.
    """
    train = sample_collocation(sde, grid, n_train, alpha, burn_in_time, t_max,
                               noise.derive_seed(seed, "points/train"), h_sim)
    boundary = boundary_pairs(grid, n_boundary, noise.derive_seed(seed, "points/boundary"))
    mc_seed = noise.derive_seed(seed, "points/reference")
    if ref_mode == "mesh_free":
        if steps is None:
            raise ValueError("mesh-free reference values need a step count")
        burn = DEFAULT_BURN_IN if burn_in is None else burn_in
        ref = sample_collocation(sde, grid, n_ref, alpha, burn_in_time, t_max,
                                 noise.derive_seed(seed, "points/ref_locations"), h_sim)
        values = local_density_at(ref, sde, grid, steps, h_sim, burn,
                                  h_loc or grid.h / 2, delta_loc or grid.delta / 2, mc_seed,
                                  ensemble)
    elif ref_mode == "grid":
        if field is None:
            if steps is None:
                raise ValueError("grid reference values need a step count or a field")
            burn = DEFAULT_BURN_IN if burn_in is None else burn_in
            field = occupation_estimate(sde, grid, steps, h_sim, burn, mc_seed, ensemble)
        mesh = field.grid.mesh()
        pts = np.stack([m.ravel() for m in mesh], axis=1)
        vals = field.values.ravel()
        if n_ref is not None and n_ref < len(pts):
            pick = np.sort(np.argsort(noise.uniform(mc_seed, 1, np.arange(len(pts)), 0))[:n_ref])
            pts, vals = pts[pick], vals[pick]
        ref, values = pts, vals
    else:
        raise ValueError("ref_mode must be 'mesh_free' or 'grid'")
    return PointSets(train, ref, np.asarray(values, dtype=float), boundary, grid.t1, grid.period)


def save_point_sets(directory, sets):
    """Write ``points_{train,reference,boundary}.csv`` into ``directory``; returns the paths."""
    n = sets.train.shape[1] - 1
    xs = [f"x{i + 1}" for i in range(n)]
    out = []
    for name, data, cols in (("train", sets.train, xs + ["t"]),
                             ("reference", np.column_stack([sets.ref, sets.ref_values]),
                              xs + ["t", "value"]),
                             ("boundary", sets.boundary_points(), xs + ["t"])):
        path = os.path.join(directory, f"points_{name}.csv")
        np.savetxt(path, data, delimiter=",", header=",".join(cols), comments="", fmt="%.17g")
        out.append(path)
    return out


def load_point_sets(directory, period, t1=0.0):
    def read(name):
        return np.atleast_2d(np.loadtxt(os.path.join(directory, f"points_{name}.csv"),
                                        delimiter=",", skiprows=1))

    train, ref, bnd = read("train"), read("reference"), read("boundary")
    nz = len(bnd) // 2
    return PointSets(train, ref[:, :-1], ref[:, -1], bnd[:nz, :-1], t1, period)
