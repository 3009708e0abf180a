"""Coupled Euler-Maruyama chains, coupling-time tails and rate fits.

Far apart, the two chains move under an independent, synchronous or
reflection coupling of their Gaussian steps.  Once ``|X - Y| < d_switch`` each
step is a maximal coupling of the two one-step kernels, which merges the
chains with probability ``1 - TV``.  The coupling time is the first merge.

Pairs run vectorised and are compacted as they merge; every random number
is a counter-based draw keyed by ``(seed, pair, step, lane)`` so results do
not depend on batch composition.
"""

import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import noise

SCHEMES = ("independent", "synchronous", "reflection")
MAX_RESIDUAL_ATTEMPTS = 100


@dataclass
class CouplingConfig:
    scheme_far: str = "reflection"
    d_switch: float = None
    t_max: float = None
    h_sim: float = 1e-3
    x0: tuple = None
    y0: tuple = None
    start_time: float = 0.0
    samples: int = 1000
    seed: int = 0

    def validate(self, sde):
        if self.scheme_far not in SCHEMES:
            raise ValueError(f"scheme_far must be one of {SCHEMES}")
        if self.samples < 1:
            raise ValueError("samples must be at least 1")
        if not self.h_sim > 0:
            raise ValueError("h_sim must be positive")
        if self.resolved_d_switch(sde) < 0:
            raise ValueError("d_switch must be non-negative (0 disables the maximal coupling)")
        if not self.resolved_t_max(sde) > 0:
            raise ValueError("t_max must be positive")

    def resolved_t_max(self, sde):
        return 30.0 * sde.period if self.t_max is None else float(self.t_max)

    def resolved_d_switch(self, sde):
        if self.d_switch is not None:
            return float(self.d_switch)
        x = np.zeros(sde.dimension) if self.x0 is None else np.asarray(self.x0, dtype=float)
        sig = np.abs(sde.diffusion(x, self.start_time)).max()
        return 2.0 * sig * np.sqrt(self.h_sim)


@dataclass
class CouplingResult:
    tau: np.ndarray
    censored: np.ndarray
    t_max: float
    d_switch: float
    scheme_far: str

    @property
    def censored_fraction(self):
        return float(np.mean(self.censored))


def _solve(mat, vec):
    """Batched ``mat^{-1} vec`` with a shortcut for diagonal matrices."""
    n = mat.shape[-1]
    diag = np.diagonal(mat, axis1=-2, axis2=-1)
    if n == 1 or not np.any(mat - diag[..., None] * np.eye(n)):
        return vec / diag
    return np.linalg.solve(mat, vec[..., None])[..., 0]


def _logdet(mat):
    n = mat.shape[-1]
    diag = np.diagonal(mat, axis1=-2, axis2=-1)
    if n == 1 or not np.any(mat - diag[..., None] * np.eye(n)):
        return np.sum(np.log(diag), axis=-1)
    return np.linalg.slogdet(mat)[1]


def _log_gauss(z, mean, cov):
    d = z - mean
    sol = _solve(cov, d)
    logdet = _logdet(cov)
    n = z.shape[-1]
    return -0.5 * np.sum(d * sol, axis=-1) - 0.5 * (logdet + n * np.log(2 * np.pi))


def _reflect(sig_x, x, y, xi):
    """Mirror ``xi`` in the hyperplane orthogonal to ``e ~ sigma^{-1}(x - y)``."""
    with np.errstate(divide="raise", invalid="raise"):
        try:
            e = _solve(sig_x, x - y)
        except (np.linalg.LinAlgError, FloatingPointError):
            raise ValueError("reflection coupling needs a nondegenerate diffusion matrix") from None
    norm = np.linalg.norm(e, axis=-1, keepdims=True)
    e = np.divide(e, norm, out=np.zeros_like(e), where=norm > 0)
    return xi - 2.0 * np.sum(e * xi, axis=-1, keepdims=True) * e


def _bridge_meets(sig, d0, d1, h, u):
    """Did reflected chains meet during the step?

    In ``sigma^{-1}`` coordinates the separation along the mirror normal is a
    Brownian motion of variance ``4 h`` per step, so given positive endpoints
    ``m0``, ``m1`` it touched zero with probability ``exp(-m0 m1 / (2 h))``.
    """
    z0 = _solve(sig, d0)
    z1 = _solve(sig, d1)
    m0 = np.linalg.norm(z0, axis=-1)
    e = z0 / np.where(m0 > 0, m0, 1.0)[:, None]
    m1 = np.sum(z1 * e, axis=-1)
    return (m1 <= 0) | (u < np.exp(-np.clip(m0 * m1, 0.0, None) / (2.0 * h)))


def _lanes(n):
    """Lane layout inside one step: X noise, Y noise, accept uniform, residual draws."""
    return {"x": 0, "y": n, "u": 2 * n, "res_g": 4 * n, "res_u": 4 * n + MAX_RESIDUAL_ATTEMPTS * n}


def maximal_step(mx, cov_x, my, cov_y, keys, step, sqrt_h_sig_x, sqrt_h_sig_y):
    """One maximal coupling of ``N(mx, cov_x)`` and ``N(my, cov_y)``.

    ``keys`` are the per-pair stream keys (:func:`noise.stream_key`).
    Returns ``(x_new, y_new, merged)``.
    """
    n = mx.shape[-1]
    lanes = _lanes(n)
    xi = noise.gaussian_keyed(keys[:, None], step, np.arange(n)[None, :] + lanes["x"])
    x_new = mx + np.einsum("bij,bj->bi", sqrt_h_sig_x, xi)
    u = noise.uniform_keyed(keys, step, lanes["u"])
    log_ratio = _log_gauss(x_new, my, cov_y) - _log_gauss(x_new, mx, cov_x)
    merged = np.log(u) <= np.minimum(log_ratio, 0.0)
    y_new = x_new.copy()
    rej = np.flatnonzero(~merged)
    if len(rej):
        y_new[rej] = _residual_draw(mx[rej], cov_x[rej], my[rej], cov_y[rej], keys[rej], step,
                                    sqrt_h_sig_y[rej])
    return x_new, y_new, merged


def _residual_draw(mx, cov_x, my, cov_y, keys, step, sqrt_h_sig_y):
    """Draw from the part of ``N(my, cov_y)`` not shared with ``N(mx, cov_x)``."""
    n = mx.shape[-1]
    lanes = _lanes(n)
    out = np.empty_like(my)
    pending = np.arange(len(my))
    first = None
    # the first candidate doubles as the fallback independent draw
    for a in range(MAX_RESIDUAL_ATTEMPTS):
        if not len(pending):
            break
        xi = noise.gaussian_keyed(keys[pending][:, None], step,
                                  lanes["res_g"] + a * n + np.arange(n)[None, :])
        cand = my[pending] + np.einsum("bij,bj->bi", sqrt_h_sig_y[pending], xi)
        if first is None:
            first = cand.copy()
        u = noise.uniform_keyed(keys[pending], step, lanes["res_u"] + a)
        # accept with probability 1 - min(1, phi_x / phi_y)
        log_ratio = _log_gauss(cand, mx[pending], cov_x[pending]) - _log_gauss(cand, my[pending],
                                                                              cov_y[pending])
        accept = u <= -np.expm1(np.minimum(log_ratio, 0.0))
        out[pending[accept]] = cand[accept]
        pending = pending[~accept]
    if len(pending):
        out[pending] = first[pending]
    return out


def couple_pairs(sde, config, x0=None, y0=None):
    """Simulate ``config.samples`` coupled pairs; returns a :class:`CouplingResult`.

    ``x0``/``y0`` override the config and may hold one state or one per pair.
    """
    config.validate(sde)
    n, ns = sde.dimension, config.samples
    h = config.h_sim
    sqrt_h = np.sqrt(h)
    t_max = config.resolved_t_max(sde)
    d_switch = config.resolved_d_switch(sde)
    x0 = config.x0 if x0 is None else x0
    y0 = config.y0 if y0 is None else y0
    x = np.array(np.broadcast_to(np.asarray(x0 if x0 is not None else sde.default_state(),
                                            dtype=float), (ns, n)))
    y = np.array(np.broadcast_to(np.asarray(y0, dtype=float), (ns, n)))
    tau = np.full(ns, t_max)
    censored = np.ones(ns, dtype=bool)
    same = np.all(x == y, axis=1)
    tau[same], censored[same] = 0.0, False
    active = np.flatnonzero(~same)
    x, y = x[active], y[active]
    max_steps = int(round(t_max / h))
    lanes = _lanes(n)
    keys = noise.stream_key(config.seed, active)
    for k in range(max_steps):
        if not len(active):
            break
        t = config.start_time + k * h
        fx, fy = sde.drift(x, t), sde.drift(y, t)
        sx, sy = sde.diffusion(x, t), sde.diffusion(y, t)
        mx, my = x + fx * h, y + fy * h
        dist = np.linalg.norm(x - y, axis=1)
        near = dist < d_switch
        far = ~near
        x_new, y_new = np.empty_like(x), np.empty_like(y)
        merged = np.zeros(len(active), dtype=bool)
        if far.any():
            idx = np.flatnonzero(far)
            kk = keys[idx][:, None]
            if config.scheme_far == "independent":
                both = noise.gaussian_keyed(kk, k, np.arange(2 * n)[None, :])
                xi, eta = both[:, :n], both[:, n:]
            elif config.scheme_far == "synchronous":
                xi = noise.gaussian_keyed(kk, k, lanes["x"] + np.arange(n)[None, :])
                eta = xi
            else:
                xi = noise.gaussian_keyed(kk, k, lanes["x"] + np.arange(n)[None, :])
                eta = _reflect(np.broadcast_to(sx, (len(x),) + sx.shape[-2:])[idx], x[idx], y[idx], xi)
            sxi = np.broadcast_to(sx, (len(x), n, n))[idx]
            syi = np.broadcast_to(sy, (len(y), n, n))[idx]
            x_new[idx] = mx[idx] + np.einsum("bij,bj->bi", sxi, xi) * sqrt_h
            y_new[idx] = my[idx] + np.einsum("bij,bj->bi", syi, eta) * sqrt_h
            if config.scheme_far == "reflection":
                u = noise.uniform_keyed(keys[idx], k, lanes["u"] + 1)
                hit = _bridge_meets(sxi, x[idx] - y[idx], x_new[idx] - y_new[idx], h, u)
                y_new[idx[hit]] = x_new[idx[hit]]
                merged[idx[hit]] = True
        if near.any():
            idx = np.flatnonzero(near)
            sxi = np.broadcast_to(sx, (len(x), n, n))[idx]
            syi = np.broadcast_to(sy, (len(y), n, n))[idx]
            cov_x = h * sxi @ np.swapaxes(sxi, -1, -2)
            cov_y = h * syi @ np.swapaxes(syi, -1, -2)
            xn, yn, mg = maximal_step(mx[idx], cov_x, my[idx], cov_y, keys[idx], k,
                                      sxi * sqrt_h, syi * sqrt_h)
            x_new[idx], y_new[idx], merged[idx] = xn, yn, mg
        x, y = x_new, y_new
        if merged.any():
            done = active[merged]
            tau[done] = (k + 1) * h
            censored[done] = False
            keep = ~merged
            active, keys, x, y = active[keep], keys[keep], x[keep], y[keep]
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
            raise FloatingPointError(f"coupled chains diverged at step {k}")
    return CouplingResult(tau, censored, t_max, d_switch, config.scheme_far)


def sample_from_field(fld, layer, count, seed):
    """Initial states drawn from the positive part of one layer of a density table."""
    g = fld.grid
    w = np.clip(fld.values[..., layer], 0.0, None).ravel()
    if not w.sum() > 0:
        raise ValueError("density slice has no positive mass")
    cdf = np.cumsum(w) / w.sum()
    u = noise.uniform(seed, 0, np.arange(count)[:, None], np.arange(g.dim + 1)[None, :])
    box = np.minimum(np.searchsorted(cdf, u[:, 0], side="left"), len(cdf) - 1)
    idx = np.stack(np.unravel_index(box, g.counts), axis=1)
    return np.asarray(g.lower) + (idx + u[:, 1:]) * g.h


# ---------------------------------------------------------------------------
# survival and tail fits

@dataclass
class Survival:
    times: np.ndarray
    S: np.ndarray
    ci_lo: np.ndarray
    ci_hi: np.ndarray
    n: int
    censored_fraction: float

    def save_csv(self, path):
        with open(path, "w") as fh:
            fh.write("t,S,ci_lo,ci_hi\n")
            for row in zip(self.times, self.S, self.ci_lo, self.ci_hi):
                fh.write(",".join(repr(float(v)) for v in row) + "\n")
        return len(self.times)


def survival_estimate(tau, censored, times, t_max=None, min_events=100):
    """Empirical ``P[tau > t]`` with a 95% normal-approximation band.

    Censored samples count as surviving; grid points beyond ``t_max`` are
    dropped.
    """
    tau = np.asarray(tau, dtype=float)
    censored = np.zeros(len(tau), dtype=bool) if censored is None else np.asarray(censored, bool)
    if np.sum(~censored) < min_events:
        raise ValueError(f"need at least {min_events} uncensored samples, got {np.sum(~censored)}")
    times = np.asarray(times, dtype=float)
    if t_max is not None:
        times = times[times <= t_max]
    n = len(tau)
    event = np.sort(tau[~censored])
    s = (n - np.searchsorted(event, times, side="right")) / n
    half = 1.96 * np.sqrt(s * (1.0 - s) / n)
    return Survival(times, s, np.clip(s - half, 0.0, 1.0), np.clip(s + half, 0.0, 1.0), n,
                    float(np.mean(censored)))


@dataclass
class TailFit:
    rate: float
    period: float
    k: int
    n_off: int
    tail_start: float
    window: tuple
    a: np.ndarray = None       # a_0, a_1..a_k (sine coefficients after a_0)
    b: np.ndarray = None       # b_1..b_k (cosine)
    r2: float = None
    slopes: np.ndarray = field(default=None, repr=False)
    censored_fraction: float = 0.0
    band_fraction: float = None
    warnings: list = field(default_factory=list)

    @property
    def omega(self):
        return 2 * np.pi / self.period

    def log_prefactor(self, t):
        t = np.asarray(t, dtype=float)
        j = np.arange(1, len(self.b) + 1)
        ph = self.omega * t[..., None] * j
        return self.a[0] + np.sum(self.a[1:] * np.sin(ph) + self.b * np.cos(ph), axis=-1)

    def to_dict(self):
        return {"r": self.rate, "period": self.period, "omega": self.omega, "k": self.k,
                "n_off": self.n_off, "tail_start": self.tail_start, "window": list(self.window),
                "a": None if self.a is None else [float(v) for v in self.a],
                "b": None if self.b is None else [float(v) for v in self.b],
                "R2": self.r2, "censored_fraction": self.censored_fraction,
                "band_fraction": self.band_fraction, "warnings": list(self.warnings)}

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)


def _usable_periods(times, S, period, k, tail_start):
    """Largest ``k' <= k`` with ``S > 0`` on ``[tail_start, tail_start + (k'+1) T]``."""
    for kk in range(k, 0, -1):
        end = tail_start + (kk + 1) * period
        if end > times[-1] + 1e-12:
            continue
        sel = (times >= tail_start) & (times <= end)
        # interpolation also uses the neighbouring grid point on each side
        lo = max(np.searchsorted(times, tail_start, side="right") - 1, 0)
        hi = min(np.searchsorted(times, end, side="left"), len(times) - 1)
        if np.all(S[lo:hi + 1] > 0) and sel.any():
            return kk
    return 0


def fit_rate(times, S, period, k=6, n_off=200, tail_start=0.0, censored_fraction=0.0):
    """Average the log-survival slopes along ``{t_i + jT}_{j=0..k}``.

    Offsets ``t_i`` are ``n_off`` equispaced points in ``[tail_start,
    tail_start + T)``; ``log S`` is linearly interpolated.  Returns a
    :class:`TailFit` with the rate set.
    """
    times, S = np.asarray(times, dtype=float), np.asarray(S, dtype=float)
    notes = []
    kk = _usable_periods(times, S, period, k, tail_start)
    if kk < 1:
        raise ValueError("tail window too short: need S > 0 over at least two periods")
    if kk < k:
        msg = f"survival reaches 0 inside the window; using k={kk} instead of {k}"
        notes.append(msg)
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
    offsets = tail_start + period * np.arange(n_off) / n_off
    j = np.arange(kk + 1)
    pts = offsets[:, None] + period * j[None, :]
    logs = np.full(S.shape, -np.inf)
    np.log(S, out=logs, where=S > 0)
    y = np.interp(pts, times, logs)
    dj = (j - j.mean()) * period
    slopes = (y - y.mean(axis=1, keepdims=True)) @ dj / np.sum(dj ** 2)
    window = (float(tail_start), float(tail_start + (kk + 1) * period))
    return TailFit(float(-slopes.mean()), period, kk, n_off, tail_start, window, slopes=slopes,
                   censored_fraction=censored_fraction, warnings=notes)


def fit_prefactor(times, S, fit, order=None, ci_lo=None, ci_hi=None, n=None):
    """Least-squares Fourier fit of ``log S(t) + r t`` on the tail window.

    With the sample count ``n`` the fit is weighted by the inverse
    delta-method variance of ``log S``, ``n S / (1 - S)``, so the precise
    early part of the window is not traded for the noisy far tail.  Fills
    ``fit.a``, ``fit.b``, ``fit.r2`` (in the fit's own weighting) and, when the
    band is given, the fraction of window points where ``log C(t) - r t``
    stays inside it.
    """
    order = fit.k if order is None else order
    times, S = np.asarray(times, dtype=float), np.asarray(S, dtype=float)
    lo, hi = fit.window
    sel = (times >= lo) & (times <= hi) & (S > 0)
    if hi - lo < fit.period or sel.sum() < 2 * order + 1:
        raise ValueError("tail window shorter than one period; Fourier fit is ill-conditioned")
    t = times[sel]
    rho = np.log(S[sel]) + fit.rate * t
    j = np.arange(1, order + 1)
    ph = fit.omega * t[:, None] * j
    design = np.column_stack([np.ones_like(t), np.sin(ph), np.cos(ph)])
    if np.linalg.cond(design) > 1e10:
        raise ValueError("Fourier design matrix is ill-conditioned")
    if n is None:
        w = np.ones_like(t)
    else:
        s_in = np.minimum(S[sel], 1.0 - 1.0 / n)
        w = np.sqrt(n * s_in / (1.0 - s_in))
    coef, *_ = np.linalg.lstsq(design * w[:, None], rho * w, rcond=None)
    fit.a = np.concatenate([[coef[0]], coef[1:order + 1]])
    fit.b = coef[order + 1:]
    resid = (rho - design @ coef) * w
    centred = (rho - np.average(rho, weights=w ** 2)) * w
    ss = np.sum(centred ** 2)
    # a flat target leaves only rounding noise in ss; count it as a perfect fit
    flat = ss <= 1e-20 * max(1.0, float(np.sum((rho * w) ** 2)))
    fit.r2 = 1.0 if flat else float(1.0 - np.sum(resid ** 2) / ss)
    if ci_lo is not None and ci_hi is not None:
        fit.band_fraction = band_fraction(times, fit, ci_lo, ci_hi)
    return fit


def band_fraction(times, fit, ci_lo, ci_hi):
    """Share of window grid points where the reconstruction lies inside the band."""
    times = np.asarray(times, dtype=float)
    lo, hi = fit.window
    sel = (times >= lo) & (times <= hi)
    t = times[sel]
    model = fit.log_prefactor(t) - fit.rate * t
    with np.errstate(divide="ignore"):
        inside = (model >= np.log(np.asarray(ci_lo)[sel])) & (model <= np.log(np.asarray(ci_hi)[sel]))
    return float(np.mean(inside)) if len(t) else 0.0


def fit_tail(surv, period, k=6, n_off=200, tail_start=None):
    """Rate and pre-factor fit with the band gate; ``tail_start`` defaults to one period."""
    tail_start = period if tail_start is None else tail_start
    fit = fit_rate(surv.times, surv.S, period, k, n_off, tail_start, surv.censored_fraction)
    return fit_prefactor(surv.times, surv.S, fit, ci_lo=surv.ci_lo, ci_hi=surv.ci_hi, n=surv.n)
