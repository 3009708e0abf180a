"""T-periodic SDEs, the Euler-Maruyama integrator and the built-in systems.

Drift and diffusion callables are vectorised: ``drift(x, t)`` takes states of
shape ``(..., n)`` and times broadcastable to ``x.shape[:-1]`` and returns
``(..., n)``; ``diffusion(x, t)`` returns ``(..., n, n)``.
"""

import re
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy import integrate

from . import noise

DIVERGENCE_BOUND = 1.0e6


class DivergenceError(RuntimeError):
    """A trajectory left the finite region ``|x| <= DIVERGENCE_BOUND``."""

    def __init__(self, step, stream=None, state=None):
        self.step = int(step)
        self.stream = None if stream is None else int(stream)
        self.state = state
        where = f"step {self.step}" + ("" if stream is None else f", trajectory {self.stream}")
        super().__init__(f"trajectory diverged at {where}")


@dataclass(frozen=True)
class PeriodicSde:
    dimension: int
    period: float
    drift: Callable
    diffusion: Callable
    label: str = ""
    initial_state: Optional[tuple] = None
    params: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.dimension < 1:
            raise ValueError("dimension must be positive")
        if not self.period > 0:
            raise ValueError("period must be positive")

    def covariance(self, x, t):
        """Diffusion matrix ``Sigma = sigma sigma^T`` at ``(x, t)``."""
        s = self.diffusion(x, t)
        return s @ np.swapaxes(s, -1, -2)

    def default_state(self):
        if self.initial_state is not None:
            return np.asarray(self.initial_state, dtype=float)
        return np.zeros(self.dimension)


@dataclass
class Trajectory:
    times: np.ndarray
    states: np.ndarray
    step: float
    seed: int


def _constant_diffusion(eps, n):
    sigma = np.diag(np.broadcast_to(np.asarray(eps, dtype=float), (n,)))

    def diffusion(x, t):
        return np.broadcast_to(sigma, np.shape(x)[:-1] + (n, n))

    return diffusion


def _check_finite(block, step0, streams=None):
    bad = ~np.all(np.isfinite(block), axis=-1) | (np.linalg.norm(block, axis=-1) > DIVERGENCE_BOUND)
    if bad.any():
        idx = np.argwhere(bad)[0]
        stream = None if streams is None else streams[idx[1]]
        raise DivergenceError(step0 + idx[0], stream)


def iter_ensemble(sde, x0, t0, steps, h, seed, streams=None, chunk=1000, first_step=0):
    """Advance an ensemble in lockstep, yielding ``(times, states)`` blocks.

    ``x0`` has shape ``(E, n)``.  Block ``states[c]`` is the ensemble after
    global step ``first_step + c0 + c + 1`` at time ``times[c]``; the noise of
    step ``k`` for trajectory ``j`` is keyed by ``(seed, streams[j], k)``.
    """
    x = np.array(x0, dtype=float, ndmin=2)
    n_ens, n = x.shape
    if n != sde.dimension:
        raise ValueError(f"state dimension {n} does not match SDE dimension {sde.dimension}")
    if not h > 0:
        raise ValueError("step size must be positive")
    streams = np.arange(n_ens) if streams is None else np.asarray(streams)
    sqrt_h = np.sqrt(h)
    done = 0
    while done < steps:
        c = min(chunk, steps - done)
        k0 = first_step + done
        xi = noise.step_noise(seed, streams, np.arange(k0, k0 + c), n)
        out = np.empty((c, n_ens, n))
        times = t0 + h * np.arange(k0 + 1, k0 + c + 1)
        for i in range(c):
            t = t0 + h * (k0 + i)
            dw = np.einsum("...ij,...j->...i", sde.diffusion(x, t), xi[i])
            x = x + sde.drift(x, t) * h + dw * sqrt_h
            out[i] = x
        _check_finite(out, k0 + 1, streams)
        yield times, out
        done += c


def euler_maruyama(sde, x0, t0, steps, h, seed, stream=0):
    """Single Euler-Maruyama trajectory with ``steps + 1`` states."""
    if steps < 0:
        raise ValueError("steps must be non-negative")
    x0 = np.asarray(x0, dtype=float).reshape(1, -1)
    states = [x0[:, None, :].reshape(1, 1, -1)]
    for _, block in iter_ensemble(sde, x0, t0, steps, h, seed, streams=[stream]):
        states.append(block)
    states = np.concatenate(states, axis=0)[:, 0, :]
    times = t0 + h * np.arange(steps + 1)
    return Trajectory(times=times, states=states, step=h, seed=seed)


# ---------------------------------------------------------------------------
# built-in systems


def _example1(eps=1.0, period=2 * np.pi):
    def drift(x, t):
        return np.zeros_like(x, dtype=float)

    return PeriodicSde(2, period, drift, _constant_diffusion(eps, 2), "example1",
                       (0.0, 0.0), {"eps": eps})


def _example2(eps=1.0):
    def drift(x, t):
        t = np.asarray(t, dtype=float)
        g = -(x[..., 0] + x[..., 1] - np.sin(t)) + 0.5 * np.cos(t)
        return np.stack([g, g], axis=-1)

    return PeriodicSde(2, 2 * np.pi, drift, _constant_diffusion(eps, 2), "example2",
                       (0.0, 0.0), {"eps": eps})


def _ring_gradient(c, label, eps=np.sqrt(2.0)):
    # gradient flow of (r^2 - (c + sin t))^2 plus the phase-correcting radial term
    def drift(x, t):
        t = np.asarray(t, dtype=float)
        r2 = x[..., 0] ** 2 + x[..., 1] ** 2
        # the correction is singular at the origin; it is taken as 0 there
        safe = np.where(r2 > 0, r2, 1.0)
        radial = -4.0 * (r2 - (c + np.sin(t))) + np.where(r2 > 0, np.cos(t) / (2.0 * safe), 0.0)
        return x * radial[..., None]

    return PeriodicSde(2, 2 * np.pi, drift, _constant_diffusion(eps, 2), label,
                       (float(np.sqrt(c)), 0.0), {"c": c, "eps": eps})


def _ring(eps=1.0):
    def drift(x, t):
        t = np.asarray(t, dtype=float)
        px, py = x[..., 0], x[..., 1]
        radial = -4.0 * (px ** 2 + py ** 2 - (1.0 + 0.5 * np.sin(t)))
        return np.stack([px * radial + py, py * radial - px], axis=-1)

    return PeriodicSde(2, 2 * np.pi, drift, _constant_diffusion(eps, 2), "ring",
                       (1.0, 0.0), {"eps": eps})


def _forced_vdp(mu=2.0, amplitude=1.2, omega=0.2 * np.pi, eps=0.25):
    def drift(x, t):
        t = np.asarray(t, dtype=float)
        px, py = x[..., 0], x[..., 1]
        dy = mu * (1.0 - px ** 2) * py - px + amplitude * np.sin(omega * t)
        return np.stack(np.broadcast_arrays(py, dy), axis=-1)

    return PeriodicSde(2, 2 * np.pi / omega, drift, _constant_diffusion(eps, 2), "forced_vdp",
                       (0.0, 0.0), {"mu": mu, "A": amplitude, "omega": omega, "eps": eps})


def _vdp4(gamma, label, eps=0.5):
    def drift(x, t):
        t = np.asarray(t, dtype=float)
        mu = 1.2 + 0.2 * np.sin(0.5 * t)
        px, py, pz, pu = (x[..., i] for i in range(4))
        dx = mu * (px - px ** 3 / 3.0 - py) + gamma * (pz - px)
        dz = mu * (pz - pz ** 3 / 3.0 - pu) + gamma * (px - pz)
        return np.stack([dx, px / mu, dz, pz / mu], axis=-1)

    return PeriodicSde(4, 4 * np.pi, drift, _constant_diffusion(eps, 4), label,
                       (2.0, 1.0, 1.0, -2.0), {"gamma": gamma, "eps": eps})


_BUILTINS = {
    "example1": _example1,
    "example2": _example2,
    "example3": lambda **kw: _ring_gradient(kw.pop("c", 5.0), "example3", **kw),
    "stuart_landau": lambda **kw: _ring_gradient(kw.pop("c", 5.0), "stuart_landau", **kw),
    "ring": _ring,
    "forced_vdp": _forced_vdp,
    "vdp4_decoupled": lambda **kw: _vdp4(kw.pop("gamma", 0.0), "vdp4_decoupled", **kw),
    "vdp4_coupled": lambda **kw: _vdp4(kw.pop("gamma", 0.03), "vdp4_coupled", **kw),
}

BUILTIN_NAMES = tuple(_BUILTINS)


def builtin(name, **params):
    """Built-in system by name; keyword overrides replace default parameters."""
    try:
        factory = _BUILTINS[name]
    except KeyError:
        raise ValueError(f"unknown SDE {name!r}; valid names: {', '.join(BUILTIN_NAMES)}") from None
    return factory(**params)


# ---------------------------------------------------------------------------
# term grammar for user-defined systems
#
#   expr   := term (('+' | '-') term)*
#   term   := factor ('*' factor)*
#   factor := number | 'x'<i> ['^' <p>] | 'sin(' [w '*'] 't)' | 'cos(' [w '*'] 't)'
#
# State components are 1-based (x1 .. xn).  Every trig frequency must be an
# integer multiple of 2*pi/T so the system is T-periodic.

_VAR = re.compile(r"x(\d+)(?:\^(\d+))?$")
_TRIG = re.compile(r"(sin|cos)\((?:(.+)\*)?t\)$")


def _split_top(expr, seps):
    parts, depth, start = [], 0, 0
    for i, ch in enumerate(expr):
        if ch == "(":
            depth += 1
        elif ch == ")":
            depth -= 1
        elif depth == 0 and ch in seps and i > start:
            if ch in "+-" and expr[i - 1] in "eE" and i > 1 and (expr[i - 2].isdigit() or expr[i - 2] == "."):
                continue
            if ch in "+-" and expr[i - 1] in "*^":
                continue
            parts.append(expr[start:i])
            start = i if ch in "+-" else i + 1
    parts.append(expr[start:])
    return [p for p in parts if p]


def parse_terms(expr, dimension, period):
    """Parse ``expr`` into ``[(coef, powers, trig, freq), ...]``."""
    expr = expr.replace(" ", "")
    if not expr:
        raise ValueError("empty expression")
    terms = []
    for raw in _split_top(expr, "+-"):
        sign = -1.0 if raw[0] == "-" else 1.0
        body = raw[1:] if raw[0] in "+-" else raw
        coef, powers, trig, freq = sign, np.zeros(dimension, dtype=int), None, 0.0
        for factor in _split_top(body, "*"):
            var, tr = _VAR.match(factor), _TRIG.match(factor)
            if var:
                i = int(var.group(1))
                if not 1 <= i <= dimension:
                    raise ValueError(f"variable x{i} out of range in {expr!r}")
                powers[i - 1] += int(var.group(2) or 1)
            elif tr:
                if trig is not None:
                    raise ValueError(f"at most one trig factor per term in {expr!r}")
                trig, freq = tr.group(1), float(tr.group(2) or 1.0)
                cycles = freq * period / (2 * np.pi)
                if abs(cycles - round(cycles)) > 1e-9:
                    raise ValueError(f"{factor} is not {period}-periodic")
            else:
                try:
                    coef *= float(factor)
                except ValueError:
                    raise ValueError(f"cannot parse factor {factor!r} in {expr!r}") from None
        terms.append((coef, powers, trig, freq))
    return terms


def _eval_terms(terms, x, t):
    t = np.asarray(t, dtype=float)
    total = np.zeros(np.broadcast_shapes(x.shape[:-1], t.shape))
    for coef, powers, trig, freq in terms:
        val = coef * np.prod(x ** powers, axis=-1)
        if trig == "sin":
            val = val * np.sin(freq * t)
        elif trig == "cos":
            val = val * np.cos(freq * t)
        total = total + val
    return total


def from_terms(drift, diffusion, period, label="custom", initial_state=None):
    """Build a system from term-grammar strings.

    ``drift`` is a list of ``n`` expressions; ``diffusion`` is either a number
    (scalar times identity) or an ``n x n`` nested list of expressions/numbers.
    """
    n = len(drift)
    drift_terms = [parse_terms(e, n, period) for e in drift]
    if np.isscalar(diffusion):
        diff_fn = _constant_diffusion(float(diffusion), n)
    else:
        if len(diffusion) != n or any(len(row) != n for row in diffusion):
            raise ValueError(f"diffusion must be {n}x{n}")
        diff_terms = [[parse_terms(str(e), n, period) for e in row] for row in diffusion]

        def diff_fn(x, t):
            shape = np.broadcast_shapes(np.shape(x)[:-1], np.shape(t))
            out = np.empty(shape + (n, n))
            for i in range(n):
                for j in range(n):
                    out[..., i, j] = _eval_terms(diff_terms[i][j], x, t)
            return out

    def drift_fn(x, t):
        return np.stack([_eval_terms(tm, x, t) for tm in drift_terms], axis=-1)

    return PeriodicSde(n, float(period), drift_fn, diff_fn, label,
                       None if initial_state is None else tuple(initial_state),
                       {"drift": list(drift), "diffusion": diffusion})


def stuart_landau_normalizer(t, c=5.0, quadrature_n=2001):
    """``Z(t) = pi * int_0^inf exp(-(s - (c + sin t))^2) ds`` by composite Simpson."""
    if quadrature_n < 64:
        raise ValueError("quadrature_n must be at least 64")
    s = np.linspace(0.0, c + 1.0 + 8.0, quadrature_n)
    t = np.asarray(t, dtype=float)
    centre = c + np.sin(t)[..., None]
    return np.pi * integrate.simpson(np.exp(-((s - centre) ** 2)), x=s, axis=-1)


def exact_density_stuart_landau(x, y, t, c=5.0, quadrature_n=2001):
    """Periodic invariant density ``exp(-V) / Z(t)`` of the Stuart-Landau system."""
    x, y, t = np.broadcast_arrays(*(np.asarray(a, dtype=float) for a in (x, y, t)))
    potential = (x ** 2 + y ** 2 - (c + np.sin(t))) ** 2
    tu, inverse = np.unique(t, return_inverse=True)
    z = stuart_landau_normalizer(tu, c, quadrature_n)[inverse.reshape(t.shape)]
    out = np.exp(-potential) / z
    return out if out.ndim else float(out)


def exact_density(sde):
    """Closed-form density ``(x, y, t) -> u`` for systems that have one, else ``None``."""
    if sde.label in ("stuart_landau", "example3") and np.isclose(sde.params.get("eps", 0), np.sqrt(2)):
        c = sde.params.get("c", 5.0)
        return lambda x, y, t: exact_density_stuart_landau(x, y, t, c)
    return None
