"""Mesh-free neural density solver.

A fully connected network ``u(x, t; theta)`` (sigmoid hidden layers, linear
output) is fitted to three losses:

* ``L1``: mean squared Fokker-Planck residual at collocation points, with all
  derivatives replaced by centred finite differences of network outputs;
* ``L2``: mean squared mismatch to Monte Carlo density estimates;
* ``L3``: mean absolute gap ``|u(z, t1) - u(z, t1 + T)|``.

Because the residual is a fixed linear combination of network outputs at the
stencil points, its gradient is a weighted sum of ordinary output gradients,
so one backward pass through the stacked stencil evaluations suffices.
"""

import json
import time
from dataclasses import dataclass, field, asdict

import numpy as np

from .grid import DensityField

DEFAULT_LAYERS = (64, 128, 128, 128, 64, 16)
DESK_LAYERS = (32, 64, 64, 32)


class TrainingError(RuntimeError):
    def __init__(self, epoch, term):
        self.epoch, self.term = epoch, term
        super().__init__(f"non-finite loss L{term} at epoch {epoch}")


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


@dataclass
class MlpDensityModel:
    layer_sizes: tuple
    params: np.ndarray
    seed: int = 0
    shift: np.ndarray = None
    scale: np.ndarray = None
    activation: str = "sigmoid"

    def __post_init__(self):
        self.layer_sizes = tuple(int(s) for s in self.layer_sizes)
        self.params = np.asarray(self.params, dtype=np.float64)
        if self.params.size != self.n_params:
            raise ValueError(f"expected {self.n_params} parameters, got {self.params.size}")
        d = self.layer_sizes[0]
        self.shift = np.zeros(d) if self.shift is None else np.asarray(self.shift, dtype=float)
        self.scale = np.ones(d) if self.scale is None else np.asarray(self.scale, dtype=float)

    @property
    def n_params(self):
        s = self.layer_sizes
        return sum((s[i] + 1) * s[i + 1] for i in range(len(s) - 1))

    @classmethod
    def create(cls, layer_sizes, seed=0, lower=None, upper=None):
        """Xavier-uniform weights, zero biases.

        ``lower``/``upper`` (length ``n + 1``) fix an affine input map onto
        ``[-1, 1]``; it is part of the model and stored in checkpoints.
        """
        rng = np.random.default_rng(seed)
        chunks = []
        for fan_in, fan_out in zip(layer_sizes[:-1], layer_sizes[1:]):
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            chunks.append(rng.uniform(-bound, bound, size=fan_in * fan_out))
            chunks.append(np.zeros(fan_out))
        shift = scale = None
        if lower is not None:
            lower, upper = np.asarray(lower, dtype=float), np.asarray(upper, dtype=float)
            shift = 0.5 * (lower + upper)
            scale = 2.0 / (upper - lower)
        return cls(tuple(layer_sizes), np.concatenate(chunks), seed, shift, scale)

    def unpack(self, flat=None):
        flat = self.params if flat is None else flat
        out, pos = [], 0
        for fan_in, fan_out in zip(self.layer_sizes[:-1], self.layer_sizes[1:]):
            w = flat[pos:pos + fan_in * fan_out].reshape(fan_in, fan_out)
            pos += fan_in * fan_out
            b = flat[pos:pos + fan_out]
            pos += fan_out
            out.append((w, b))
        return out

    def _prepare(self, points):
        points = np.atleast_2d(np.asarray(points, dtype=float))
        if points.shape[1] != self.layer_sizes[0]:
            raise ValueError(f"points have {points.shape[1]} coordinates, model expects "
                             f"{self.layer_sizes[0]}")
        return (points - self.shift) * self.scale

    def forward(self, points):
        """Network value at each row of ``points``."""
        a = self._prepare(points)
        layers = self.unpack()
        for w, b in layers[:-1]:
            a = _sigmoid(a @ w + b)
        w, b = layers[-1]
        return (a @ w + b)[:, 0]

    def backward(self, points, upstream):
        """``sum_b upstream[b] * d u(points[b]) / d theta`` as a flat vector."""
        a = self._prepare(points)
        layers = self.unpack()
        acts = [a]
        for w, b in layers[:-1]:
            a = _sigmoid(a @ w + b)
            acts.append(a)
        grads = []
        delta = np.asarray(upstream, dtype=float)[:, None]
        for li in range(len(layers) - 1, -1, -1):
            w, _ = layers[li]
            grads.append((acts[li].T @ delta).ravel())
            grads.append(delta.sum(axis=0))
            if li > 0:
                delta = (delta @ w.T) * acts[li] * (1.0 - acts[li])
        out = []
        for gw, gb in zip(grads[0::2][::-1], grads[1::2][::-1]):
            out.extend([gw, gb])
        return np.concatenate(out)

    def copy(self):
        return MlpDensityModel(self.layer_sizes, self.params.copy(), self.seed, self.shift.copy(),
                               self.scale.copy(), self.activation)


def forward(model, points):
    return model.forward(points)


# ---------------------------------------------------------------------------
# Fokker-Planck residual by finite differences

def stencil_offsets(n, h, ht, cross):
    """Offsets (rows, length ``n + 1``) used by :func:`stencil_weights`."""
    offs = [np.zeros(n + 1)]
    for a in range(n):
        for s in (1, -1):
            o = np.zeros(n + 1)
            o[a] = s * h
            offs.append(o)
    for s in (1, -1):
        o = np.zeros(n + 1)
        o[n] = s * ht
        offs.append(o)
    for a, b in cross:
        for sa in (1, -1):
            for sb in (1, -1):
                o = np.zeros(n + 1)
                o[a], o[b] = sa * h, sb * h
                offs.append(o)
    return np.array(offs)


def _cross_pairs(sde, points):
    n = sde.dimension
    sig = sde.covariance(points[:, :n], points[:, n])
    return [(a, b) for a in range(n) for b in range(a + 1, n) if np.any(sig[:, a, b] != 0)]


def stencil_weights(sde, points, h, ht, cross=None):
    """Offsets ``(S, n+1)`` and weights ``(B, S)`` with ``Lu(p_b) ~ sum_s w[b,s] u(p_b + off_s)``."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    n = sde.dimension
    if cross is None:
        cross = _cross_pairs(sde, points)
    offs = stencil_offsets(n, h, ht, cross)
    nb = len(points)
    w = np.zeros((nb, len(offs)))
    # evaluate coefficients at every stencil point (time offsets only touch u_t)
    pts = points[:, None, :] + offs[None, :, :]
    flat = pts.reshape(-1, n + 1)
    f = sde.drift(flat[:, :n], flat[:, n]).reshape(nb, len(offs), n)
    sig = sde.covariance(flat[:, :n], flat[:, n]).reshape(nb, len(offs), n, n)
    w[:, 0] = -np.einsum("bii->b", sig[:, 0]) / h ** 2
    for a in range(n):
        ip, im = 1 + 2 * a, 2 + 2 * a
        w[:, ip] += -f[:, ip, a] / (2 * h) + 0.5 * sig[:, ip, a, a] / h ** 2
        w[:, im] += f[:, im, a] / (2 * h) + 0.5 * sig[:, im, a, a] / h ** 2
    it = 1 + 2 * n
    w[:, it] += -1.0 / (2 * ht)
    w[:, it + 1] += 1.0 / (2 * ht)
    pos = it + 2
    for a, b in cross:
        for sa in (1, -1):
            for sb in (1, -1):
                w[:, pos] += sa * sb * sig[:, pos, a, b] / (4 * h ** 2)
                pos += 1
    return offs, w


def pde_residual(model, sde, points, h_fd, ht_fd=None, func=None):
    """Finite-difference Fokker-Planck residual of ``model`` (or ``func``) at ``points``."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    ht_fd = h_fd if ht_fd is None else ht_fd
    offs, w = stencil_weights(sde, points, h_fd, ht_fd)
    pts = (points[:, None, :] + offs[None, :, :]).reshape(-1, points.shape[1])
    vals = (func(pts) if func is not None else model.forward(pts)).reshape(w.shape)
    return np.sum(w * vals, axis=1)


# ---------------------------------------------------------------------------
# losses and gradients

def _l1_grad(model, sde, pts, h, ht):
    offs, w = stencil_weights(sde, pts, h, ht)
    stacked = (pts[:, None, :] + offs[None, :, :]).reshape(-1, pts.shape[1])
    vals = model.forward(stacked).reshape(w.shape)
    r = np.sum(w * vals, axis=1)
    loss = float(np.mean(r ** 2))
    up = (2.0 / len(pts)) * r[:, None] * w
    return loss, model.backward(stacked, up.ravel())


def _l2_grad(model, pts, target):
    d = model.forward(pts) - target
    return float(np.mean(d ** 2)), model.backward(pts, (2.0 / len(pts)) * d)


def _l3_grad(model, z, t1, period, norm="l1"):
    n = z.shape[1]
    lo = np.column_stack([z, np.full(len(z), t1)])
    hi = np.column_stack([z, np.full(len(z), t1 + period)])
    both = np.concatenate([lo, hi])
    vals = model.forward(both)
    gap = vals[:len(z)] - vals[len(z):]
    if norm == "l1":
        loss = float(np.mean(np.abs(gap)))
        g = np.sign(gap) / len(z)
    elif norm == "l2":
        loss = float(np.mean(gap ** 2))
        g = 2.0 * gap / len(z)
    else:
        raise ValueError("periodic_norm must be 'l1' or 'l2'")
    return loss, model.backward(both, np.concatenate([g, -g]))


def loss_terms(model, sde, sets, h_fd, ht_fd=None, periodic_norm="l1", which=(1, 2, 3)):
    """``(L1, L2, L3)`` on the full point sets; terms not in ``which`` are None."""
    ht_fd = h_fd if ht_fd is None else ht_fd
    out = [None, None, None]
    names = {1: "train", 2: "ref", 3: "boundary"}
    for term in which:
        arr = getattr(sets, names[term])
        if arr is None or len(arr) == 0:
            raise ValueError(f"point set '{names[term]}' is empty")
    if 1 in which:
        out[0] = float(np.mean(pde_residual(model, sde, sets.train, h_fd, ht_fd) ** 2))
    if 2 in which:
        out[1] = float(np.mean((model.forward(sets.ref) - sets.ref_values) ** 2))
    if 3 in which:
        out[2] = _l3_grad(model, sets.boundary, sets.t1, sets.period, periodic_norm)[0]
    return tuple(out)


def total_loss_grad(model, sde, sets, h_fd, ht_fd=None, periodic_norm="l1"):
    """``L1 + L2 + L3`` and its gradient on the full sets."""
    ht_fd = h_fd if ht_fd is None else ht_fd
    l1, g1 = _l1_grad(model, sde, sets.train, h_fd, ht_fd)
    l2, g2 = _l2_grad(model, sets.ref, sets.ref_values)
    l3, g3 = _l3_grad(model, sets.boundary, sets.t1, sets.period, periodic_norm)
    return l1 + l2 + l3, g1 + g2 + g3


# ---------------------------------------------------------------------------
# training

@dataclass
class TrainConfig:
    lr1: float = 1e-3
    lr2: float = 2e-3
    lr3: float = 2e-3
    decay: float = 0.9
    decay_every: int = 40
    epochs: int = 200
    batch_train: int = 256
    batch_ref: int = 256
    batch_boundary: int = 128
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    h_fd: float = None
    ht_fd: float = None
    periodic_norm: str = "l1"

    def __post_init__(self):
        if min(self.lr1, self.lr2, self.lr3) < 0:
            raise ValueError("learning rates must be non-negative")
        if not 0 < self.decay <= 1:
            raise ValueError("decay must lie in (0, 1]")
        if self.decay_every < 1 or self.epochs < 0:
            raise ValueError("decay_every must be >= 1 and epochs >= 0")
        if min(self.batch_train, self.batch_ref, self.batch_boundary) < 1:
            raise ValueError("batch sizes must be positive")
        if self.periodic_norm not in ("l1", "l2"):
            raise ValueError("periodic_norm must be 'l1' or 'l2'")


class Adam:
    def __init__(self, size, beta1=0.9, beta2=0.999, eps=1e-8):
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0
        self.beta1, self.beta2, self.eps = beta1, beta2, eps

    def step(self, params, grad, lr):
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad ** 2
        mhat = self.m / (1.0 - self.beta1 ** self.t)
        vhat = self.v / (1.0 - self.beta2 ** self.t)
        return params - lr * mhat / (np.sqrt(vhat) + self.eps)


@dataclass
class TrainReport:
    L1: list = field(default_factory=list)
    L2: list = field(default_factory=list)
    L3: list = field(default_factory=list)
    params: np.ndarray = None
    wall_clock: float = 0.0
    seed: int = 0
    final: tuple = None

    def history_rows(self):
        return [(e + 1, a, b, c) for e, (a, b, c) in enumerate(zip(self.L1, self.L2, self.L3))]


def default_steps(domain_width, period):
    return 1e-3 * domain_width, 1e-3 * period


def _cyclic(rng, n, batch):
    """Endless shuffled index batches over ``range(n)``."""
    while True:
        perm = rng.permutation(n)
        for i in range(0, n, batch):
            yield perm[i:i + batch]


def train(model, sde, sets, config, seed=0, progress=None):
    """Alternating Adam: per iteration one step each on L1, L2 and L3.

    An epoch is one pass over the collocation set; reference and boundary
    batches cycle through their sets independently.  ``model.params`` is
    updated in place.
    """
    width = float(np.max(2.0 / model.scale[:-1])) if np.any(model.scale != 1.0) else 1.0
    h_fd = config.h_fd or default_steps(width, sets.period)[0]
    ht_fd = config.ht_fd or default_steps(width, sets.period)[1]
    rng = np.random.default_rng(seed)
    opt = [Adam(model.n_params, config.beta1, config.beta2, config.eps_adam) for _ in range(3)]
    ref_batches = _cyclic(rng, len(sets.ref), config.batch_ref)
    bnd_batches = _cyclic(rng, len(sets.boundary), config.batch_boundary)
    report = TrainReport(seed=seed)
    start = time.perf_counter()
    for epoch in range(config.epochs):
        drops = epoch // config.decay_every
        lrs = (config.lr1, config.lr2 * config.decay ** drops, config.lr3 * config.decay ** drops)
        sums, count = np.zeros(3), 0
        perm = rng.permutation(len(sets.train))
        for i in range(0, len(perm), config.batch_train):
            bx = sets.train[perm[i:i + config.batch_train]]
            l1, g = _l1_grad(model, sde, bx, h_fd, ht_fd)
            if not np.isfinite(l1):
                raise TrainingError(epoch, 1)
            model.params = opt[0].step(model.params, g, lrs[0])
            by = next(ref_batches)
            l2, g = _l2_grad(model, sets.ref[by], sets.ref_values[by])
            if not np.isfinite(l2):
                raise TrainingError(epoch, 2)
            model.params = opt[1].step(model.params, g, lrs[1])
            bz = next(bnd_batches)
            l3, g = _l3_grad(model, sets.boundary[bz], sets.t1, sets.period, config.periodic_norm)
            if not np.isfinite(l3):
                raise TrainingError(epoch, 3)
            model.params = opt[2].step(model.params, g, lrs[2])
            sums += (l1, l2, l3)
            count += 1
        for lst, s in zip((report.L1, report.L2, report.L3), sums / max(count, 1)):
            lst.append(float(s))
        if progress:
            progress(epoch + 1, report.L1[-1], report.L2[-1], report.L3[-1])
    report.wall_clock = time.perf_counter() - start
    report.params = model.params.copy()
    report.final = loss_terms(model, sde, sets, h_fd, ht_fd, config.periodic_norm)
    return report


def evaluate_on_grid(model, grid):
    mesh = grid.mesh()
    pts = np.stack([m.ravel() for m in mesh], axis=1)
    return DensityField(grid, model.forward(pts).reshape(grid.shape), "network_u",
                        meta={"layer_sizes": list(model.layer_sizes)})


# ---------------------------------------------------------------------------
# checkpoints: one JSON header line, then little-endian float64 parameters

def save_checkpoint(path, model, epoch=0, extra=None):
    header = {"format": "mlp-density/1", "layer_sizes": list(model.layer_sizes),
              "activation": model.activation, "seed": model.seed, "epoch": epoch,
              "n_params": model.n_params, "dtype": "<f8",
              "input_shift": model.shift.tolist(), "input_scale": model.scale.tolist()}
    if extra:
        header.update(extra)
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        fh.write(model.params.astype("<f8").tobytes())
    return header


def load_checkpoint(path):
    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode())
        params = np.frombuffer(fh.read(), dtype="<f8").astype(np.float64)
    if params.size != header["n_params"]:
        raise ValueError(f"checkpoint holds {params.size} parameters, header says {header['n_params']}")
    model = MlpDensityModel(tuple(header["layer_sizes"]), params, header.get("seed", 0),
                            np.asarray(header["input_shift"]), np.asarray(header["input_scale"]),
                            header.get("activation", "sigmoid"))
    return model, header


def config_dict(config):
    return asdict(config)
