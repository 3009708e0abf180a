"""Space-time box grids and density tables on them.

A grid covers the spatial box ``prod [lower_a, upper_a]`` and one period
``[t1, t1 + T]``.  Time grid points ``t1 + k*delta`` for ``k = 0 .. L-1`` use
``delta = T / (L - 1)``, so the point at ``t1 + T`` coincides with ``t1`` and
only ``L - 1`` layers are stored.  Box ``(i, ..., k)`` (0-based in code, 1-based
in files) spans ``[lower + i*h, lower + (i+1)*h]`` in space and
``[t1 + k*delta, t1 + (k+1)*delta]`` in time.
"""

import json
from dataclasses import dataclass, field

import numpy as np

KINDS = ("monte_carlo_v", "solved_u", "exact_u", "network_u")


@dataclass(frozen=True)
class SpaceTimeGrid:
    lower: tuple
    upper: tuple
    counts: tuple
    L: int
    period: float
    t1: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "lower", tuple(float(a) for a in self.lower))
        object.__setattr__(self, "upper", tuple(float(b) for b in self.upper))
        object.__setattr__(self, "counts", tuple(int(c) for c in self.counts))
        if not len(self.lower) == len(self.upper) == len(self.counts) >= 1:
            raise ValueError("lower, upper and counts must have the same positive length")
        if any(c < 1 for c in self.counts):
            raise ValueError("box counts must be positive")
        if any(b <= a for a, b in zip(self.lower, self.upper)):
            raise ValueError("each upper bound must exceed its lower bound")
        if self.L < 2:
            raise ValueError("L must be at least 2")
        if not self.period > 0:
            raise ValueError("period must be positive")
        widths = np.subtract(self.upper, self.lower) / np.asarray(self.counts)
        if not np.allclose(widths, widths[0], rtol=1e-9, atol=0.0):
            raise ValueError(f"boxes must be square; per-axis widths {widths.tolist()}")

    @classmethod
    def square(cls, a, b, N, L, period, t1=0.0, dim=2):
        return cls((a,) * dim, (b,) * dim, (N,) * dim, L, period, t1)

    @property
    def dim(self):
        return len(self.counts)

    @property
    def h(self):
        return (self.upper[0] - self.lower[0]) / self.counts[0]

    @property
    def n_layers(self):
        return self.L - 1

    @property
    def delta(self):
        return self.period / (self.L - 1)

    @property
    def shape(self):
        return self.counts + (self.n_layers,)

    @property
    def size(self):
        return int(np.prod(self.shape))

    def centers(self, axis):
        return self.lower[axis] + (np.arange(self.counts[axis]) + 0.5) * self.h

    def layer_times(self):
        """Midpoint times of the stored layers."""
        return self.t1 + (np.arange(self.n_layers) + 0.5) * self.delta

    def layer_of(self, t):
        phase = np.mod(np.asarray(t, dtype=float) - self.t1, self.period)
        return np.minimum((phase / self.delta).astype(np.int64), self.n_layers - 1)

    def box_of(self, x):
        """Spatial box indices of points ``x`` (``(..., n)``) and an inside mask."""
        x = np.asarray(x, dtype=float)
        rel = (x - np.asarray(self.lower)) / self.h
        idx = np.floor(rel).astype(np.int64)
        inside = np.all((rel >= 0) & (idx < np.asarray(self.counts)), axis=-1)
        return idx, inside

    def contains(self, x):
        x = np.asarray(x, dtype=float)
        return np.all((x >= np.asarray(self.lower)) & (x <= np.asarray(self.upper)), axis=-1)

    def mesh(self):
        """Box-center coordinates broadcast to ``shape``: ``(x_0, ..., x_{n-1}, t)``."""
        axes = [self.centers(a) for a in range(self.dim)] + [self.layer_times()]
        return np.meshgrid(*axes, indexing="ij")

    def to_dict(self):
        return {"lower": list(self.lower), "upper": list(self.upper), "counts": list(self.counts),
                "L": self.L, "period": self.period, "t1": self.t1,
                "h": self.h, "delta": self.delta}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(d["lower"]), tuple(d["upper"]), tuple(d["counts"]), int(d["L"]),
                   float(d["period"]), float(d.get("t1", 0.0)))


@dataclass
class DensityField:
    grid: SpaceTimeGrid
    values: np.ndarray
    kind: str
    sample_count: int = 0
    seed: int = None
    stderr: np.ndarray = None
    inside_fraction: float = None
    warnings: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != self.grid.shape:
            raise ValueError(f"values shape {self.values.shape} does not match grid {self.grid.shape}")
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}")

    @property
    def noise_std(self):
        """Root-mean-square per-box standard error (the diagnostic zeta)."""
        if self.stderr is None:
            return None
        return float(np.sqrt(np.mean(self.stderr ** 2)))

    def slice_mass(self):
        """``h^n * sum`` over space, one entry per layer."""
        g = self.grid
        return g.h ** g.dim * self.values.reshape(-1, g.n_layers).sum(axis=0)

    def flat(self):
        return self.values.ravel()

    def sidecar(self):
        return {"grid": self.grid.to_dict(), "kind": self.kind, "sample_count": int(self.sample_count),
                "seed": self.seed, "inside_fraction": self.inside_fraction,
                "noise_std": self.noise_std, "warnings": list(self.warnings), "meta": self.meta}


def exact_field(grid, density, kind="exact_u"):
    """Evaluate ``density(*coords, t)`` at box centers."""
    return DensityField(grid, density(*grid.mesh()), kind)


def l2_error(a, b, grid=None):
    """Plain ``||a - b||_2`` over all entries (arrays or fields)."""
    a = a.values if isinstance(a, DensityField) else np.asarray(a)
    b = b.values if isinstance(b, DensityField) else np.asarray(b)
    return float(np.linalg.norm((a - b).ravel()))


# ---------------------------------------------------------------------------
# serialization

def _columns(dim):
    if dim == 2:
        return ["i", "j", "k", "x_center", "y_center", "t_center", "value"]
    idx = [f"i{a}" for a in range(dim)] + ["k"]
    return idx + [f"x{a}_center" for a in range(dim)] + ["t_center", "value"]


def field_rows(grid, values):
    """Rows ``(indices (1-based), centers, t_center, value)`` in C order."""
    index = np.indices(grid.shape).reshape(grid.dim + 1, -1).T + 1
    coords = np.stack([m.ravel() for m in grid.mesh()], axis=1)
    return index, coords, np.asarray(values, dtype=float).ravel()


def write_field_csv(path, grid, values):
    index, coords, vals = field_rows(grid, values)
    with open(path, "w") as fh:
        fh.write(",".join(_columns(grid.dim)) + "\n")
        for row_i, row_c, v in zip(index, coords, vals):
            fh.write(",".join(map(str, row_i)) + "," + ",".join(repr(float(c)) for c in row_c)
                     + "," + repr(float(v)) + "\n")
    return len(vals)


def save_field(path_stem, fld):
    """Write ``<stem>.csv`` and ``<stem>.json``; returns the two paths."""
    csv_path, json_path = f"{path_stem}.csv", f"{path_stem}.json"
    write_field_csv(csv_path, fld.grid, fld.values)
    with open(json_path, "w") as fh:
        json.dump(fld.sidecar(), fh, indent=2, sort_keys=True)
    return csv_path, json_path


def load_field(path_stem):
    with open(f"{path_stem}.json") as fh:
        side = json.load(fh)
    grid = SpaceTimeGrid.from_dict(side["grid"])
    data = np.genfromtxt(f"{path_stem}.csv", delimiter=",", names=True)
    values = np.asarray(data["value"], dtype=float).reshape(grid.shape)
    return DensityField(grid, values, side["kind"], side.get("sample_count", 0), side.get("seed"),
                        inside_fraction=side.get("inside_fraction"),
                        warnings=side.get("warnings", []), meta=side.get("meta", {}))
