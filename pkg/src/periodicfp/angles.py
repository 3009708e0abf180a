"""Principal angles between Ker(A) and boundary coordinate subspaces.

``p_D`` is the mean cosine of the principal angles between the kernel of the
discretised operator and the span of coordinate vectors within ``D`` boxes of
the boundary (spatial faces and the two time faces).  Values near 1 mean
that a random kernel element keeps most of its length on that layer.
"""

import json
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg, sparse
from scipy.sparse.linalg import splu

from . import fd
from .grid import SpaceTimeGrid

DENSE_LIMIT = 4000
NULL_RTOL = 1e-10


@dataclass
class AngleReport:
    D: int
    angles: np.ndarray
    p_D: float
    dk: int
    variant: str
    scheme: str
    theta_size: int
    method: str = "svd"
    inconsistent: bool = False
    meta: dict = field(default_factory=dict)

    def summary(self):
        return {"D": self.D, "p_D": self.p_D, "dk": self.dk, "variant": self.variant,
                "scheme": self.scheme, "theta_size": self.theta_size, "method": self.method,
                "inconsistent": self.inconsistent, "meta": self.meta}

    def save(self, stem):
        with open(f"{stem}.csv", "w") as fh:
            fh.write("index,angle\n")
            for i, a in enumerate(self.angles, start=1):
                fh.write(f"{i},{float(a)!r}\n")
        with open(f"{stem}.json", "w") as fh:
            json.dump(self.summary(), fh, indent=2, sort_keys=True)
        return f"{stem}.csv", f"{stem}.json"


def check_thickness(grid, D):
    limit = min(min(grid.counts), grid.n_layers)
    if D < 1 or 2 * D >= limit:
        raise ValueError(f"boundary thickness D={D} must satisfy 1 <= D and 2D < {limit}")


def boundary_mask(grid, D):
    """Boolean array over ``grid.shape``: True within ``D`` boxes of any face."""
    check_thickness(grid, D)
    mask = np.zeros(grid.shape, dtype=bool)
    for axis, n in enumerate(grid.shape):
        idx = np.arange(n)
        near = (idx < D) | (idx >= n - D)
        shape = [1] * len(grid.shape)
        shape[axis] = n
        mask |= near.reshape(shape)
    return mask


def boundary_subspace_indices(grid, D, variant="whole_period"):
    """Flat (C-order) indices of the boundary layer of thickness ``D``.

    The layer is the same for both variants (spatial faces plus the first and
    last ``D`` time layers); the variant only changes which rows ``A`` has.
    """
    if variant not in ("whole_period", "part_interval"):
        raise ValueError("variant must be 'whole_period' or 'part_interval'")
    return np.flatnonzero(boundary_mask(grid, D).ravel())


def dense_kernel(a, rtol=NULL_RTOL):
    """Orthonormal kernel basis via the full SVD; also returns the numerical rank."""
    dense = a.toarray() if sparse.issparse(a) else np.asarray(a)
    _, s, vt = linalg.svd(dense, full_matrices=True, lapack_driver="gesdd")
    smax = s[0] if len(s) else 0.0
    rank = int(np.sum(s > rtol * smax)) if smax > 0 else 0
    return vt[rank:].T, rank


def eliminated_kernel(op):
    """Kernel basis by eliminating interior unknowns.

    With ``A = [A_I | A_B]`` split into one interior column per row and the
    remaining boundary columns, ``Ker(A)`` is spanned by ``[-A_I^{-1} A_B; I]``
    whenever ``A_I`` is square and nonsingular.  Returns ``None`` when it is not.
    """
    grid = op.grid
    layers = (op.row_layers + 1) % grid.n_layers
    interior = np.zeros(grid.shape, dtype=bool)
    sl = tuple(slice(1, c - 1) for c in grid.counts)
    for k in np.unique(layers):
        interior[sl + (k,)] = True
    cols_i = np.flatnonzero(interior.ravel())
    cols_b = np.flatnonzero(~interior.ravel())
    a = op.matrix.tocsc()
    if len(cols_i) != a.shape[0]:
        return None
    try:
        lu = splu(a[:, cols_i].tocsc())
    except RuntimeError:
        return None
    rhs = a[:, cols_b].toarray()
    x = -lu.solve(rhs)
    if not np.all(np.isfinite(x)):
        return None
    basis = np.zeros((a.shape[1], len(cols_b)))
    basis[cols_i] = x
    basis[cols_b, np.arange(len(cols_b))] = 1.0
    q, _ = linalg.qr(basis, mode="economic")
    return q


def kernel_basis(op, method="auto"):
    """``(basis, method_used, inconsistent)`` for ``Ker(A)``."""
    a = op.matrix
    expected = op.expected_kernel_dim()
    if method == "auto":
        method = "svd" if a.shape[1] <= DENSE_LIMIT else "elimination"
    if method == "elimination":
        basis = eliminated_kernel(op)
        if basis is not None:
            check = np.linalg.norm(a @ basis) / max(sparse.linalg.norm(a), 1.0)
            if check < 1e-8:
                return basis, "elimination", False
        warnings.warn("interior block singular; falling back to dense SVD", RuntimeWarning)
        method = "svd"
    basis, _ = dense_kernel(a)
    return basis, "svd", basis.shape[1] != expected


def angles_from_bases(basis, indices):
    """Principal angles (ascending) between span(basis) and coordinate axes ``indices``."""
    dk = basis.shape[1]
    if dk == 0:
        return np.empty(0)
    s = linalg.svd(basis[indices, :], compute_uv=False) if len(indices) else np.empty(0)
    cos = np.zeros(dk)
    cos[:min(dk, len(s))] = np.clip(s[:dk], 0.0, 1.0)
    return np.sort(np.arccos(cos))


def subspace_angles(a, b):
    """Principal angles between the column spans of two orthonormal bases."""
    s = linalg.svd(a.T @ b, compute_uv=False)
    return np.sort(np.arccos(np.clip(s, 0.0, 1.0)))


def principal_angles(op, indices, D=None, basis=None, method="auto"):
    """:class:`AngleReport` for ``op`` against the coordinate set ``indices``."""
    inconsistent = False
    if basis is None:
        basis, method, inconsistent = kernel_basis(op, method)
    dk = basis.shape[1]
    if dk > len(indices):
        warnings.warn(f"kernel dimension {dk} exceeds boundary layer size {len(indices)}",
                      RuntimeWarning)
    angles = angles_from_bases(basis, indices)
    p = float(np.mean(np.cos(angles))) if dk else 0.0
    variant = "part_interval" if op.variant == "part_interval" else "whole_period"
    meta = {}
    if variant == "part_interval":
        meta["time_block"] = [op.grid.t1, op.grid.t1 + op.grid.period]
    return AngleReport(D if D is not None else -1, angles, p, dk, variant, op.scheme, len(indices),
                       method, inconsistent, meta)


def diagnostic_grid(sde, lower, upper, N, n_layers, variant="whole_period"):
    """Block grid for angle studies: ``N x N`` boxes and ``n_layers`` stored layers.

    ``part_interval`` spans the central third of the period.
    """
    if variant == "whole_period":
        return SpaceTimeGrid((lower,) * sde.dimension, (upper,) * sde.dimension,
                             (N,) * sde.dimension, n_layers + 1, sde.period, 0.0)
    if variant == "part_interval":
        span = sde.period / 3.0
        return SpaceTimeGrid((lower,) * sde.dimension, (upper,) * sde.dimension,
                             (N,) * sde.dimension, n_layers + 1, span, span)
    raise ValueError("variant must be 'whole_period' or 'part_interval'")


def angle_study(sde, lower, upper, N, n_layers, scheme, thicknesses=(1, 2, 3),
                variant="whole_period", method="auto"):
    """Reports for each ``D`` on one assembled block (kernel computed once)."""
    grid = diagnostic_grid(sde, lower, upper, N, n_layers, variant)
    op = fd.assemble(sde, grid, scheme, "periodic" if variant == "whole_period" else "part_interval")
    basis, used, inconsistent = kernel_basis(op, method)
    reports = []
    for D in thicknesses:
        rep = principal_angles(op, boundary_subspace_indices(grid, D, variant), D, basis)
        rep.method, rep.inconsistent = used, inconsistent
        reports.append(rep)
    return reports


# ---------------------------------------------------------------------------
# where does the solver error go?

def ring_mask(grid, width=2):
    """Spatial mask of the outermost ``width`` boxes."""
    mask = np.zeros(grid.counts, dtype=bool)
    for axis, n in enumerate(grid.counts):
        idx = np.arange(n)
        near = (idx < width) | (idx >= n - width)
        shape = [1] * grid.dim
        shape[axis] = n
        mask |= near.reshape(shape)
    return mask


def ring_ratio(err, grid, width=2):
    """Per-layer ``mean |err|`` on the boundary ring over the interior mean."""
    mask = ring_mask(grid, width)
    flat = err.reshape(-1, grid.n_layers)
    m = mask.ravel()
    return flat[m].mean(axis=0) / flat[~m].mean(axis=0)


def error_localization(sde, v, exact, scheme="crank_nicolson", tol=1e-10, width=2):
    """Solve with and without the cyclic time rows and compare error placement.

    Returns a dict with per-box ``|u - u_exact|`` fields and per-layer
    ring/interior ratios for both treatments.
    """
    out = {}
    for variant in ("periodic", "nonperiodic"):
        op = fd.assemble(sde, v.grid, scheme, variant)
        rep = fd.least_norm_solve(op, v, tol=tol)
        err = np.abs(rep.solution.values - exact.values)
        out[variant] = {"error": err, "ratio": ring_ratio(err, v.grid, width), "report": rep}
    return out
