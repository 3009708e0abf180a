"""Discretised periodic Fokker-Planck operator and the constrained solvers.

Unknowns are box values ``u[i, ..., k]`` flattened in C order (time last)
over the ``L - 1`` stored layers.  Each row is one interior box and one time
step ``k -> k+1``:

    -(u[., k+1] - u[., k]) / delta + w0 * (S u)[., k] + w1 * (S u)[., k+1]

where ``S`` is the spatial part of the forward operator with centred
differences and ``(w0, w1)`` is ``(1, 0)``, ``(0, 1)`` or ``(1/2, 1/2)`` for the
three schemes.  Layer ``L - 1`` wraps to layer ``0``.
"""

import json
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import LinearOperator, cg

from .grid import DensityField

SCHEMES = {"forward_euler": (1.0, 0.0), "backward_euler": (0.0, 1.0), "crank_nicolson": (0.5, 0.5)}
VARIANTS = ("periodic", "nonperiodic", "part_interval")


@dataclass
class DiscretizedOperator:
    matrix: sparse.csr_matrix
    grid: object
    scheme: str
    variant: str = "periodic"
    sde_label: str = ""
    row_layers: np.ndarray = field(default=None, repr=False)

    @property
    def shape(self):
        return self.matrix.shape

    @property
    def n_rows(self):
        return self.matrix.shape[0]

    @property
    def n_cols(self):
        return self.matrix.shape[1]

    def expected_kernel_dim(self):
        """Column count minus row count (the kernel size when rows are independent)."""
        return self.n_cols - self.n_rows


def row_layers(n_layers, variant):
    if variant == "periodic":
        return np.arange(n_layers)
    if variant == "nonperiodic":
        return np.arange(n_layers - 1)
    if variant == "part_interval":
        return np.arange(1, n_layers - 1)
    raise ValueError(f"variant must be one of {VARIANTS}")


def _coefficients(sde, grid):
    mesh = grid.mesh()
    x = np.stack(mesh[:-1], axis=-1)
    t = mesh[-1]
    f = np.broadcast_to(sde.drift(x, t), grid.shape + (grid.dim,))
    sig = np.broadcast_to(sde.covariance(x, t), grid.shape + (grid.dim, grid.dim))
    return f, sig


def spatial_stencil(f, sig, h):
    """Offsets and coefficient arrays of ``S`` at every box.

    Returns ``[(offset, coef)]`` where ``coef[p]`` multiplies ``u[p + offset]``
    in ``(S u)[p]``; coefficients use the field values at the neighbour box.
    Arrays are indexed over the full grid and are only meaningful where all
    neighbours exist.
    """
    n = f.shape[-1]
    terms = {}

    def add(offset, arr):
        offset = tuple(offset)
        terms[offset] = terms.get(offset, 0.0) + arr

    zero = (0,) * n
    centre = np.zeros(f.shape[:-1])
    for a in range(n):
        centre = centre - sig[..., a, a] / h ** 2
    add(zero, centre)
    for a in range(n):
        for s in (1, -1):
            off = [0] * n
            off[a] = s
            shifted_f = np.roll(f[..., a], -s, axis=a)
            shifted_s = np.roll(sig[..., a, a], -s, axis=a)
            add(off, -s * shifted_f / (2 * h) + 0.5 * shifted_s / h ** 2)
    for a in range(n):
        for b in range(a + 1, n):
            if not np.any(sig[..., a, b]):
                continue
            for sa in (1, -1):
                for sb in (1, -1):
                    off = [0] * n
                    off[a], off[b] = sa, sb
                    shifted = np.roll(np.roll(sig[..., a, b], -sa, axis=a), -sb, axis=b)
                    add(off, sa * sb * shifted / (4 * h ** 2))
    return list(terms.items())


def assemble(sde, grid, scheme="crank_nicolson", variant="periodic"):
    """Sparse operator ``A`` over interior boxes of ``grid``."""
    if scheme not in SCHEMES:
        raise ValueError(f"scheme must be one of {tuple(SCHEMES)}")
    if any(c < 4 for c in grid.counts):
        raise ValueError("each spatial axis needs at least 4 boxes")
    if sde.dimension != grid.dim:
        raise ValueError(f"grid dimension {grid.dim} does not match SDE dimension {sde.dimension}")
    nl = grid.n_layers
    if variant == "part_interval" and nl < 3:
        raise ValueError("part_interval needs at least 3 stored layers")
    w0, w1 = SCHEMES[scheme]
    f, sig = _coefficients(sde, grid)
    stencil = spatial_stencil(f, sig, grid.h)
    n = grid.dim
    interior = np.stack(np.meshgrid(*[np.arange(1, c - 1) for c in grid.counts], indexing="ij"),
                        axis=-1).reshape(-1, n)
    layers = row_layers(nl, variant)
    n_int = len(interior)
    rows_base = np.arange(n_int * len(layers)).reshape(n_int, len(layers))
    p = np.repeat(interior, len(layers), axis=0)
    k = np.tile(layers, n_int)
    k_next = (k + 1) % nl
    r = rows_base.ravel()

    def col(pos, layer):
        return np.ravel_multi_index(tuple(pos.T) + (layer,), grid.shape)

    rr, cc, vv = [r, r], [col(p, k), col(p, k_next)], [np.full(len(r), 1.0 / grid.delta),
                                                       np.full(len(r), -1.0 / grid.delta)]
    for offset, coef in stencil:
        q = p + np.asarray(offset)
        for w, layer in ((w0, k), (w1, k_next)):
            if w == 0.0:
                continue
            val = w * coef[tuple(p.T) + (layer,)]
            rr.append(r)
            cc.append(col(q, layer))
            vv.append(val)
    mat = sparse.coo_matrix((np.concatenate(vv), (np.concatenate(rr), np.concatenate(cc))),
                            shape=(len(r), grid.size)).tocsr()
    mat.sum_duplicates()
    return DiscretizedOperator(mat, grid, scheme, variant, sde.label, k)


def write_coo_csv(path, op):
    coo = op.matrix.tocoo()
    order = np.lexsort((coo.col, coo.row))
    with open(path, "w") as fh:
        fh.write("row,col,value\n")
        for i, j, v in zip(coo.row[order], coo.col[order], coo.data[order]):
            fh.write(f"{i},{j},{float(v)!r}\n")
    return len(order)


# ---------------------------------------------------------------------------
# solvers

@dataclass
class SolveReport:
    solution: DensityField
    residual: float
    distance: float
    cg_iterations: int
    converged: bool
    inner_residual: float
    method: str
    tol: float
    max_iter: int

    def to_dict(self):
        values = np.asarray(getattr(self.solution, "values", self.solution))
        return {"method": self.method, "residual": self.residual, "distance": self.distance,
                "cg_iterations": self.cg_iterations, "converged": bool(self.converged),
                "inner_relative_residual": self.inner_residual, "tol": self.tol,
                "max_iter": self.max_iter, "min_value": float(values.min()),
                "negative_fraction": float(np.mean(values < 0))}

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)


def _as_matrix(op):
    return op.matrix if isinstance(op, DiscretizedOperator) else sparse.csr_matrix(op)


def default_max_iter(n_rows):
    return max(100, int(20 * np.sqrt(max(n_rows, 1))))


def _cg(matvec, diag, b, tol, max_iter):
    n = len(b)
    op = LinearOperator((n, n), matvec=matvec, dtype=float)
    safe = np.where(diag > 0, diag, 1.0)
    pre = LinearOperator((n, n), matvec=lambda z: z / safe, dtype=float)
    count = [0]

    def tick(_):
        count[0] += 1

    if not np.any(b):
        return np.zeros(n), 0, 0.0
    bnorm = np.linalg.norm(b)
    x = np.zeros(n)
    rel = 1.0
    # restart from the current iterate when the recursive residual drifted
    # below tol while the true residual did not
    for _ in range(4):
        budget = max_iter - count[0]
        if budget <= 0:
            break
        x, _ = cg(op, b, x0=x, rtol=tol, atol=0.0, maxiter=budget, M=pre, callback=tick)
        rel = float(np.linalg.norm(b - matvec(x)) / bnorm)
        if rel <= tol:
            break
    return x, count[0], rel


def least_norm_solve(op, v, tol=1e-10, max_iter=None):
    """Closest point to ``v`` in ``Ker(A)``: ``u = A^T (A A^T)^{-1} (-A v) + v``."""
    if not tol > 0:
        raise ValueError("tol must be positive")
    a = _as_matrix(op)
    vv = v.flat() if isinstance(v, DensityField) else np.asarray(v, dtype=float).ravel()
    max_iter = default_max_iter(a.shape[0]) if max_iter is None else max_iter
    at = a.T.tocsr()
    rhs = -(a @ vv)
    diag = np.asarray(a.multiply(a).sum(axis=1)).ravel()
    y, its, rel = _cg(lambda z: a @ (at @ z), diag, rhs, tol, max_iter)
    u = at @ y + vv
    return _report(op, v, u, a, its, rel, tol, max_iter, "least_norm")


def penalty_solve(op, v, tol=1e-10, max_iter=None):
    """Minimiser of ``||A u||^2 + ||u - v||^2``, i.e. ``(A^T A + I) u = v``."""
    a = _as_matrix(op)
    vv = v.flat() if isinstance(v, DensityField) else np.asarray(v, dtype=float).ravel()
    max_iter = default_max_iter(a.shape[0]) if max_iter is None else max_iter
    at = a.T.tocsr()
    diag = np.asarray(a.multiply(a).sum(axis=0)).ravel() + 1.0
    u, its, rel = _cg(lambda z: at @ (a @ z) + z, diag, vv, tol, max_iter)
    return _report(op, v, u, a, its, rel, tol, max_iter, "penalty")


def _report(op, v, u, a, its, rel, tol, max_iter, method):
    vv = v.flat() if isinstance(v, DensityField) else np.asarray(v, dtype=float).ravel()
    grid = op.grid if isinstance(op, DiscretizedOperator) else getattr(v, "grid", None)
    if grid is not None:
        sol = DensityField(grid, u.reshape(grid.shape), "solved_u",
                           meta={"method": method, "scheme": getattr(op, "scheme", None),
                                 "variant": getattr(op, "variant", None)})
    else:
        sol = u
    return SolveReport(sol, float(np.linalg.norm(a @ u)), float(np.linalg.norm(u - vv)), its,
                       bool(rel <= tol), rel, method, tol, max_iter)
