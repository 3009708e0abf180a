import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import sparse

from periodicfp import fd
from periodicfp import sde as S
from periodicfp.grid import DensityField, SpaceTimeGrid, exact_field

SL = S.builtin("stuart_landau")


def small_grid(N=6, L=5, a=-3.0, b=3.0):
    return SpaceTimeGrid.square(a, b, N, L, 2 * np.pi)


@pytest.mark.parametrize("variant,layers", [("periodic", 4), ("nonperiodic", 3), ("part_interval", 2)])
def test_row_counts(variant, layers):
    g = small_grid()
    op = fd.assemble(SL, g, "crank_nicolson", variant)
    assert op.shape == (16 * layers, 36 * 4)


def test_pure_diffusion_stencil_oracle():
    # dX = dW in 2-D: Lu = -u_t + 1/2 Laplacian u; for u = x^2 + y^2 + t the
    # centred stencil is exact: 1/2 * 4 = 2 and -u_t = -1, so A u = 1 per row
    # for backward Euler as well (coefficients are constant).
    bm = S.from_terms(["0", "0"], 1.0, 1.0)
    g = SpaceTimeGrid.square(-1, 1, 8, 6, 1.0)
    x, y, t = g.mesh()
    for scheme in fd.SCHEMES:
        op = fd.assemble(bm, g, scheme, "nonperiodic")
        u = (x ** 2 + y ** 2 + t).ravel()
        np.testing.assert_allclose(op.matrix @ u, 1.0, rtol=1e-9)


def test_exact_density_nearly_in_kernel():
    g = SpaceTimeGrid.square(-3, 3, 40, 41, 2 * np.pi)
    ex = exact_field(g, S.exact_density_stuart_landau)
    op = fd.assemble(SL, g)
    row_scale = np.sqrt(np.asarray(op.matrix.multiply(op.matrix).sum(axis=1)).ravel())
    rel = np.abs(op.matrix @ ex.flat()) / (row_scale * ex.values.max())
    assert np.median(rel) < 0.02


def test_least_norm_is_orthogonal_projection():
    g = small_grid(N=6, L=5)
    op = fd.assemble(SL, g)
    v = np.random.default_rng(0).random(g.size)
    rep = fd.least_norm_solve(op, v, tol=1e-12)
    u = rep.solution.flat()
    assert rep.converged
    assert np.linalg.norm(op.matrix @ u) <= 1e-8 * np.linalg.norm(op.matrix @ v)
    # u - v lies in the row space, i.e. orthogonal to every kernel vector
    dense = op.matrix.toarray()
    _, s, vt = np.linalg.svd(dense)
    kernel = vt[np.sum(s > 1e-10 * s[0]):]
    assert np.max(np.abs(kernel @ (u - v))) < 1e-8
    assert rep.distance == pytest.approx(np.linalg.norm(u - v))


def test_least_norm_keeps_kernel_vectors():
    g = small_grid(N=5, L=4)
    op = fd.assemble(SL, g)
    _, s, vt = np.linalg.svd(op.matrix.toarray())
    k = vt[-1]
    rep = fd.least_norm_solve(op, k, tol=1e-12)
    np.testing.assert_allclose(rep.solution.flat(), k, atol=1e-9)
    assert rep.cg_iterations == 0 or rep.distance < 1e-9


@given(st.integers(0, 2 ** 31))
@settings(max_examples=10, deadline=None)
def test_penalty_normal_equations(seed):
    g = small_grid(N=5, L=4)
    op = fd.assemble(SL, g, "backward_euler")
    v = np.random.default_rng(seed).random(g.size)
    rep = fd.penalty_solve(op, v, tol=1e-12, max_iter=5000)
    a = op.matrix
    u = rep.solution.flat()
    np.testing.assert_allclose(a.T @ (a @ u) + u, v, atol=1e-8 * np.linalg.norm(v))


def test_solver_accepts_raw_matrix_and_reports_schema(tmp_path):
    a = sparse.csr_matrix(np.array([[1.0, -1.0, 0.0]]))
    rep = fd.least_norm_solve(a, np.array([1.0, 0.0, 5.0]))
    np.testing.assert_allclose(rep.solution, [0.5, 0.5, 5.0])
    d = rep.to_dict()
    for key in ("residual", "distance", "cg_iterations", "converged", "min_value", "negative_fraction"):
        assert key in d
    rep.save(tmp_path / "r.json")
    with pytest.raises(ValueError):
        fd.least_norm_solve(a, np.zeros(3), tol=0)


def test_zero_rhs_short_circuits():
    g = small_grid(N=5, L=4)
    op = fd.assemble(SL, g)
    rep = fd.least_norm_solve(op, DensityField(g, np.zeros(g.shape), "monte_carlo_v"))
    assert rep.cg_iterations == 0 and not rep.solution.values.any()


def test_operator_export(tmp_path):
    op = fd.assemble(SL, small_grid(N=4, L=3))
    rows = fd.write_coo_csv(tmp_path / "a.csv", op)
    data = np.loadtxt(tmp_path / "a.csv", delimiter=",", skiprows=1)
    assert rows == op.matrix.nnz == len(data)
    rebuilt = sparse.coo_matrix((data[:, 2], (data[:, 0].astype(int), data[:, 1].astype(int))),
                                shape=op.shape)
    assert abs(rebuilt - op.matrix).max() == 0


def test_input_validation():
    with pytest.raises(ValueError):
        fd.assemble(SL, small_grid(), "leapfrog")
    with pytest.raises(ValueError):
        fd.assemble(SL, small_grid(N=3))
    with pytest.raises(ValueError):
        fd.assemble(S.builtin("vdp4_coupled"), small_grid())
