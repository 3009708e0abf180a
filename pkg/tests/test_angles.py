import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from periodicfp import angles as A
from periodicfp import fd
from periodicfp import sde as S


def test_identical_and_orthogonal_subspaces():
    q = np.linalg.qr(np.random.default_rng(0).normal(size=(10, 3)))[0]
    np.testing.assert_allclose(A.subspace_angles(q, q), 0, atol=1e-7)
    e = np.eye(6)
    np.testing.assert_allclose(A.subspace_angles(e[:, :2], e[:, 2:4]), np.pi / 2)


@given(st.integers(1, 5), st.integers(0, 2 ** 31))
@settings(max_examples=20)
def test_coordinate_angles_match_general_formula(k, seed):
    q = np.linalg.qr(np.random.default_rng(seed).normal(size=(12, k)))[0]
    idx = np.array([0, 3, 4, 7, 9, 10])
    a = A.angles_from_bases(q, idx)
    b = A.subspace_angles(q, np.eye(12)[:, idx])
    np.testing.assert_allclose(a, b[:k], atol=1e-7)


def test_thickness_rule():
    g = A.diagnostic_grid(S.builtin("example1"), -3, 3, 8, 6)
    A.check_thickness(g, 2)
    for bad in (0, 3, 4):
        with pytest.raises(ValueError):
            A.check_thickness(g, bad)


def test_boundary_mask_counts():
    g = A.diagnostic_grid(S.builtin("example1"), -3, 3, 8, 6)
    m = A.boundary_mask(g, 1)
    assert m.sum() == 8 * 8 * 6 - 6 * 6 * 4
    assert len(A.boundary_subspace_indices(g, 1)) == m.sum()


@pytest.mark.parametrize("variant", ["whole_period", "part_interval"])
def test_elimination_agrees_with_svd(variant):
    sde = S.builtin("example2")
    g = A.diagnostic_grid(sde, -3, 3, 7, 6, variant)
    op = fd.assemble(sde, g, "crank_nicolson", "periodic" if variant == "whole_period" else variant)
    ks, _ = A.dense_kernel(op.matrix)
    ke = A.eliminated_kernel(op)
    assert ks.shape == ke.shape
    np.testing.assert_allclose(A.subspace_angles(ks, ke), 0, atol=1e-6)
    idx = A.boundary_subspace_indices(g, 1, variant)
    assert A.principal_angles(op, idx, 1, ks).p_D == pytest.approx(
        A.principal_angles(op, idx, 1, ke).p_D, abs=1e-8)


def test_angle_study_report(tmp_path):
    reps = A.angle_study(S.builtin("example1"), -3, 3, 7, 6, "backward_euler", (1, 2))
    assert [r.D for r in reps] == [1, 2]
    assert reps[0].p_D <= reps[1].p_D <= 1
    assert reps[0].dk == (4 * 7 - 4) * 6
    csv, js = reps[0].save(str(tmp_path / "a"))
    rows = np.loadtxt(csv, delimiter=",", skiprows=1)
    assert rows.shape == (reps[0].dk, 2)
    assert np.all(np.diff(rows[:, 1]) >= 0)


def test_ring_ratio_detects_boundary_error():
    g = A.diagnostic_grid(S.builtin("example1"), -3, 3, 10, 4)
    err = np.ones(g.shape)
    err[A.ring_mask(g, 2)] = 5.0
    np.testing.assert_allclose(A.ring_ratio(err, g, 2), 5.0)
