import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate

from periodicfp import sde as S


@pytest.mark.parametrize("name", S.BUILTIN_NAMES)
def test_builtins_are_periodic_and_vectorised(name):
    sys_ = S.builtin(name)
    rng = np.random.default_rng(0)
    x = rng.normal(size=(7, sys_.dimension)) + 0.3
    t = rng.uniform(0, sys_.period, 7)
    f0, f1 = sys_.drift(x, t), sys_.drift(x, t + sys_.period)
    assert f0.shape == x.shape
    np.testing.assert_allclose(f0, f1, rtol=1e-9, atol=1e-9)
    assert sys_.diffusion(x, t).shape == (7, sys_.dimension, sys_.dimension)


def test_unknown_builtin_lists_names():
    with pytest.raises(ValueError, match="stuart_landau"):
        S.builtin("nope")


def test_term_grammar_matches_builtin_example2():
    ref = S.builtin("example2")
    expr = "-x1 - x2 + sin(t) + 0.5*cos(t)"
    custom = S.from_terms([expr, expr], 1.0, 2 * np.pi)
    rng = np.random.default_rng(1)
    x, t = rng.normal(size=(20, 2)), rng.uniform(0, 7, 20)
    np.testing.assert_allclose(custom.drift(x, t), ref.drift(x, t), atol=1e-12)
    np.testing.assert_allclose(custom.covariance(x, t), ref.covariance(x, t))


@given(st.floats(-5, 5), st.integers(0, 3), st.integers(0, 3), st.integers(1, 3))
@settings(max_examples=40)
def test_term_grammar_monomials(c, p, q, w):
    sys_ = S.from_terms([f"{c!r}*x1^{p}*x2^{q}*cos({w}*t)", "0"], 1.0, 2 * np.pi)
    x, t = np.array([[1.3, -0.7]]), np.array([0.4])
    expected = c * 1.3 ** p * (-0.7) ** q * np.cos(w * 0.4)
    np.testing.assert_allclose(sys_.drift(x, t)[0, 0], expected, rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("bad", ["x3", "sin(0.5*t)", "2*y", "sin(t)*cos(t)", ""])
def test_term_grammar_rejects(bad):
    with pytest.raises(ValueError):
        S.from_terms([bad, "0"], 1.0, 2 * np.pi)


def test_matrix_diffusion_and_shape_check():
    sys_ = S.from_terms(["0", "0"], [["1", "0"], ["0.5*x1", "2"]], 2 * np.pi)
    sig = sys_.diffusion(np.array([[2.0, 0.0]]), np.array([0.0]))
    np.testing.assert_allclose(sig[0], [[1, 0], [1, 2]])
    with pytest.raises(ValueError):
        S.from_terms(["0", "0"], [["1"]], 2 * np.pi)


def test_zero_noise_is_explicit_euler():
    sys_ = S.from_terms(["-x1"], 0.0, 1.0)
    tr = S.euler_maruyama(sys_, [1.0], 0.0, 100, 0.01, seed=3)
    np.testing.assert_allclose(tr.states[-1, 0], 0.99 ** 100)
    assert tr.states.shape == (101, 1)


def test_pure_diffusion_variance():
    bm = S.builtin("example1")
    x0 = np.zeros((4000, 2))
    *_, (times, block) = S.iter_ensemble(bm, x0, 0.0, 1000, 1e-3, seed=9, chunk=1000)
    assert abs(block[-1].var() - 1.0) < 0.05


def test_chunking_does_not_change_paths():
    sys_ = S.builtin("example2")
    x0 = np.zeros((3, 2))
    a = np.concatenate([b for _, b in S.iter_ensemble(sys_, x0, 0.0, 250, 1e-2, 4, chunk=250)])
    b = np.concatenate([b for _, b in S.iter_ensemble(sys_, x0, 0.0, 250, 1e-2, 4, chunk=37)])
    np.testing.assert_array_equal(a, b)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_reports_step():
    boom = S.from_terms(["x1^3"], 0.0, 1.0, initial_state=[10.0])
    with pytest.raises(S.DivergenceError) as info:
        S.euler_maruyama(boom, [10.0], 0.0, 100, 0.1, seed=0)
    assert info.value.step >= 1


def test_stuart_landau_density_normalised():
    for t in (0.0, 1.0, np.pi / 2):
        mass, _ = integrate.dblquad(lambda r, th: r * S.exact_density_stuart_landau(r, 0.0, t),
                                    0, 2 * np.pi, 0, 5)
        assert abs(mass - 1.0) < 1e-6


def test_ring_gradient_drift_finite_at_origin():
    f = S.builtin("example3").drift(np.zeros((1, 2)), np.array([0.3]))
    assert np.all(np.isfinite(f))


def test_exact_density_lookup():
    assert S.exact_density(S.builtin("stuart_landau")) is not None
    assert S.exact_density(S.builtin("ring")) is None
