import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from periodicfp import nn
from periodicfp import sde as S
from periodicfp.histogram import PointSets

SL = S.builtin("stuart_landau")
T = 2 * np.pi


def exact(p):
    return S.exact_density_stuart_landau(p[:, 0], p[:, 1], p[:, 2])


def random_sets(rng, nx=15, ny=12, nz=10):
    x = np.column_stack([rng.uniform(-2, 2, (nx, 2)), rng.uniform(0, T, nx)])
    y = np.column_stack([rng.uniform(-2, 2, (ny, 2)), rng.uniform(0, T, ny)])
    return PointSets(x, y, rng.uniform(0, 0.1, ny), rng.uniform(-2, 2, (nz, 2)), 0.0, T)


def small_model(seed=1, sizes=(3, 5, 4, 1), jitter=0.3):
    m = nn.MlpDensityModel.create(sizes, seed=seed, lower=[-3, -3, 0], upper=[3, 3, T])
    m.params += np.random.default_rng(seed + 100).normal(0, jitter, m.n_params)
    return m


def test_zero_weights_give_zero():
    m = nn.MlpDensityModel((3, 4, 1), np.zeros(21))
    np.testing.assert_array_equal(m.forward(np.ones((5, 3))), 0.0)


def test_linear_network_sums_inputs():
    m = nn.MlpDensityModel((3, 1), np.array([1.0, 1.0, 1.0, 0.0]))
    pts = np.random.default_rng(0).normal(size=(7, 3))
    np.testing.assert_allclose(m.forward(pts), pts.sum(axis=1))


def test_parameter_count_and_validation():
    m = nn.MlpDensityModel.create((3,) + nn.DESK_LAYERS + (1,))
    assert m.n_params == 4 * 32 + 33 * 64 + 65 * 64 + 65 * 32 + 33
    with pytest.raises(ValueError):
        nn.MlpDensityModel((3, 1), np.zeros(3))
    with pytest.raises(ValueError):
        m.forward(np.zeros((2, 2)))


def test_loss_gradient_matches_central_differences():
    rng = np.random.default_rng(0)
    m = small_model()
    sets = random_sets(rng)
    _, g = nn.total_loss_grad(m, SL, sets, 1e-2)
    worst = 0.0
    for i in rng.choice(m.n_params, 30, replace=False):
        p = m.params.copy()
        m.params = p.copy(); m.params[i] += 1e-5
        a, _ = nn.total_loss_grad(m, SL, sets, 1e-2)
        m.params = p.copy(); m.params[i] -= 1e-5
        b, _ = nn.total_loss_grad(m, SL, sets, 1e-2)
        m.params = p
        fd = (a - b) / 2e-5
        worst = max(worst, abs(fd - g[i]) / max(abs(fd), abs(g[i]), 1e-8))
    assert worst < 1e-4


def test_residual_vanishes_for_constant_under_pure_diffusion():
    bm = S.from_terms(["0", "0"], 1.0, 1.0)
    pts = np.random.default_rng(0).uniform(-1, 1, (50, 3))
    r = nn.pde_residual(None, bm, pts, 1e-2, func=lambda p: np.full(len(p), 3.0))
    np.testing.assert_allclose(r, 0, atol=1e-9)


def test_residual_of_linear_function_under_constant_drift():
    # drift (1, 0): L u = -u_t - d/dx u + 0 for u = x gives -1 exactly
    sde = S.from_terms(["1", "0"], 1.0, 1.0)
    pts = np.random.default_rng(1).uniform(-1, 1, (40, 3))
    r = nn.pde_residual(None, sde, pts, 1e-2, func=lambda p: p[:, 0])
    np.testing.assert_allclose(r, -1.0, atol=1e-8)


def _exact_residual(h, rng):
    pts = np.column_stack([rng.uniform(-2.5, 2.5, (2000, 2)), rng.uniform(0, T, 2000)])
    return np.abs(nn.pde_residual(None, SL, pts, h, 1e-4, func=exact)).max()


def test_exact_density_residual_converges_at_second_order():
    rng = np.random.default_rng(3)
    r1 = _exact_residual(2e-2, np.random.default_rng(3))
    r2 = _exact_residual(1e-2, np.random.default_rng(3))
    assert 3.0 < r1 / r2 < 5.0


@pytest.mark.xfail(strict=True, reason="fourth derivatives of the ring density are O(1e3); "
                                      "the residual is about 100 h^2")
def test_exact_density_residual_below_ten_h_squared():
    h = 6e-3
    assert _exact_residual(h, np.random.default_rng(4)) < 10 * h ** 2


def test_periodic_loss_zero_for_time_independent_model():
    m = nn.MlpDensityModel.create((3, 6, 1), seed=2)
    m.params[:6 * 3] = 0.0
    m.params[2 * 6:3 * 6] = 0.0  # weights from t (third input row)
    w = m.unpack()[0][0]
    assert not w[2].any()
    sets = random_sets(np.random.default_rng(0))
    assert nn.loss_terms(m, SL, sets, 1e-2, which=(3,))[2] == 0.0


def test_reference_loss_zero_when_model_matches():
    m = nn.MlpDensityModel((3, 1), np.array([1.0, 0.0, 0.0, 0.0]))
    sets = random_sets(np.random.default_rng(0))
    sets.ref_values = sets.ref[:, 0].copy()
    assert nn.loss_terms(m, SL, sets, 1e-2, which=(2,))[1] == pytest.approx(0.0, abs=1e-28)


def test_zero_epochs_leave_parameters():
    m = small_model()
    before = m.params.copy()
    rep = nn.train(m, SL, random_sets(np.random.default_rng(0)), nn.TrainConfig(epochs=0))
    np.testing.assert_array_equal(m.params, before)
    assert rep.L1 == []


def test_alternating_steps_are_isolated():
    """With lr2 = lr3 = 0 training is plain Adam on L1 batches alone."""
    rng = np.random.default_rng(0)
    sets = random_sets(rng, nx=1)
    cfg = nn.TrainConfig(epochs=3, lr2=0.0, lr3=0.0, batch_train=1, h_fd=1e-2, ht_fd=1e-2)
    a = small_model()
    nn.train(a, SL, sets, cfg, seed=4)
    b = small_model()
    opt = nn.Adam(b.n_params)
    for _ in range(3):
        _, g = nn._l1_grad(b, SL, sets.train, 1e-2, 1e-2)
        b.params = opt.step(b.params, g, cfg.lr1)
    np.testing.assert_array_equal(a.params, b.params)


def test_single_term_training_reduces_reference_loss():
    rng = np.random.default_rng(0)
    sets = random_sets(rng, ny=200)
    cfg = nn.TrainConfig(epochs=30, lr1=0.0, lr3=0.0, lr2=1e-2, batch_ref=50, batch_train=15)
    m = small_model()
    before = nn.loss_terms(m, SL, sets, 1e-2, which=(2,))[1]
    rep = nn.train(m, SL, sets, cfg, seed=1)
    assert rep.final[1] < 0.5 * before


def test_checkpoint_round_trip(tmp_path):
    m = small_model()
    nn.save_checkpoint(tmp_path / "m.ckpt", m, epoch=7, extra={"note": "x"})
    back, header = nn.load_checkpoint(tmp_path / "m.ckpt")
    assert header["epoch"] == 7 and header["note"] == "x"
    pts = np.random.default_rng(0).uniform(-2, 2, (10, 3))
    np.testing.assert_array_equal(back.forward(pts), m.forward(pts))


def test_empty_set_is_an_error():
    sets = random_sets(np.random.default_rng(0))
    sets.boundary = np.zeros((0, 2))
    with pytest.raises(ValueError):
        nn.loss_terms(small_model(), SL, sets, 1e-2)


@given(st.sampled_from(["lr1", "decay", "decay_every", "batch_ref", "periodic_norm"]))
@settings(max_examples=10)
def test_config_rejects_bad_values(name):
    bad = {"lr1": -1.0, "decay": 0.0, "decay_every": 0, "batch_ref": 0, "periodic_norm": "l3"}
    with pytest.raises(ValueError):
        nn.TrainConfig(**{name: bad[name]})


@pytest.mark.slow
def test_squared_periodic_penalty_trades_accuracy_for_smoothness():
    rng = np.random.default_rng(5)
    sets = random_sets(rng, nz=300)
    gaps = {}
    for norm in ("l1", "l2"):
        m = small_model(jitter=1.0)
        cfg = nn.TrainConfig(epochs=60, lr1=0.0, lr2=0.0, lr3=1e-2, batch_train=15,
                             batch_boundary=50, periodic_norm=norm)
        nn.train(m, SL, sets, cfg, seed=2)
        gaps[norm] = nn.loss_terms(m, SL, sets, 1e-2, periodic_norm="l1", which=(3,))[2]
    # both drive the gap down; the absolute-value form is at least as tight in its own metric
    assert gaps["l1"] <= gaps["l2"] * 1.5
