import numpy as np
import pytest
from hypothesis import given, strategies as st

from periodicfp.grid import DensityField, SpaceTimeGrid, exact_field, load_field, save_field


def test_geometry():
    g = SpaceTimeGrid.square(-3, 3, 6, 5, 2 * np.pi)
    assert g.h == 1.0 and g.n_layers == 4 and g.shape == (6, 6, 4)
    assert np.isclose(g.delta, np.pi / 2)
    np.testing.assert_allclose(g.centers(0), np.arange(-2.5, 3, 1.0))
    np.testing.assert_allclose(g.layer_times(), (np.arange(4) + 0.5) * np.pi / 2)


def test_non_square_rejected():
    with pytest.raises(ValueError, match="square"):
        SpaceTimeGrid((0, 0), (1, 2), (4, 4), 3, 1.0)


@given(st.floats(-100, 100))
def test_layer_mapping_is_cyclic(t):
    g = SpaceTimeGrid.square(0, 1, 2, 9, 3.0, t1=0.5)
    assert g.layer_of(t) == g.layer_of(t + 3.0) or np.isclose((t - 0.5) % 3.0, 0, atol=1e-9) \
        or np.isclose((t - 0.5) % 3.0, 3.0, atol=1e-9)
    assert 0 <= g.layer_of(t) < g.n_layers


def test_box_of_and_outside():
    g = SpaceTimeGrid.square(-1, 1, 4, 3, 1.0)
    idx, inside = g.box_of(np.array([[-0.9, 0.9], [1.5, 0.0], [0.0, -1.0]]))
    assert idx[0].tolist() == [0, 3] and inside.tolist() == [True, False, True]


def test_field_round_trip(tmp_path):
    g = SpaceTimeGrid.square(-1, 1, 3, 4, 2.0)
    vals = np.random.default_rng(0).random(g.shape)
    fld = DensityField(g, vals, "solved_u", meta={"a": 1})
    csv_path, _ = save_field(str(tmp_path / "f"), fld)
    header = open(csv_path).readline().strip()
    assert header == "i,j,k,x_center,y_center,t_center,value"
    back = load_field(str(tmp_path / "f"))
    np.testing.assert_array_equal(back.values, vals)
    assert back.grid == g and back.kind == "solved_u"


def test_exact_field_mass_and_kind_check():
    from periodicfp.sde import exact_density_stuart_landau

    g = SpaceTimeGrid.square(-3, 3, 60, 11, 2 * np.pi)
    ex = exact_field(g, exact_density_stuart_landau)
    assert np.all((ex.slice_mass() > 0.95) & (ex.slice_mass() < 1.0 + 1e-3))
    with pytest.raises(ValueError):
        DensityField(g, ex.values, "bogus")
