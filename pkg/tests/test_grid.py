import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from singular_ma.grid import ConvexGridFunction, GridSpec, dumps_magf, loads_magf


def test_box_grid_geometry():
    g = GridSpec.box([-1, -1], [1, 1], (5, 5))
    assert g.spacing == (0.5, 0.5) and g.h == 0.5
    assert g.mask.all()
    assert g.boundary.sum() == 16 and g.interior.sum() == 9
    assert g.domain_volume() == 4.0


def test_ball_grid_marks_exterior():
    g = GridSpec.ball(2, 9)
    assert not g.mask[0, 0] and g.mask[4, 4]
    assert g.interior[4, 4] and g.boundary[4, 0]
    assert g.domain_volume() == pytest.approx(np.pi)


def test_cylinder_is_three_dimensional():
    with pytest.raises(ValueError):
        GridSpec((5, 5), (0, 0), (1, 1), "cylinder", radius=1.0, half_height=1.0)
    g = GridSpec.cylinder(9)
    assert g.dim == 3 and g.mask[4, 4, 0] and g.boundary[4, 4, 0]
    assert g.signed_depth(np.zeros(3)) == pytest.approx(1.0)


@pytest.mark.parametrize("kw", [
    dict(counts=(2, 5), origin=(0, 0), spacing=(1, 1)),
    dict(counts=(5, 5), origin=(0, 0), spacing=(1, 0)),
    dict(counts=(5, 5), origin=(0,), spacing=(1, 1)),
    dict(counts=(5, 5), origin=(0, 0), spacing=(1, 1), shape="torus"),
    dict(counts=(5, 5), origin=(0, 0), spacing=(1, 1), shape="ball"),
])
def test_invalid_grids_rejected(kw):
    with pytest.raises(ValueError):
        GridSpec(**kw)


def test_index_of_round_trips_points():
    g = GridSpec.box([-1, 0], [1, 2], (9, 5))
    for idx in [(0, 0), (3, 2), (8, 4)]:
        assert g.index_of(g.point(idx)) == idx


def test_grid_function_rejects_nonfinite_inside():
    g = GridSpec.box([0], [1], (4,))
    with pytest.raises(ValueError):
        ConvexGridFunction(g, [0.0, np.nan, 1.0, 2.0])


def test_grid_function_masks_exterior_and_is_read_only():
    g = GridSpec.ball(2, 5)
    u = ConvexGridFunction(g, np.ones(g.counts))
    assert np.isnan(u.values[0, 0])
    with pytest.raises(ValueError):
        u.values[2, 2] = 5.0


@pytest.mark.parametrize("grid", [
    GridSpec.box([-1, -0.5], [1, 0.5], (5, 3)),
    GridSpec.ball(2, 7, radius=0.5),
    GridSpec.cylinder(5),
], ids=["box", "ball", "cylinder"])
def test_magf_round_trip(grid, tmp_path):
    rng = np.random.default_rng(0)
    u = ConvexGridFunction(grid, rng.normal(size=grid.counts))
    path = tmp_path / "u.magf"
    u.to_magf(path)
    back = ConvexGridFunction.from_magf(path)
    assert back.grid == grid
    np.testing.assert_array_equal(np.isnan(back.values), np.isnan(u.values))
    np.testing.assert_array_equal(back.values[grid.mask], u.values[grid.mask])


def test_magf_header_layout():
    g = GridSpec.ball(2, 3)
    text = dumps_magf(ConvexGridFunction(g, np.zeros(g.counts)))
    lines = text.splitlines()
    assert lines[0] == "MAGF1 2 3 3"
    assert lines[1].startswith("origin ") and lines[2].startswith("spacing ")
    assert lines[3].startswith("domain ball")
    assert lines[4] == "nan" and len(lines) == 4 + 9


def test_magf_rejects_garbage():
    with pytest.raises(ValueError):
        loads_magf("HELLO 2 3 3\n")
    good = dumps_magf(ConvexGridFunction(GridSpec.box([0], [1], (3,)), [0, 1, 2]))
    with pytest.raises(ValueError):
        loads_magf("\n".join(good.splitlines()[:-1]))


@settings(max_examples=25, deadline=None)
@given(st.integers(3, 12), st.integers(3, 12), st.floats(0.1, 5), st.floats(-3, 3))
def test_dict_round_trip(nx, ny, width, shift):
    g = GridSpec.box([shift, shift], [shift + width, shift + 2 * width], (nx, ny))
    assert GridSpec.from_dict(g.to_dict()) == g
