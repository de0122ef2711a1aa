import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from dogm.errors import ContractError, DataError, GridRangeError
from dogm.grid import (
    GridMap, LevelPyramid, Pose2, crop, dgm1_bytes, dgm1_from_bytes, ego_window_origin,
    global_index, normalize_angle, place, read_dgm1, write_dgm1,
)

PYR = LevelPyramid()
ORIGIN = Pose2(0.0, 0.0)


def test_pyramid_defaults():
    assert PYR.ratios == (1, 3, 9, 27)
    assert [PYR.cell_size(lvl) for lvl in (1, 2, 3, 4)] == pytest.approx([0.15, 0.45, 1.35, 4.05])
    assert PYR.pad_cells == 28
    with pytest.raises(ContractError):
        PYR.check_level(5)


def test_pyramid_rejects_non_factor_three():
    with pytest.raises(ContractError):
        LevelPyramid(0.15, (1, 2, 4))


@pytest.mark.parametrize("pose,level,expected", [
    ((1.0, 2.0), 1, (6, 13)),
    ((-0.1, 0.0), 1, (-1, 0)),
    ((4.05, 4.05), 4, (1, 1)),
])
def test_global_index_examples(pose, level, expected):
    idx = global_index(Pose2(*pose), ORIGIN, PYR, level)
    assert (idx.i_east, idx.i_north) == expected
    assert idx.level == level


def test_global_index_uses_floor_not_truncation():
    assert global_index(Pose2(-0.01, -4.0), ORIGIN, PYR, 4).as_array().tolist() == [-1, -1]


def test_heading_normalized():
    assert Pose2(0, 0, 3 * math.pi).heading == pytest.approx(math.pi)
    assert normalize_angle(-math.pi) == pytest.approx(math.pi)
    assert -math.pi < normalize_angle(7.0) <= math.pi


@settings(max_examples=200, deadline=None)
@given(st.floats(-500, 500), st.floats(-500, 500), st.integers(-50, 50), st.integers(-50, 50),
       st.integers(1, 4))
def test_global_index_translation_consistent(e, n, ke, kn, level):
    s = PYR.cell_size(level)
    # float addition cannot hit a boundary exactly; keep clear of the rounding band
    for q in (e / 0.15, n / 0.15):
        assume(abs(q - round(q)) > 1e-6)
    base = global_index(Pose2(e, n), ORIGIN, PYR, level).as_array()
    moved = global_index(Pose2(e + s * ke, n + s * kn), ORIGIN, PYR, level).as_array()
    assert np.array_equal(moved, base + [ke, kn])


@settings(max_examples=200, deadline=None)
@given(st.floats(-500, 500), st.floats(-500, 500), st.integers(1, 3))
def test_global_index_levels_nest(e, n, level):
    fine = global_index(Pose2(e, n), ORIGIN, PYR, level).as_array()
    coarse = global_index(Pose2(e, n), ORIGIN, PYR, level + 1).as_array()
    assert np.array_equal(coarse, np.floor_divide(fine, 3))


def _grid(w=10, h=10, c=1, cs=0.15, origin=(0.0, 0.0)):
    data = np.arange(w * h * c, dtype=np.float32).reshape(h, w, c)
    return GridMap(data, cs, origin)


def test_gridmap_is_read_only_and_validated():
    g = _grid()
    with pytest.raises(ValueError):
        g.data[0, 0, 0] = 1
    with pytest.raises(ContractError):
        GridMap(np.zeros((0, 3)), 0.15)
    with pytest.raises(ContractError):
        GridMap(np.zeros((3, 3)), 0.0)
    assert GridMap(np.zeros((2, 3)), 0.1).channels == 1


def test_crop_identity_and_origin():
    g = _grid()
    assert crop(g, 0, 0, 10, 10) == g
    c = crop(g, 2, 3, 4, 4)
    assert (c.width, c.height) == (4, 4)
    assert c.origin == pytest.approx((0.30, 0.45))
    assert np.array_equal(c.data, g.data[3:7, 2:6])


def test_crop_out_of_bounds():
    with pytest.raises(GridRangeError):
        crop(_grid(), 8, 8, 4, 4)


def test_place_examples():
    g = GridMap(np.ones((3, 3)), 0.15, (1.0, 2.0))
    p = place(5, 5, g, (1, 1), 0.5)
    ring = np.ones((5, 5), bool)
    ring[1:4, 1:4] = False
    assert np.all(p.data[..., 0][ring] == 0.5)
    assert np.all(p.data[1:4, 1:4] == 1.0)
    assert p.origin == pytest.approx((0.85, 1.85))
    assert place(3, 3, g, (0, 0), 7.0) == g
    with pytest.raises(GridRangeError):
        place(4, 4, g, (2, 2), 0.0)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 5), st.integers(0, 5))
def test_crop_after_place_is_identity(w, h, ox, oy):
    g = _grid(w, h, 2, origin=(0.3, -0.6))
    p = place(w + 5, h + 5, g, (ox, oy))
    back = crop(p, ox, oy, w, h)
    assert np.array_equal(back.data, g.data)
    assert back.origin == pytest.approx(g.origin)


def test_dgm1_roundtrip_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    g = GridMap(rng.random((7, 5, 3)).astype(np.float32), 0.125, (-12.345678901234, 9.87))
    buf = dgm1_bytes(g)
    assert buf[:4] == b"DGM1"
    assert len(buf) == 4 + 12 + 4 + 16 + 4 * 7 * 5 * 3
    back = dgm1_from_bytes(buf)
    assert back == g
    assert dgm1_bytes(back) == buf
    write_dgm1(tmp_path / "g.dgm1", g)
    assert (tmp_path / "g.dgm1").read_bytes() == buf
    assert read_dgm1(tmp_path / "g.dgm1") == g


def test_dgm1_layout_is_row_major_channel_last():
    data = np.arange(2 * 3 * 2, dtype=np.float32).reshape(2, 3, 2)
    buf = dgm1_bytes(GridMap(data, 0.5))
    payload = np.frombuffer(buf[36:], dtype="<f4")
    assert payload.tolist() == list(range(12))


def test_dgm1_rejects_corruption(tmp_path):
    buf = dgm1_bytes(_grid())
    with pytest.raises(DataError):
        dgm1_from_bytes(b"XXXX" + buf[4:])
    with pytest.raises(DataError):
        dgm1_from_bytes(buf[:-4])
    with pytest.raises(DataError):
        dgm1_from_bytes(buf[:10])
    with pytest.raises(DataError):
        read_dgm1(tmp_path / "missing.dgm1")


def test_ego_window_origin_snaps_to_lattice():
    o = ego_window_origin(Pose2(1.0, 2.0), ORIGIN, 80)
    # ego cell (6, 13) sits at column/row 40
    assert o == pytest.approx(((6 - 40) * 0.15, (13 - 40) * 0.15))
