import numpy as np
import pytest
from hypothesis import given, strategies as st

from acgslam.ndt import _candidates, build_ndt_grid, detect_corners, load_points, main_eigenvector, merge_corners, Corner

from helpers import l_shape, wall


def test_empty_grid():
    g = build_ndt_grid(np.zeros((0, 2)), 0.5)
    assert len(g) == 0
    assert detect_corners(g) == []


def test_bad_cell_size():
    with pytest.raises(ValueError):
        build_ndt_grid([[0, 0]], 0.0)


def test_collinear_points_one_cell():
    pts = np.column_stack([np.linspace(0.1, 0.4, 10), np.full(10, 0.2)])
    g = build_ndt_grid(pts, 0.5)
    assert len(g) == 1
    cell = next(iter(g.cells.values()))
    np.testing.assert_allclose(np.abs(cell.main_axis), [1, 0], atol=1e-9)
    assert np.all(np.linalg.eigvalsh(cell.cov) > 0)


def test_min_points_threshold():
    g = build_ndt_grid([[0.1, 0.1], [0.2, 0.2], [0.7, 0.1], [0.8, 0.2]], 0.5)
    assert len(g) == 0


def test_wall_three_cells_oracle():
    rng = np.random.default_rng(1)
    x = rng.uniform(0, 3, 100)
    pts = np.column_stack([x, 0.5 + rng.normal(0, 0.01, 100)])
    g = build_ndt_grid(pts, 1.0)
    assert len(g) == 3
    for key, cell in g.cells.items():
        own = pts[(np.floor(pts[:, 0]) == key[0]) & (np.floor(pts[:, 1]) == key[1])]
        np.testing.assert_allclose(cell.mean, own.mean(axis=0), atol=1e-12)
        w, v = np.linalg.eigh(np.cov(own, rowvar=False))
        ref = v[:, 1]
        assert abs(abs(cell.main_axis @ ref) - 1) < 1e-6
        assert np.degrees(np.arccos(abs(cell.main_axis[0]))) < 5


def test_main_eigenvector_sign():
    e = main_eigenvector(np.array([[1.0, 0.0], [0.0, 4.0]]))
    np.testing.assert_allclose(e, [0, 1])
    e = main_eigenvector(np.array([[2.0, -1.0], [-1.0, 2.0]]))
    assert e[0] > 0


def test_straight_wall_no_corner():
    g = build_ndt_grid(wall((0.01, 0.2), (5, 0.2), 200), 0.5)
    assert detect_corners(g) == []


def test_l_corner():
    g = build_ndt_grid(l_shape(), 0.5)
    cs = detect_corners(g, 2)
    assert len(cs) == 1
    assert np.linalg.norm(cs[0].position) < 0.75
    assert 0 <= cs[0].strength <= 10


def test_gap_case_needs_neighbourhood_two():
    # the cells around the corner are left empty: only cells two away carry the walls
    pts = l_shape(gap=((-1, -1), (1.0, 1.0)))
    g = build_ndt_grid(pts, 0.5)
    assert not {(0, 0), (1, 0), (0, 1), (1, 1)} & set(g.cells)
    assert detect_corners(g, 1) == []
    cs = detect_corners(g, 2)
    assert len(cs) == 1
    assert np.linalg.norm(cs[0].position) < 0.75


def test_rays_meet_at_position():
    g = build_ndt_grid(l_shape(), 0.5)
    for c in detect_corners(g, 2):
        for p, d in c.rays:
            v = c.position - p
            assert abs(v[0] * d[1] - v[1] * d[0]) < 1e-9


def test_bad_neighbourhood():
    with pytest.raises(ValueError):
        detect_corners(build_ndt_grid(l_shape(), 0.5), 0)


def test_merge_reports_member():
    cs = [Corner(np.array([0.0, 0.0]), 1.0), Corner(np.array([0.1, 0.0]), 2.0), Corner(np.array([5.0, 5.0]), 0.0)]
    merged = merge_corners(cs, 0.5)
    assert len(merged) == 2
    assert any(np.allclose(m.position, [0.0, 0.0]) or np.allclose(m.position, [0.1, 0.0]) for m in merged)


@given(st.integers(0, 2**31 - 1))
def test_reorder_invariance(seed):
    rng = np.random.default_rng(seed)
    pts = l_shape() + rng.normal(0, 0.005, (120, 2))
    perm = rng.permutation(len(pts))
    a = detect_corners(build_ndt_grid(pts, 0.5))
    b = detect_corners(build_ndt_grid(pts[perm], 0.5))
    assert len(a) == len(b)
    for x, y in zip(a, b):
        np.testing.assert_allclose(x.position, y.position, atol=1e-6)


@given(st.integers(0, 2**31 - 1), st.integers(2, 3))
def test_neighbourhood_monotone(seed, n):
    rng = np.random.default_rng(seed)
    # a small room outline with clutter
    pts = np.vstack([wall((0, 0), (4, 0), 80), wall((4, 0), (4, 3), 60), wall((4, 3), (0, 3), 80),
                     wall((0, 3), (0, 0), 60), rng.uniform(0, 4, (30, 2))])
    pts = pts + rng.normal(0, 0.01, pts.shape)
    g = build_ndt_grid(pts, 0.5)
    raw_small = {tuple(c.position) for c in _candidates(g, n - 1)}
    raw_big = {tuple(c.position) for c in _candidates(g, n)}
    assert raw_small <= raw_big
    small = detect_corners(g, n - 1)
    big = detect_corners(g, n)
    for c in small:
        # single-linkage merging may report another member of a grown group
        assert min(np.linalg.norm(c.position - d.position) for d in big) <= 2 * g.cell_size


def test_load_points(tmp_path):
    f = tmp_path / "pts.txt"
    f.write_text("# scan\n1 2\n\n3.5 -4 # inline\n")
    np.testing.assert_allclose(load_points(f), [[1, 2], [3.5, -4]])
    f.write_text("1 2 3\n")
    with pytest.raises(ValueError, match="pts.txt:1"):
        load_points(f)
