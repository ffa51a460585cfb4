import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from acgslam.geometry import Pose2
from acgslam.graph import AcgGraph
from acgslam.simworld import (BUILTIN, NoiseModel, Opening, Room, ScenarioError, build_scenario, deform,
                              deform_points, expand_waypoints, landmark_correspondence, load_scenario,
                              load_scenario_spec, make_world, outlier_fraction, raycast, simulate)

BOX = [Room("a", 0, 0, 4, 3)]


def _on_some_wall(pts, walls, tol):
    a, b = walls[:, 0], walls[:, 1]
    ab = b - a
    out = []
    for p in pts:
        t = np.clip(np.einsum("wi,wi->w", p - a, ab) / np.einsum("wi,wi->w", ab, ab), 0, 1)
        out.append(np.min(np.linalg.norm(a + t[:, None] * ab - p, axis=1)))
    return np.max(out) <= tol


def test_single_room_world():
    w = make_world(BOX)
    assert len(w.true_corners) == 4
    g = w.wall_graph()
    assert len(g.nodes) == 4 and len(g.edges) == 4


def test_door_adds_jambs():
    rooms = [Room("a", 0, 0, 4, 4), Room("b", 4, 0, 8, 4)]
    w = make_world(rooms, [Opening((4, 2), 1.0)])
    jambs = {(4.0, 1.5), (4.0, 2.5)}
    assert jambs <= {tuple(np.round(c, 9)) for c in w.true_corners}


def test_deform_identity(rng):
    rooms = [Room("a", 0, 0, 4, 4), Room("b", 4, 0, 8, 4)]
    w = make_world(rooms)
    d = deform(w, {"a": (1.0, 1.0), "b": (1.0, 1.0)})
    np.testing.assert_allclose(d.graph.nodes, d.undeformed, atol=1e-12)
    pts = rng.uniform(-5, 10, (50, 2))
    np.testing.assert_array_equal(deform_points(pts, rooms, {}), pts)


def test_deform_single_room():
    w = make_world([Room("r", 0, 0, 2, 2)])
    d = deform(w, {"r": (2.0, 1.0)})
    got = {tuple(np.round(p, 9)) for p in d.graph.nodes}
    assert got == {(-1.0, 0.0), (3.0, 0.0), (3.0, 2.0), (-1.0, 2.0)}


def test_deform_shared_corner_averages():
    rooms = [Room("a", 0, 0, 2, 2), Room("b", 2, 0, 4, 2)]
    out = deform_points(np.array([[2.0, 0.0]]), rooms, {"a": (2.0, 1.0), "b": (1.0, 1.0)})
    np.testing.assert_allclose(out[0], [2.5, 0.0])


def test_deform_rejects_bad_scale():
    with pytest.raises(ScenarioError):
        deform(make_world(BOX), {"a": (0.0, 1.0)})


def test_raycast_hits_walls():
    w = make_world(BOX)
    pts, hit = raycast(w.walls, Pose2(1.0, 1.0, 0.3))
    assert hit.all()
    assert _on_some_wall(pts, w.walls, 1e-9)
    assert pts[0] == pytest.approx([4.0, 1.0 + 3.0 * math.tan(0.3)])


def test_simulate_zero_noise_points_on_walls():
    w = make_world(BOX)
    traj = [Pose2(1, 1, 0), Pose2(2, 1.5, 0.5), Pose2(3, 2, 1.0)]
    steps = simulate(w, traj, NoiseModel.zero(), seed=0)
    assert steps[0].odometry_delta == Pose2.identity()
    for k, (s, p) in enumerate(zip(steps, traj)):
        assert _on_some_wall(p.transform_point(s.scan_points), w.walls, 1e-9)
        if k:
            assert s.odometry_delta.as_array() == pytest.approx(traj[k - 1].between(p).as_array(), abs=1e-12)


def test_simulate_deterministic():
    w = make_world(BOX)
    traj = [Pose2(1, 1, 0), Pose2(2, 1.5, 0.5)]
    noise = NoiseModel(0.05, 0.01, 0.02)
    a = simulate(w, traj, noise, seed=7)
    b = simulate(w, traj, noise, seed=7)
    c = simulate(w, traj, noise, seed=8)
    for x, y in zip(a, b):
        assert np.array_equal(x.scan_points, y.scan_points)
        assert x.odometry_delta == y.odometry_delta
    assert not np.array_equal(a[1].scan_points, c[1].scan_points)


def test_scan_noise_std():
    w = make_world([Room("a", 0, 0, 10, 10)])
    traj = [Pose2(5, 5, 0.0)] * 30
    clean = simulate(w, traj[:1], NoiseModel.zero(), 0)[0].scan_points
    steps = simulate(w, traj, NoiseModel(scan=0.05), 3)
    res = np.concatenate([s.scan_points - clean for s in steps]).ravel()
    assert res.size >= 10_000
    assert 0.04 <= res.std() <= 0.06


def test_odometry_bias_is_systematic():
    w = make_world([Room("a", 0, 0, 20, 4)])
    traj = expand_waypoints([[1, 2], [19, 2]], 2.0)
    steps = simulate(w, traj, NoiseModel(odom_bias=(0.0, 0.05, 0.0)), 0)
    for s in steps[1:]:
        assert s.odometry_delta.y == pytest.approx(0.1, abs=1e-9)


def test_pose_inside_wall_names_step():
    w = make_world(BOX)
    with pytest.raises(ScenarioError, match="step 1"):
        simulate(w, [Pose2(1, 1, 0), Pose2(4.0, 1.0, 0.0)], NoiseModel.zero(), 0)
    with pytest.raises(ScenarioError, match="step 1"):
        simulate(w, [Pose2(1, 1, 0), Pose2(6.0, 1.0, 0.0)], NoiseModel.zero(), 0)


def test_noise_validation():
    with pytest.raises(ScenarioError):
        NoiseModel(scan=-1)
    with pytest.raises(ScenarioError):
        NoiseModel(corner_dropout=2)


@given(st.floats(0.5, 3.0), st.lists(st.tuples(st.floats(-10, 10), st.floats(-10, 10)), min_size=2, max_size=5))
@settings(max_examples=40)
def test_expand_waypoints_spacing(step, wps):
    wp = np.array(wps)
    if np.any(np.linalg.norm(np.diff(wp, axis=0), axis=1) < 1e-3):
        return
    poses = expand_waypoints(wp, step)
    assert poses[0].translation == pytest.approx(wp[0])
    gaps = [np.linalg.norm(b.translation - a.translation) for a, b in zip(poses[:-1], poses[1:])]
    assert all(g <= step + 1e-9 for g in gaps)


def _graph_with_links(scenario, links):
    """One pose at the first trajectory pose observing every true corner."""
    g = AcgGraph()
    pid = g.add_pose_node(scenario.trajectory[0])
    prior_ids = g.add_prior(scenario.prior.graph)
    index = {c: i for i, c in scenario.prior.corresponded()}
    lids = [g.add_landmark(pid, scenario.trajectory[0].inverse_transform_point(c))
            for c in scenario.world.true_corners]
    for lm_corner, prior_corner in links:
        g.add_link(lids[lm_corner], prior_ids[index[prior_corner]])
    return g, prior_ids, {pid: scenario.trajectory[0]}


def test_outlier_fraction_extremes():
    sc = load_scenario("corridor-door")
    n = len(sc.world.true_corners)
    good = [(c, c) for c in range(n)]
    g, ids, truth = _graph_with_links(sc, good)
    assert outlier_fraction(g, sc.prior, ids, truth, sc.world) == 0.0
    bad = [(c, (c + 1) % n) for c in range(n)]
    g, ids, truth = _graph_with_links(sc, bad)
    assert outlier_fraction(g, sc.prior, ids, truth, sc.world) == 1.0
    g, ids, truth = _graph_with_links(sc, good[:3] + bad[:1])
    assert outlier_fraction(g, sc.prior, ids, truth, sc.world) == 0.25
    corr = landmark_correspondence(g, truth, sc.world)
    assert [corr[k] for k in sorted(corr)] == list(range(n))


def test_outlier_fraction_needs_links():
    sc = load_scenario("corridor-door")
    g, ids, truth = _graph_with_links(sc, [])
    with pytest.raises(ScenarioError):
        outlier_fraction(g, sc.prior, ids, truth, sc.world)


@pytest.mark.parametrize("name", BUILTIN)
def test_builtin_scenarios_load(name):
    sc = load_scenario(name)
    assert len(sc.trajectory) >= 5
    assert len(sc.anchors) == 2
    assert len(sc.prior.graph.nodes) > 4
    # the trajectory is collision free
    simulate(sc.world, sc.trajectory, sc.noise, 0)


def test_scenario_seed_changes_deformation():
    spec = load_scenario_spec("standard")
    a, b = build_scenario(spec, 1), build_scenario(spec, 2)
    assert not np.allclose(a.prior.graph.nodes, b.prior.graph.nodes)
    c = build_scenario(spec, 1)
    assert np.array_equal(a.prior.graph.nodes, c.prior.graph.nodes)
    assert np.array_equal(a.world.walls, c.world.walls)


def test_clutter_stays_off_the_map():
    sc = load_scenario("standard")
    # boxes are real walls but never prior nodes
    assert len(sc.world.walls) > len(sc.prior_world.walls)
    assert all(c is not None for c in sc.prior.correspondence)


def test_closed_door_drawn_open_on_map():
    sc = load_scenario("corridor-door")
    jambs = [i for i, c in enumerate(sc.prior.correspondence) if c is None]
    assert len(jambs) == 2


def test_malformed_scenarios(tmp_path):
    with pytest.raises(ScenarioError):
        load_scenario_spec(tmp_path / "missing.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ScenarioError):
        load_scenario_spec(bad)
    with pytest.raises(ScenarioError):
        build_scenario({"rooms": []})
    with pytest.raises(ScenarioError, match="not a prior corner"):
        build_scenario({"rooms": [{"label": "a", "rect": [0, 0, 4, 4]}], "waypoints": [[1, 1]],
                        "anchors": [[0.5, 0.5], [4, 4]]})
    with pytest.raises(ScenarioError, match="empty rectangle"):
        build_scenario({"rooms": [{"label": "a", "rect": [0, 0, 0, 4]}], "waypoints": [[1, 1]]})
