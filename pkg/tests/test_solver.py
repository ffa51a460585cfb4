import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, strategies as st

from acgslam.geometry import Pose2
from acgslam.graph import AcgGraph, GraphError
from acgslam.solver import (KernelSpec, Problem, Schedule, dcs_scale, default_schedule, gm_rho,
                            gm_weight, huber_rho, huber_weight, optimize)

from helpers import consistent_graph, max_jacobian_error


# -- kernels ---------------------------------------------------------------

def test_huber_examples():
    assert huber_rho(0, 1) == 0
    assert huber_rho(1, 1) == 0.5
    assert huber_rho(3, 1) == 2.5
    with pytest.raises(ValueError):
        huber_rho(1, 0)


def test_dcs_examples():
    assert dcs_scale(0, 1) == 1
    assert dcs_scale(2.5, 2.5) == 1
    assert dcs_scale(3, 1) == 0.5
    with pytest.raises(ValueError):
        dcs_scale(1, 0)


def test_gm_examples():
    assert gm_weight(0, 1) == 1
    assert gm_weight(1, 1) == 0.25
    with pytest.raises(ValueError):
        gm_weight(1, -1)


def _huber_ref(x, k):
    x, k = mpmath.mpf(x), mpmath.mpf(k)
    return x * x / 2 if abs(x) <= k else k * (abs(x) - k / 2)


def _dcs_ref(chi2, phi):
    return min(mpmath.mpf(1), 2 * mpmath.mpf(phi) / (mpmath.mpf(phi) + mpmath.mpf(chi2)))


def _gm_ref(x, c):
    c2 = mpmath.mpf(c) ** 2
    return c2 / (c2 + mpmath.mpf(x) ** 2) ** 2


def test_closed_forms_sampled(rng):
    xs = rng.uniform(-6, 6, 20)
    ks = rng.uniform(0.2, 3, 20)
    for x, k in zip(xs, ks):
        assert abs(float(huber_rho(x, k)) - float(_huber_ref(x, k))) <= 1e-12
        assert abs(float(dcs_scale(x * x, k)) - float(_dcs_ref(x * x, k))) <= 1e-12
        assert abs(float(gm_weight(x, k)) - float(_gm_ref(x, k))) <= 1e-12


@given(st.floats(0, 1e6), st.floats(1e-3, 1e3))
def test_dcs_never_increases(chi2, phi):
    s = float(dcs_scale(chi2, phi))
    assert 0 < s <= 1


@given(st.floats(0, 50), st.floats(0, 50), st.floats(0.1, 5))
def test_gm_monotone(a, b, c):
    lo, hi = sorted((a, b))
    assert gm_weight(hi, c) <= gm_weight(lo, c)


@given(st.floats(0.01, 20), st.floats(0.1, 5))
def test_irls_weight_is_rho_derivative(x, k):
    h = 1e-6
    for rho, w in ((huber_rho, huber_weight), (gm_rho, None)):
        d = (float(rho(x + h, k)) - float(rho(x - h, k))) / (2 * h)
        if w is not None:
            assert d == pytest.approx(x * float(w(x, k)), rel=1e-5, abs=1e-7)
        else:
            # psi(x)/x of the chosen rho equals c^4/(c^2+x^2)^2, i.e. gm_weight up to the factor c^2
            assert d / x == pytest.approx(k * k * float(gm_weight(x, k)), rel=1e-5)


def test_kernel_spec():
    with pytest.raises(ValueError):
        KernelSpec("cauchy")
    with pytest.raises(ValueError):
        KernelSpec("huber", 0)
    chi2 = np.array([0.0, 0.5, 4.0, 100.0])
    np.testing.assert_allclose(KernelSpec("huber").weight(chi2), [1, 1, 0.5, 0.1])
    np.testing.assert_allclose(KernelSpec("dcs").weight(chi2), np.minimum(1, 2 / (1 + chi2)) ** 2)
    np.testing.assert_allclose(KernelSpec("none").robust_chi2(chi2), chi2)


def test_schedule_parse():
    s = Schedule.parse("huber:10,dcs:20")
    assert s.total_iterations == 30
    assert str(s) == "huber:10,dcs:20"
    s = Schedule.parse("huber(2):40, dcs:4")
    assert s.stages[0][0] == KernelSpec("huber", 2.0)
    assert Schedule.parse("gm:3").stages[0][0].kind == "geman_mcclure"
    for bad in ("", "huber", "huber:0", "foo:3", "huber:x"):
        with pytest.raises(ValueError):
            Schedule.parse(bad)


# -- jacobians -----------------------------------------------------------------

def test_jacobians_finite_differences(rng):
    g, _ = consistent_graph(rng, noise=0.3)
    for k in list(g.poses):
        p = g.poses[k]
        g.poses[k] = Pose2(p.x, p.y, p.theta + rng.uniform(-2, 2))
    g.fixed.clear()  # every pose takes part in the check
    assert max_jacobian_error(Problem(g)) <= 1e-5


# -- optimisation ----------------------------------------------------------------

def _max_error(g, truth):
    errs = [np.linalg.norm(g.poses[k].translation - p.translation) for k, p in truth["poses"].items()]
    errs += [abs(math.remainder(g.poses[k].theta - p.theta, 2 * math.pi)) for k, p in truth["poses"].items()]
    errs += [np.linalg.norm(g.landmarks[k] - v) for k, v in truth["landmarks"].items()]
    errs += [np.linalg.norm(g.priors[k] - v) for k, v in truth["priors"].items()]
    return max(errs)


def test_zero_noise_exact(rng):
    g, truth = consistent_graph(rng, noise=0.2)
    trace = optimize(g, "none:15")
    assert trace[-1].mean_error < 1e-10
    assert _max_error(g, truth) < 1e-6


def test_default_trace_length(rng):
    g, _ = consistent_graph(rng, noise=0.1)
    trace = optimize(g)
    assert len(trace) == 30
    assert [r.stage for r in trace] == ["huber"] * 10 + ["dcs"] * 20
    assert [r.iteration for r in trace] == list(range(1, 31))
    assert trace.to_csv().splitlines()[0] == "iteration,stage,mean_error,max_correction"
    assert len(trace.stage_errors("dcs")) == 20
    assert default_schedule().total_iterations == 30


def test_chi2_non_increasing_tail(rng):
    g, _ = consistent_graph(rng, noise=0.1)
    # inconsistent prior edges make the optimum non-zero
    for e in g.prior_edges:
        e.measurement[:] = e.measurement * 1.1
    trace = optimize(g, "none:12")
    tail = [r.mean_error for r in trace][-5:]
    assert all(b <= a + 1e-12 for a, b in zip(tail[:-1], tail[1:]))


def test_gauge_invariance(rng):
    g, _ = consistent_graph(rng, noise=0.1)
    for e in g.prior_edges:
        e.measurement[:] = e.measurement * 0.9
    h = g.copy()
    shift = np.array([3.5, -7.25])
    for k, p in h.poses.items():
        h.poses[k] = Pose2(p.x + shift[0], p.y + shift[1], p.theta)
    for d in (h.landmarks, h.priors):
        for k in d:
            d[k] = d[k] + shift
    optimize(g, "huber:5,dcs:5")
    optimize(h, "huber:5,dcs:5")
    for k in g.poses:
        np.testing.assert_allclose(h.poses[k].translation - shift, g.poses[k].translation, atol=1e-9)
        assert abs(h.poses[k].theta - g.poses[k].theta) < 1e-9
    for k in g.priors:
        np.testing.assert_allclose(h.priors[k] - shift, g.priors[k], atol=1e-9)


def test_scope_all_reweights_odometry(rng):
    g, _ = consistent_graph(rng, noise=0.0)
    g.odometry_edges[3].measurement = Pose2(5.0, 0.0, 0.0)  # grossly wrong odometry
    a, b = g.copy(), g.copy()
    optimize(a, "dcs:10", "links+priors")
    optimize(b, "dcs:10", "all")
    pa = Problem(a)
    pb = Problem(b)
    # with kernels on every edge the bad odometry edge is down-weighted and left with a larger residual
    assert np.linalg.norm(pb.odometry_residuals()[3]) > np.linalg.norm(pa.odometry_residuals()[3])


def test_requires_gauge():
    g = AcgGraph()
    g.add_prior_node((0, 0))
    with pytest.raises(GraphError):
        optimize(g)
    with pytest.raises(ValueError):
        Problem(g, "odometry")


def test_unanchored_components_reported(rng):
    g, _ = consistent_graph(rng)
    lone = g.add_prior_node((50, 50))
    comps = Problem(g).components_without_anchor()
    assert [lone] in comps


def test_empty_problem_trace():
    g = AcgGraph()
    g.add_pose_node(Pose2())
    trace = optimize(g, "huber:2,dcs:3")
    assert len(trace) == 5 and all(r.mean_error == 0 for r in trace)


def test_deterministic(rng):
    g, _ = consistent_graph(rng, noise=0.2)
    a, b = g.copy(), g.copy()
    ta, tb = optimize(a), optimize(b)
    assert ta.to_csv() == tb.to_csv()
    for k in a.priors:
        assert np.array_equal(a.priors[k], b.priors[k])


@given(st.floats(0, 20), st.floats(0.1, 5))
def test_kernel_weight_matches_rho(x, c):
    # the IRLS weight is d(robust_chi2)/d(chi2); DCS scales the information directly instead
    chi2 = x * x
    lo, hi = max(chi2 - 1e-6, 0.0), chi2 + 1e-6
    for spec in (KernelSpec("huber", c), KernelSpec("geman_mcclure", c)):
        d = (float(spec.robust_chi2(np.array(hi))) - float(spec.robust_chi2(np.array(lo)))) / (hi - lo)
        assert float(spec.weight(np.array(chi2))) == pytest.approx(d, rel=1e-4, abs=1e-6)
    assert float(KernelSpec("geman_mcclure", c).weight(np.array(0.0))) == pytest.approx(1.0)
