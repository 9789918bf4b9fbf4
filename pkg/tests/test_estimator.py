import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from innovest.estimator import (EstimationError, Mode, OptimizerSettings, estimate, estimator_suite,
                                innovation_nll, minimize_box, summarize)
from innovest.filter import FilterConfig
from innovest.llmoments import MomentState, predict_step
from innovest.model import InitialCondition, ObservationModel, ObservationSeries, TimeGrid
from innovest.registry import default_theta, test_model as registered
from innovest.simulate import SimProtocol, simulate_path, simulate_replication, substream

from test_llmoments import linear_model

LOG_2PI = math.log(2 * math.pi)


def two_point_nll(V0, Pi, z1):
    model = linear_model([[0.0]], [[0.0]])
    init = InitialCondition([0.0], [[V0]])
    data = ObservationSeries(TimeGrid([0.0, 1.0]), [0.0, z1])
    return innovation_nll(model, ObservationModel.constant([[1.0]], [[Pi]]), data, init, [0.5])


def test_nll_single_vanishing_term():
    ev = two_point_nll(0.5, 0.5, 0.0)
    assert ev.value == pytest.approx(LOG_2PI, abs=1e-12)
    assert ev.value == pytest.approx(1.837877, abs=1e-6)


def test_nll_arithmetic():
    ev = two_point_nll(1.5, 0.5, 1.0)
    assert ev.value == pytest.approx(LOG_2PI + math.log(2.0) + 0.5, abs=1e-12)
    assert ev.per_term == [pytest.approx((math.log(2.0), 0.5))]


def test_nll_filter_failure_is_inf():
    ev = two_point_nll(0.0, -1.0, 0.0)
    assert ev.value == math.inf and ev.status == "filter-failed"


def test_nll_exact_vs_fine_uniform():
    th = default_theta("ex1")
    data = simulate_replication("ex1", th, SimProtocol(T=10, delta=1, seed=3), 0)[0]
    m, o, init = registered("ex1")
    a = innovation_nll(m, o, data, init, th, FilterConfig.exact()).value
    b = innovation_nll(m, o, data, init, th, FilterConfig.uniform(1e-3)).value
    assert abs(a - b) <= 1e-2


def test_nll_deterministic():
    th = default_theta("ex3")
    data = simulate_replication("ex3", th, SimProtocol("ll", T=5, delta=1, seed=3), 0)[0]
    m, o, init = registered("ex3")
    vals = {innovation_nll(m, o, data, init, [0.4, 0.8], FilterConfig.uniform(0.25)).value for _ in range(3)}
    assert len(vals) == 1


def bowl(center, scale):
    center = np.asarray(center)
    return lambda x: float(np.sum(scale * (np.asarray(x) - center) ** 2))


@given(st.floats(-0.8, 0.8), st.floats(0.2, 1.8))
def test_quadratic_surrogate_recovered(a, b):
    x, fx, nit, nfev, conv = minimize_box(bowl([a, b], np.array([1.0, 3.0])), [0.1, 1.0],
                                          [(-1.0, 1.0), (0.0, 2.0)], OptimizerSettings(xtol=1e-9, ftol=1e-14))
    assert conv
    np.testing.assert_allclose(x, [a, b], atol=1e-6)


def test_argmin_invariances():
    fn = bowl([0.3, -0.2], np.array([2.0, 1.0]))
    base = minimize_box(fn, [0.0, 0.0], [(-1.0, 1.0), (-1.0, 1.0)])[0]
    shifted = minimize_box(lambda x: fn(x) + 123.0, [0.0, 0.0], [(-1.0, 1.0), (-1.0, 1.0)])[0]
    flipped = minimize_box(fn, [0.0, 0.0], [(1.0, -1.0), (1.0, -1.0)])[0]
    np.testing.assert_array_equal(base, flipped)
    np.testing.assert_allclose(shifted, base, atol=1e-6)


def test_minimum_on_boundary():
    x = minimize_box(bowl([2.0, 0.0], 1.0), [0.0, 0.5], [(-1.0, 1.0), (-1.0, 1.0)])[0]
    np.testing.assert_allclose(x, [1.0, 0.0], atol=1e-6)


def test_all_infinite_simplex_raises():
    with pytest.raises(EstimationError):
        minimize_box(lambda x: math.inf, [0.0, 0.0], [(-1.0, 1.0), (-1.0, 1.0)])


def test_estimate_rejects_start_outside_box():
    m, o, init = registered("ex1")
    data = ObservationSeries(TimeGrid([0.5, 1.5]), [1.0, 1.0])
    with pytest.raises(ValueError):
        estimate(m, o, data, init, [5.0, 0.1])


def qml_pairs(thetas=([0.5, 0.75], [0.2, 1.1]), h=0.25):
    """(innovation NLL, directly assembled quasi-likelihood) on complete noise-free ex3 data."""
    model, _, init = registered("ex3")
    prot = SimProtocol("ll", fine_dt=1e-3, T=10, delta=1)
    times, path = simulate_path(model, default_theta("ex3"), init.x0_mean, prot, substream(11, 0, 0), t0=init.t0)
    idx = np.rint((prot.obs_times(init.t0) - init.t0) / prot.fine_dt).astype(int)
    t_obs, z = times[idx], path[idx]
    obs = ObservationModel.constant(np.eye(2), np.zeros((2, 2)))
    data = ObservationSeries(TimeGrid(t_obs), z)
    init = InitialCondition(z[0], np.outer(z[0], z[0]), t0=t_obs[0])
    n = int(round(1 / h))
    out = []
    for theta in thetas:
        innov = innovation_nll(model, obs, data, init, theta, FilterConfig.uniform(h)).value
        qml = 0.0
        for k in range(1, len(t_obs)):
            s = MomentState(t_obs[k - 1], z[k - 1], np.outer(z[k - 1], z[k - 1]))
            for j in range(n):
                s = predict_step(model, 1, s, t_obs[k - 1] + h * (j + 1) if j < n - 1 else t_obs[k], theta)
            V = s.V
            r = z[k] - s.y
            # same (M-1) ln(2 pi) constant as the innovation NLL
            qml += math.log(2 * math.pi) + math.log(np.linalg.det(V)) + r @ np.linalg.solve(V, r)
        out.append((innov, qml))
    return out


def test_qml_reduction_ex3():
    """C = I, Pi = 0: the innovation NLL is the quasi-likelihood of the complete path."""
    for innov, qml in qml_pairs():
        assert innov == pytest.approx(qml, rel=1e-10)


@pytest.fixture(scope="module")
def ex1_batch():
    th = default_theta("ex1")
    prot = SimProtocol(T=10, delta=1, seed=8)
    return [simulate_replication("ex1", th, prot, i)[0] for i in range(3)]


def test_suite_single_replication(ex1_batch):
    recs, summ = estimator_suite("ex1", ex1_batch[:1], [Mode("exact"), Mode("conventional")])
    assert len(recs) == 2
    for row in summ:
        if row["table"] == "mean":
            rec = next(r for r in recs if r["mode"] == row["mode"])
            assert row["value"] == rec[row["param"]] and row["std"] == 0.0


def test_suite_workers_do_not_change_records(ex1_batch):
    modes = [Mode("conventional"), Mode("uniform", 0.5)]
    a, _ = estimator_suite("ex1", ex1_batch, modes, workers=1)
    b, _ = estimator_suite("ex1", ex1_batch, modes, workers=2)
    assert a == b


def test_summarize_from_records():
    recs = [dict(replication=i, mode=m, h=h, alpha=v, status="ok")
            for i, (e, c) in enumerate([(1.0, 1.5), (2.0, 2.0), (3.0, 2.0)])
            for m, h, v in (("exact", "", e), ("conventional", "", c))]
    rows = {(r["table"], r["mode"]): r for r in summarize(recs, ("alpha",), [2.5])}
    assert rows[("mean", "exact")]["value"] == pytest.approx(2.0)
    assert rows[("bias", "exact")]["value"] == pytest.approx(0.5)
    assert rows[("error", "conventional")]["value"] == pytest.approx((0.5 + 0.0 + 1.0) / 3)
    assert rows[("diff_avg", "conventional")]["value"] == pytest.approx(2.0 - 5.5 / 3)


def test_mode_labels():
    assert Mode("uniform", 0.125).label == "uniform_h0.125"
    assert Mode("conventional").filter_config(FilterConfig(beta=2)).beta == 1
    with pytest.raises(ValueError):
        Mode("uniform")
    with pytest.raises(ValueError):
        Mode("bogus")
