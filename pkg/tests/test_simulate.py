import math

import numpy as np
import pytest
from scipy.stats import ks_2samp

from innovest.model import ObservationModel
from innovest.registry import default_theta, test_model as registered
from innovest.simulate import (SimProtocol, make_observations, read_series_csv, simulate_path,
                               simulate_replication, substream, write_series_csv)

from test_llmoments import linear_model


def test_constant_path_without_dynamics():
    m = linear_model(np.zeros((2, 2)), np.zeros((2, 1)))
    for scheme in ("euler", "ll"):
        _, path = simulate_path(m, [0.0], [1.0, -2.0], SimProtocol(scheme, T=2, delta=1), substream(0, 0, 0))
        assert np.all(path == [1.0, -2.0])


def test_euler_ode_limit():
    m = linear_model([[-1.0]], [[0.0]])
    prot = SimProtocol("euler", fine_dt=1e-4, T=1, delta=1)
    _, path = simulate_path(m, [0.0], [1.0], prot, substream(0, 0, 0), t_end=1.0)
    assert path[-1, 0] == pytest.approx(math.exp(-1), abs=1e-3)


def test_ex1_monte_carlo_mean():
    model, _, init = registered("ex1")
    th = default_theta("ex1")
    prot = SimProtocol("euler", fine_dt=1e-2, T=2, delta=1)
    ends = np.array([simulate_path(model, th, init.x0_mean, prot, substream(1, i, 0), t0=init.t0)[1][-1, 0]
                     for i in range(2000)])
    t1 = init.t0 + 1.0
    exact = math.exp(th[0] * (t1 ** 2 - init.t0 ** 2) / 2)
    assert abs(ends.mean() - exact) < 3 * ends.std() / math.sqrt(ends.size)


def test_same_seed_bit_identical():
    th = default_theta("ex3")
    prot = SimProtocol("ll", T=5, delta=1, seed=9)
    a, xa = simulate_replication("ex3", th, prot, 2)
    b, xb = simulate_replication("ex3", th, prot, 2)
    assert np.array_equal(a.z, b.z) and np.array_equal(xa, xb)
    c, _ = simulate_replication("ex3", th, prot, 3)
    assert not np.array_equal(a.z, c.z)


def test_noise_stream_independent_of_path():
    th = default_theta("ex1")
    a, xa = simulate_replication("ex1", th, SimProtocol(T=10, delta=1, seed=4, Pi=1e-4), 0)
    b, xb = simulate_replication("ex1", th, SimProtocol(T=10, delta=1, seed=4, Pi=1e-2), 0)
    assert np.array_equal(xa, xb)
    assert not np.array_equal(a.z, b.z)


def test_noise_free_observations():
    th = default_theta("ex3")
    s, x = simulate_replication("ex3", th, SimProtocol("ll", T=5, delta=1, Pi=0.0), 0)
    np.testing.assert_array_equal(s.z[:, 0], x[:, 0])


def test_observation_grid():
    s, _ = simulate_replication("ex1", default_theta("ex1"), SimProtocol(T=10, delta=1), 0)
    assert s.M == 10
    np.testing.assert_allclose(s.times, 0.5 + np.arange(10), atol=1e-12)


def test_observation_noise_variance():
    times = np.arange(10_001) * 1e-3
    path = np.zeros((times.size, 1))
    obs = ObservationModel.constant([[1.0]], [[0.3]])
    prot = SimProtocol(fine_dt=1e-3, T=10.001, delta=1e-3)
    s = make_observations(times, path, prot, obs, substream(2, 0, 1))
    assert s.M == 10_001
    assert s.z.var() == pytest.approx(0.3, rel=0.05)


def test_euler_and_ll_agree_in_distribution():
    model, _, init = registered("ex2")
    th = default_theta("ex2")
    ends = {}
    for scheme in ("euler", "ll"):
        prot = SimProtocol(scheme, fine_dt=0.05, T=1.0, delta=1.0)
        ends[scheme] = [simulate_path(model, th, init.x0_mean, prot, substream(6, i, 0 if scheme == "euler" else 7),
                                      t0=init.t0, t_end=init.t0 + 1.0)[1][-1, 0] for i in range(1000)]
    assert ks_2samp(ends["euler"], ends["ll"]).pvalue > 0.01


def test_series_csv_round_trip(tmp_path):
    s, _ = simulate_replication("ex3", default_theta("ex3"), SimProtocol("ll", T=4, delta=1), 0)
    write_series_csv(tmp_path / "z.csv", s)
    back = read_series_csv(tmp_path / "z.csv")
    assert np.array_equal(back.z, s.z) and np.array_equal(back.times, s.times)
    assert (tmp_path / "z.csv").read_text().startswith("t,z1\n")


def test_protocol_validation():
    with pytest.raises(ValueError):
        SimProtocol("milstein")
    with pytest.raises(ValueError):
        SimProtocol(fine_dt=2.0, delta=1.0)
    with pytest.raises(ValueError):
        SimProtocol(T=0.5, delta=1.0)
