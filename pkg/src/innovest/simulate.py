"""Synthetic data: fine-grid path simulation, subsampling, observation noise.

Random streams
--------------
A master ``seed`` yields independent substreams through
``SeedSequence(seed, spawn_key=(replication, purpose))`` with purpose 0 for
the Wiener increments and 1 for the observation noise. Replication ``i`` can
therefore be regenerated on its own, and changing the observation noise
never perturbs the latent path.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .model import ObservationModel, ObservationSeries, SdeModel, TimeGrid, as_theta
from .numerics import expm

PATH_STREAM = 0
OBS_STREAM = 1
SCHEMES = ("euler", "ll")


class SimulationError(RuntimeError):
    pass


@dataclass(frozen=True)
class SimProtocol:
    scheme: str = "euler"
    fine_dt: float = 1e-3
    T: float = 10.0
    delta: float = 1.0
    seed: int = 0
    replications: int = 20
    Pi: float | None = None  # overrides the model's observation noise variance

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ValueError(f"scheme must be one of {SCHEMES}, got {self.scheme!r}")
        if not (0 < self.fine_dt <= self.delta):
            raise ValueError("need 0 < fine_dt <= delta")
        if self.T < self.delta:
            raise ValueError("T must be at least delta")
        if self.replications < 1:
            raise ValueError("replications must be >= 1")
        if self.M * self.delta > self.T + self.fine_dt:
            raise ValueError("M * delta exceeds T")

    @property
    def M(self) -> int:
        return int(round(self.T / self.delta))

    def obs_times(self, t0: float) -> np.ndarray:
        return t0 + self.delta * np.arange(self.M)


def substream(seed: int, replication: int, purpose: int) -> np.random.Generator:
    ss = np.random.SeedSequence(int(seed), spawn_key=(int(replication), int(purpose)))
    return np.random.Generator(np.random.PCG64(ss))


def _sqrt_psd(S: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.cholesky(S)
    except np.linalg.LinAlgError:
        w, Q = np.linalg.eigh(0.5 * (S + S.T))
        return Q * np.sqrt(np.clip(w, 0.0, None))


def simulate_path(model: SdeModel, theta, x0, protocol: SimProtocol, rng: np.random.Generator,
                  t0: float = 0.0, t_end: float | None = None):
    """Simulate one path on the grid ``t0 + n * fine_dt``.

    ``euler`` is Euler-Maruyama. ``ll`` is the Local Linearization scheme: the
    drift is linearized in state and time at each node and integrated with an
    augmented matrix exponential, and the Gaussian increment has the
    covariance of the linearized equation with the diffusion frozen at the node.

    Returns ``(times, path)`` with ``path`` of shape (n_steps + 1, d).
    """
    theta = as_theta(theta)
    d, m = model.d, model.m
    dt = protocol.fine_dt
    if t_end is None:
        t_end = t0 + (protocol.M - 1) * protocol.delta
    n = int(round((t_end - t0) / dt))
    times = t0 + dt * np.arange(n + 1)
    path = np.empty((n + 1, d))
    x = np.atleast_1d(np.asarray(x0, dtype=float)).copy()
    path[0] = x
    if protocol.scheme == "euler":
        dw = rng.standard_normal((n, m)) * np.sqrt(dt)
        for i in range(n):
            t = times[i]
            x = x + model.drift(t, x, theta) * dt + model.diffusion(t, x, theta) @ dw[i]
            if not np.all(np.isfinite(x)):
                raise SimulationError(f"non-finite state at step {i + 1} (t={times[i + 1]})")
            path[i + 1] = x
        return times, path

    xi = rng.standard_normal((n, d))
    aug = np.zeros((d + 2, d + 2))
    aug[d, d + 1] = 1.0
    vl = np.zeros((2 * d, 2 * d))
    for i in range(n):
        t = times[i]
        A = model.drift_jac_x(t, x, theta)
        aug[:d, :d] = A
        aug[:d, d] = model.drift_dt(t, x, theta)
        aug[:d, d + 1] = model.drift(t, x, theta)
        drift_inc = expm(aug * dt)[:d, d + 1]
        G = model.diffusion(t, x, theta)
        vl[:d, :d] = -A
        vl[:d, d:] = G @ G.T
        vl[d:, d:] = A.T
        F = expm(vl * dt)
        cov = F[d:, d:].T @ F[:d, d:]
        x = x + drift_inc + _sqrt_psd(0.5 * (cov + cov.T)) @ xi[i]
        if not np.all(np.isfinite(x)):
            raise SimulationError(f"non-finite state at step {i + 1} (t={times[i + 1]})")
        path[i + 1] = x
    return times, path


def make_observations(times: np.ndarray, path: np.ndarray, protocol: SimProtocol,
                      obs: ObservationModel, rng: np.random.Generator) -> ObservationSeries:
    """Subsample the path every ``delta`` and add ``N(0, Pi_k)`` noise.

    Observation times are snapped to the nearest fine-grid node.
    """
    t0 = float(times[0])
    t_obs = protocol.obs_times(t0)
    idx = np.rint((t_obs - t0) / protocol.fine_dt).astype(int)
    if idx[-1] >= len(times):
        raise ValueError("path is shorter than the observation window")
    X = path[idx]
    z = X @ obs.C.T
    e = rng.standard_normal(z.shape)
    for k in range(len(idx)):
        Pi = np.atleast_2d(np.asarray(obs.Pi(k), dtype=float))
        if np.any(Pi):
            z[k] += _sqrt_psd(Pi) @ e[k]
    return ObservationSeries(TimeGrid(times[idx]), z)


def simulate_replication(model_id: str, theta, protocol: SimProtocol, replication: int):
    """Data set ``replication`` of a registered model: ``(ObservationSeries, latent states at t_k)``."""
    from .registry import default_scheme, test_model

    model, obs, init = test_model(model_id)
    if protocol.Pi is not None:
        obs = ObservationModel.constant(obs.C, np.eye(obs.r) * protocol.Pi)
    rng_path = substream(protocol.seed, replication, PATH_STREAM)
    rng_obs = substream(protocol.seed, replication, OBS_STREAM)
    times, path = simulate_path(model, theta, init.x0_mean, protocol, rng_path, t0=init.t0)
    series = make_observations(times, path, protocol, obs, rng_obs)
    idx = np.rint((series.times - init.t0) / protocol.fine_dt).astype(int)
    return series, path[idx]


def write_path_csv(fname, times, values, prefix="x"):
    values = np.asarray(values)
    if values.ndim == 1:
        values = values[:, None]
    with open(fname, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t"] + [f"{prefix}{j + 1}" for j in range(values.shape[1])])
        for t, row in zip(times, values):
            w.writerow([repr(float(t))] + [repr(float(v)) for v in row])


def write_series_csv(fname, series: ObservationSeries):
    write_path_csv(fname, series.times, series.z, prefix="z")


def read_series_csv(fname) -> ObservationSeries:
    """Read observations written by :func:`write_series_csv` (columns t, z1, ..., zr)."""
    rows = list(csv.reader(Path(fname).read_text().splitlines()))
    if not rows or rows[0][0] != "t":
        raise ValueError(f"{fname}: expected a header row starting with 't'")
    data = np.array([[float(v) for v in row] for row in rows[1:] if row], dtype=float)
    return ObservationSeries(TimeGrid(data[:, 0]), data[:, 1:])
