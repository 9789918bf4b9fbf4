"""Continuous-discrete LMV filters: LL moment prediction plus Kalman update.

The filter starts from the given initial moments at ``t_0``; the first
observation only fixes the time origin. Between consecutive observations the
moments are propagated with :func:`~innovest.llmoments.predict_step` over a
fine grid that is either uniform, adaptive (step doubling) or, for models
with closed-form moments, replaced by the exact prediction.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .llmoments import MomentError, MomentState, predict_step
from .model import InitialCondition, ObservationModel, ObservationSeries, SdeModel, as_theta

GRID_MODES = ("uniform", "adaptive", "exact")


class FilterError(RuntimeError):
    def __init__(self, message, k=None, theta=None):
        ctx = []
        if k is not None:
            ctx.append(f"k={k}")
        if theta is not None:
            ctx.append(f"theta={np.asarray(theta).tolist()}")
        super().__init__(message + (f" ({', '.join(ctx)})" if ctx else ""))
        self.base_message = message
        self.k = k
        self.theta = theta


@dataclass(frozen=True)
class FilterConfig:
    beta: int = 1
    grid_mode: str = "uniform"
    h: float | None = None  # uniform step; None means one step per interval
    atol_y: float = 5e-9
    rtol_y: float = 5e-6
    atol_P: float = 5e-12
    rtol_P: float = 5e-6
    h_init: float = 1e-2
    h_min: float = 1e-9
    h_max: float = math.inf
    safety: float = 0.9
    jitter: float = 1e-12

    def __post_init__(self):
        if self.beta not in (1, 2):
            raise ValueError(f"beta must be 1 or 2, got {self.beta}")
        if self.grid_mode not in GRID_MODES:
            raise ValueError(f"grid_mode must be one of {GRID_MODES}, got {self.grid_mode!r}")
        if self.h is not None and not self.h > 0:
            raise ValueError("h must be positive")
        if min(self.atol_y, self.rtol_y, self.atol_P, self.rtol_P) <= 0:
            raise ValueError("tolerances must be positive")
        if not (0 < self.h_min <= self.h_init <= self.h_max):
            raise ValueError("need 0 < h_min <= h_init <= h_max")
        if not (0 < self.safety < 1):
            raise ValueError("safety must lie in (0, 1)")

    @classmethod
    def conventional(cls, **kw) -> "FilterConfig":
        return cls(grid_mode="uniform", h=None, **kw)

    @classmethod
    def uniform(cls, h: float, **kw) -> "FilterConfig":
        return cls(grid_mode="uniform", h=h, **kw)

    @classmethod
    def adaptive(cls, **kw) -> "FilterConfig":
        return cls(grid_mode="adaptive", **kw)

    @classmethod
    def exact(cls) -> "FilterConfig":
        return cls(grid_mode="exact")


@dataclass
class FilterTrace:
    """Per-observation filter output for k = 1..M-1 (index 0 of each array is k=1).

    ``y_filt`` and ``P_filt`` also hold the initial values at index 0, so they
    have M rows.
    """
    times: np.ndarray
    y_pred: np.ndarray
    V_pred: np.ndarray
    nu: np.ndarray
    Sigma: np.ndarray
    K: np.ndarray
    y_filt: np.ndarray
    P_filt: np.ndarray
    accepted: np.ndarray
    failed: np.ndarray

    @property
    def n_updates(self) -> int:
        return len(self.times)


def measurement_update(pred: MomentState, z, obs: ObservationModel, k: int, jitter: float = 1e-12):
    """Kalman update of the predicted moments with observation ``z`` at index k.

    Returns ``(filtered, nu, Sigma, K)``. If ``Sigma`` is not numerically
    positive definite it is regularized once by ``jitter * trace(Sigma) / r``
    on the diagonal; a second failure raises :class:`FilterError`.
    """
    C = obs.C
    y = pred.y
    V = pred.V
    V = 0.5 * (V + V.T)
    z = np.atleast_1d(np.asarray(z, dtype=float))
    nu = z - C @ y
    CV = C @ V
    Sigma = CV @ C.T + np.asarray(obs.Pi(k), dtype=float)
    Sigma = 0.5 * (Sigma + Sigma.T)
    if not np.all(np.isfinite(Sigma)) or not np.all(np.isfinite(nu)):
        raise FilterError("non-finite innovation moments", k=k)
    try:
        np.linalg.cholesky(Sigma)
    except np.linalg.LinAlgError:
        r = Sigma.shape[0]
        tr = float(np.trace(Sigma))
        Sigma = Sigma + jitter * (tr / r if tr > 0 else 1.0) * np.eye(r)
        try:
            np.linalg.cholesky(Sigma)
        except np.linalg.LinAlgError:
            raise FilterError("innovation covariance is not positive definite", k=k) from None
    K = np.linalg.solve(Sigma, CV).T
    y_new = y + K @ nu
    V_new = V - K @ CV
    V_new = 0.5 * (V_new + V_new.T)
    filtered = MomentState(pred.t, y_new, V_new + np.outer(y_new, y_new))
    return filtered, nu, Sigma, K


def _uniform_interval(model, beta, state, t_end, theta, h):
    span = t_end - state.t
    n = 1 if h is None else max(1, math.ceil(span / h - 1e-9))
    t_start = state.t
    for j in range(1, n + 1):
        t_next = t_end if j == n else t_start + j * span / n
        state = predict_step(model, beta, state, t_next, theta)
    return state, n, 0


def _error_ratio(big: MomentState, fine: MomentState, cfg: FilterConfig) -> float:
    ey = np.abs(big.y - fine.y) / (cfg.atol_y + cfg.rtol_y * np.abs(fine.y))
    eP = np.abs(big.P - fine.P) / (cfg.atol_P + cfg.rtol_P * np.abs(fine.P))
    r = max(float(ey.max()), float(eP.max()))
    return r if math.isfinite(r) else math.inf


def _adaptive_interval(model, beta, state, t_end, theta, cfg: FilterConfig, h: float):
    """Step-doubling control over one inter-observation interval.

    Returns ``(state, accepted, failed, h_next)``.
    """
    accepted = failed = 0
    tiny = 1e-12 * max(1.0, abs(t_end))
    while t_end - state.t > tiny:
        h = min(h, cfg.h_max)
        last = state.t + h >= t_end - tiny
        t_new = t_end if last else state.t + h
        step = t_new - state.t
        try:
            big = predict_step(model, beta, state, t_new, theta)
            half = predict_step(model, beta, state, state.t + 0.5 * step, theta)
            fine = predict_step(model, beta, half, t_new, theta)
            ratio = _error_ratio(big, fine, cfg)
        except MomentError:
            ratio = math.inf
        if ratio <= 1.0:
            state = fine
            accepted += 1
        else:
            failed += 1
            if step <= cfg.h_min * (1 + 1e-12):
                raise FilterError(
                    f"step size fell to h_min={cfg.h_min} at t={state.t} with error ratio {ratio:.3g}")
        if ratio == 0.0:
            h_new = cfg.h_max
        elif math.isinf(ratio):
            h_new = 0.25 * step
        else:
            h_new = cfg.safety * step * ratio ** -0.5
        h_new = min(max(h_new, cfg.h_min), cfg.h_max)
        # a final step shortened to land on t_end says little about the next interval
        if last and ratio <= 1.0 and step < h:
            h_new = max(h_new, h)
        h = h_new
    return state, accepted, failed, h


def run_filter(model: SdeModel, obs: ObservationModel, data: ObservationSeries,
               init: InitialCondition, theta, cfg: FilterConfig | None = None) -> FilterTrace:
    cfg = cfg or FilterConfig()
    theta = as_theta(theta)
    if data.z.shape[1] != obs.r:
        raise ValueError(f"observation dimension {data.z.shape[1]} does not match C with r={obs.r}")
    if cfg.grid_mode == "exact" and model.exact_moments is None:
        raise ValueError(f"model {model.name or '?'} has no closed-form moments")
    times = data.times
    M = data.M
    d, r = model.d, obs.r
    n = M - 1
    out = FilterTrace(
        times=times[1:].copy(),
        y_pred=np.empty((n, d)), V_pred=np.empty((n, d, d)),
        nu=np.empty((n, r)), Sigma=np.empty((n, r, r)), K=np.empty((n, d, r)),
        y_filt=np.empty((M, d)), P_filt=np.empty((M, d, d)),
        accepted=np.zeros(n, dtype=int), failed=np.zeros(n, dtype=int),
    )
    state = MomentState(float(times[0]), init.x0_mean.copy(), init.x0_second_moment.copy())
    out.y_filt[0] = state.y
    out.P_filt[0] = state.P
    h_adapt = cfg.h_init
    for k in range(1, M):
        t_end = float(times[k])
        try:
            if cfg.grid_mode == "exact":
                y, P = model.exact_moments(state.t, t_end, state.y, state.P, theta)
                pred = MomentState(t_end, np.asarray(y, dtype=float), np.asarray(P, dtype=float))
                acc, fail = 1, 0
            elif cfg.grid_mode == "uniform":
                pred, acc, fail = _uniform_interval(model, cfg.beta, state, t_end, theta, cfg.h)
            else:
                pred, acc, fail, h_adapt = _adaptive_interval(
                    model, cfg.beta, state, t_end, theta, cfg, h_adapt)
            if not (np.all(np.isfinite(pred.y)) and np.all(np.isfinite(pred.P))):
                raise FilterError("non-finite prediction")
            filt, nu, Sigma, K = measurement_update(pred, data.z[k], obs, k, cfg.jitter)
        except FilterError as exc:
            raise FilterError(exc.base_message, k=k, theta=theta) from exc
        except MomentError as exc:
            raise FilterError(str(exc), k=k, theta=theta) from exc
        i = k - 1
        out.y_pred[i] = pred.y
        out.V_pred[i] = pred.V
        out.nu[i] = nu
        out.Sigma[i] = Sigma
        out.K[i] = K
        out.y_filt[k] = filt.y
        out.P_filt[k] = filt.P
        out.accepted[i] = acc
        out.failed[i] = fail
        state = filt
    return out


def run_filter_adaptive(model, obs, data, init, theta, cfg: FilterConfig | None = None) -> FilterTrace:
    cfg = cfg or FilterConfig.adaptive()
    if cfg.grid_mode != "adaptive":
        raise ValueError("run_filter_adaptive needs grid_mode='adaptive'")
    return run_filter(model, obs, data, init, theta, cfg)


def exact_lmv_filter(model_id: str, data: ObservationSeries, theta, init: InitialCondition | None = None,
                     obs: ObservationModel | None = None) -> FilterTrace:
    """Exact LMV filter for the registered models with closed-form moments."""
    from .registry import test_model

    if model_id not in ("ex1", "ex2"):
        raise ValueError(f"no exact filter for {model_id!r}")
    model, obs0, init0 = test_model(model_id)
    return run_filter(model, obs or obs0, data, init or init0, theta, FilterConfig.exact())
