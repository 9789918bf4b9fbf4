"""Continuous-discrete state-space model types.

State equation ``dx = f(t, x; theta) dt + sum_i g_i(t, x; theta) dw_i`` observed
at discrete times through ``z_k = C x(t_k) + e_k`` with ``e_k ~ N(0, Pi_k)``.

The diffusion callbacks are matrix valued: ``diffusion(t, x, theta)`` returns the
d x m matrix ``G = [g_1, ..., g_m]``, ``diffusion_jac_x`` returns an (m, d, d)
stack with ``B_i = dg_i/dx``, and Hessians are indexed ``[component, j, l]``.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

Callback = Callable[[float, np.ndarray, np.ndarray], np.ndarray]


@dataclass(frozen=True)
class SdeModel:
    d: int
    m: int
    drift: Callback
    diffusion: Callback
    drift_jac_x: Callback
    drift_dt: Callback
    diffusion_jac_x: Callback
    diffusion_dt: Callback
    theta_box: tuple[tuple[float, float], ...]
    drift_hess: Optional[Callback] = None
    diffusion_hess: Optional[Callback] = None
    param_names: tuple[str, ...] = ()
    # (t_k, t_next, y, P, theta) -> (y_pred, P_pred) for models with closed-form moments.
    exact_moments: Optional[Callable] = None
    name: str = ""

    def __post_init__(self):
        if self.d < 1 or self.m < 1:
            raise ValueError(f"dimensions must be positive, got d={self.d}, m={self.m}")
        box = tuple((min(float(a), float(b)), max(float(a), float(b))) for a, b in self.theta_box)
        object.__setattr__(self, "theta_box", box)
        if not self.param_names:
            object.__setattr__(self, "param_names", tuple(f"theta{i}" for i in range(len(box))))
        if len(self.param_names) != len(box):
            raise ValueError("param_names and theta_box lengths differ")

    @property
    def theta_dim(self) -> int:
        return len(self.theta_box)

    @property
    def has_hessians(self) -> bool:
        return self.drift_hess is not None and self.diffusion_hess is not None

    @property
    def lower(self) -> np.ndarray:
        return np.array([lo for lo, _ in self.theta_box])

    @property
    def upper(self) -> np.ndarray:
        return np.array([hi for _, hi in self.theta_box])

    def in_box(self, theta) -> bool:
        theta = np.asarray(theta, dtype=float)
        return bool(np.all(theta >= self.lower) and np.all(theta <= self.upper))


@dataclass(frozen=True)
class ObservationModel:
    C: np.ndarray
    Pi: Callable[[int], np.ndarray]

    def __post_init__(self):
        object.__setattr__(self, "C", np.atleast_2d(np.asarray(self.C, dtype=float)))

    @property
    def r(self) -> int:
        return self.C.shape[0]

    @classmethod
    def constant(cls, C, Pi) -> "ObservationModel":
        Pi = np.atleast_2d(np.asarray(Pi, dtype=float))
        return cls(C=C, Pi=lambda k: Pi)


@dataclass(frozen=True)
class TimeGrid:
    obs_times: np.ndarray
    fine_times: Optional[np.ndarray] = None
    h_max: Optional[float] = None

    def __post_init__(self):
        t = np.asarray(self.obs_times, dtype=float)
        object.__setattr__(self, "obs_times", t)
        if t.ndim != 1 or t.size == 0:
            raise ValueError("obs_times must be a non-empty 1-d sequence")
        if np.any(np.diff(t) <= 0):
            raise ValueError("obs_times must be strictly increasing")
        if self.fine_times is not None:
            f = np.asarray(self.fine_times, dtype=float)
            object.__setattr__(self, "fine_times", f)
            if np.any(np.diff(f) <= 0):
                raise ValueError("fine_times must be strictly increasing")
            if not np.all(np.isin(t, f)):
                raise ValueError("fine_times must contain every observation time")
            if self.h_max is not None and np.any(np.diff(f) > self.h_max * (1 + 1e-12)):
                raise ValueError("fine grid gap exceeds h_max")

    @property
    def M(self) -> int:
        return self.obs_times.size


@dataclass(frozen=True)
class ObservationSeries:
    grid: TimeGrid
    z: np.ndarray

    def __post_init__(self):
        z = np.asarray(self.z, dtype=float)
        if z.ndim == 1:
            z = z[:, None]
        object.__setattr__(self, "z", z)
        if z.shape[0] != self.grid.M:
            raise ValueError(f"expected {self.grid.M} observations, got {z.shape[0]}")
        if not np.all(np.isfinite(z)):
            raise ValueError("observations must be finite")

    @property
    def times(self) -> np.ndarray:
        return self.grid.obs_times

    @property
    def M(self) -> int:
        return self.grid.M


@dataclass(frozen=True)
class InitialCondition:
    x0_mean: np.ndarray
    x0_second_moment: np.ndarray
    t0: float = 0.0

    def __post_init__(self):
        x = np.atleast_1d(np.asarray(self.x0_mean, dtype=float))
        Q = np.atleast_2d(np.asarray(self.x0_second_moment, dtype=float))
        object.__setattr__(self, "x0_mean", x)
        object.__setattr__(self, "x0_second_moment", Q)
        V = Q - np.outer(x, x)
        scale = max(1.0, float(np.abs(Q).max()))
        if not np.allclose(V, V.T, atol=1e-12 * scale):
            raise ValueError("initial covariance must be symmetric")
        if np.linalg.eigvalsh(0.5 * (V + V.T))[0] < -1e-10 * scale:
            raise ValueError("initial covariance must be positive semi-definite")


@dataclass
class ValidationReport:
    max_discrepancy: dict = field(default_factory=dict)
    failed_probes: list = field(default_factory=list)
    tol: float = 1e-5

    @property
    def ok(self) -> bool:
        return not self.failed_probes and all(v <= self.tol for v in self.max_discrepancy.values())

    @property
    def status(self) -> str:
        return "ok" if self.ok else "failed"


def _central_diff(fn, x, eps):
    """Jacobian of ``fn`` w.r.t. the vector ``x``; output shape fn(x).shape + (len(x),)."""
    cols = []
    for j in range(x.size):
        e = np.zeros_like(x)
        e[j] = eps * max(1.0, abs(x[j]))
        cols.append((np.asarray(fn(x + e)) - np.asarray(fn(x - e))) / (2 * e[j]))
    return np.stack(cols, axis=-1)


def _rel_err(a, b) -> float:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return float(np.max(np.abs(a - b)) / max(1.0, float(np.max(np.abs(b)))))


def validate_model(model: SdeModel, theta, n_probes: int = 10, seed: int = 0,
                   x_nominal=None, t_nominal: float = 1.0, tol: float = 1e-5,
                   eps: float = 1e-6) -> ValidationReport:
    """Compare analytic derivative callbacks against central finite differences.

    Probes are drawn uniformly from a unit box around ``(t_nominal, x_nominal)``.
    Non-finite callback output marks the probe as failed instead of raising.
    """
    if n_probes < 1:
        raise ValueError("n_probes must be >= 1")
    rng = np.random.default_rng(seed)
    theta = np.asarray(theta, dtype=float)
    x_nom = np.zeros(model.d) if x_nominal is None else np.asarray(x_nominal, dtype=float)
    report = ValidationReport(tol=tol)
    disc = report.max_discrepancy

    def record(key, value):
        disc[key] = max(disc.get(key, 0.0), value)

    for p in range(n_probes):
        t = t_nominal + rng.uniform(-0.5, 0.5)
        x = x_nom + rng.uniform(-0.5, 0.5, size=model.d)
        try:
            with np.errstate(all="ignore"):
                f = np.asarray(model.drift(t, x, theta))
                G = np.asarray(model.diffusion(t, x, theta))
                if not (np.all(np.isfinite(f)) and np.all(np.isfinite(G))):
                    raise FloatingPointError("non-finite drift or diffusion")
                checks = {
                    "drift_jac_x": (model.drift_jac_x(t, x, theta),
                                    _central_diff(lambda v: model.drift(t, v, theta), x, eps)),
                    "drift_dt": (model.drift_dt(t, x, theta),
                                 (model.drift(t + eps, x, theta) - model.drift(t - eps, x, theta)) / (2 * eps)),
                    # (d, m, d) -> (m, d, d) so that [i] is B_i
                    "diffusion_jac_x": (model.diffusion_jac_x(t, x, theta),
                                        np.moveaxis(_central_diff(lambda v: model.diffusion(t, v, theta), x, eps), 1, 0)),
                    "diffusion_dt": (model.diffusion_dt(t, x, theta),
                                     (model.diffusion(t + eps, x, theta) - model.diffusion(t - eps, x, theta)) / (2 * eps)),
                }
                if model.drift_hess is not None:
                    checks["drift_hess"] = (model.drift_hess(t, x, theta),
                                            _central_diff(lambda v: model.drift_jac_x(t, v, theta), x, eps))
                if model.diffusion_hess is not None:
                    checks["diffusion_hess"] = (
                        model.diffusion_hess(t, x, theta),
                        _central_diff(lambda v: model.diffusion_jac_x(t, v, theta), x, eps),
                    )
                for key, (analytic, numeric) in checks.items():
                    analytic = np.asarray(analytic, dtype=float)
                    if not np.all(np.isfinite(analytic)) or not np.all(np.isfinite(numeric)):
                        raise FloatingPointError(f"non-finite {key}")
                    record(key, _rel_err(analytic, numeric.reshape(analytic.shape)))
        except (FloatingPointError, ValueError, ZeroDivisionError, OverflowError) as exc:
            report.failed_probes.append((p, t, x.copy(), str(exc)))
    return report


@dataclass(frozen=True)
class ObservationFunction:
    """Nonlinear observation map ``h(t, x)`` with its derivatives.

    ``jac_x`` returns r x d, ``hess`` returns (r, d, d), ``dt`` returns an r-vector.
    """
    h: Callable[[float, np.ndarray], np.ndarray]
    dt: Callable[[float, np.ndarray], np.ndarray]
    jac_x: Callable[[float, np.ndarray], np.ndarray]
    hess: Optional[Callable[[float, np.ndarray], np.ndarray]]
    r: int


def augment_nonlinear_observation(model: SdeModel, obs_fn: ObservationFunction, Pi):
    """Rewrite ``z = h(t, x) + e`` as a linear observation of the state ``v = [x; h]``.

    By the Ito formula ``dh^j = rho^j dt + sum_s sigma_s^j dw_s`` with
    ``rho^j = dh^j/dt + grad h^j . f + 1/2 sum_s g_s^T (Hess h^j) g_s`` and
    ``sigma_s^j = grad h^j . g_s``. Coefficients are evaluated at the ``x`` part
    of ``v``. Returns the augmented model and the observation model selecting
    the last r components.

    Derivative callbacks of the augmented model are built from the base
    model's derivatives; third derivatives of ``h`` are taken by central
    differences of the supplied Hessian. Hessians of the augmented model are
    not provided.
    """
    if obs_fn.hess is None:
        raise ValueError("augmentation needs the Hessian of the observation map")
    d, m, r = model.d, model.m, obs_fn.r
    D = d + r
    eps = 1e-6

    def rho(t, x, theta):
        f = model.drift(t, x, theta)
        G = model.diffusion(t, x, theta)
        H = obs_fn.hess(t, x)
        return (obs_fn.dt(t, x) + obs_fn.jac_x(t, x) @ f
                + 0.5 * np.einsum("js,rjl,ls->r", G, H, G))

    def sigma(t, x, theta):
        return obs_fn.jac_x(t, x) @ model.diffusion(t, x, theta)

    def drift(t, v, theta):
        x = v[:d]
        return np.concatenate([model.drift(t, x, theta), rho(t, x, theta)])

    def diffusion(t, v, theta):
        x = v[:d]
        return np.vstack([model.diffusion(t, x, theta), sigma(t, x, theta)])

    def _dx(fn, t, x, theta):
        return _central_diff(lambda u: fn(t, u, theta), x, eps)

    def drift_jac_x(t, v, theta):
        x = v[:d]
        J = np.zeros((D, D))
        J[:d, :d] = model.drift_jac_x(t, x, theta)
        J[d:, :d] = _dx(rho, t, x, theta)
        return J

    def drift_dt(t, v, theta):
        x = v[:d]
        return np.concatenate([
            model.drift_dt(t, x, theta),
            (rho(t + eps, x, theta) - rho(t - eps, x, theta)) / (2 * eps),
        ])

    def diffusion_jac_x(t, v, theta):
        x = v[:d]
        B = np.zeros((m, D, D))
        B[:, :d, :d] = model.diffusion_jac_x(t, x, theta)
        # (r, m, d) -> (m, r, d)
        B[:, d:, :d] = np.moveaxis(_dx(sigma, t, x, theta), 1, 0)
        return B

    def diffusion_dt(t, v, theta):
        x = v[:d]
        return np.vstack([
            model.diffusion_dt(t, x, theta),
            (sigma(t + eps, x, theta) - sigma(t - eps, x, theta)) / (2 * eps),
        ])

    aug = replace(
        model,
        d=D,
        drift=drift,
        diffusion=diffusion,
        drift_jac_x=drift_jac_x,
        drift_dt=drift_dt,
        diffusion_jac_x=diffusion_jac_x,
        diffusion_dt=diffusion_dt,
        drift_hess=None,
        diffusion_hess=None,
        exact_moments=None,
        name=f"{model.name}+h" if model.name else "",
    )
    C = np.hstack([np.zeros((r, d)), np.eye(r)])
    if callable(Pi):
        obs = ObservationModel(C=C, Pi=Pi)
    else:
        obs = ObservationModel.constant(C, Pi)
    return aug, obs


def augment_initial_condition(init: InitialCondition, obs_fn: ObservationFunction,
                              t0: Optional[float] = None) -> InitialCondition:
    """Initial moments for ``v = [x; h(t0, x)]`` when ``x(t0)`` is deterministic."""
    x = init.x0_mean
    t = init.t0 if t0 is None else t0
    v = np.concatenate([x, np.atleast_1d(obs_fn.h(t, x))])
    return InitialCondition(v, np.outer(v, v), t0=t)


def as_theta(theta: Sequence[float]) -> np.ndarray:
    return np.atleast_1d(np.asarray(theta, dtype=float))
