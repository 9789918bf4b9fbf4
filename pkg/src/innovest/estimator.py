"""Innovation estimators: Gaussian innovation NLL and its minimization.

Four kinds of estimator share one objective and differ only in how the
filter predicts between observations:

- ``exact``: closed-form moments (ex1 and ex2 only)
- ``conventional``: one LL step per inter-observation interval
- ``uniform``: LL steps on a uniform grid of maximum step ``h``
- ``adaptive``: LL steps chosen by step-doubling error control
"""
from __future__ import annotations

import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import minimize

from .filter import FilterConfig, FilterError, run_filter
from .model import InitialCondition, ObservationModel, ObservationSeries, SdeModel, as_theta

LOG_2PI = math.log(2.0 * math.pi)
MODE_KINDS = ("exact", "conventional", "uniform", "adaptive")


class EstimationError(RuntimeError):
    pass


@dataclass(frozen=True)
class Mode:
    kind: str
    h: float | None = None

    def __post_init__(self):
        if self.kind not in MODE_KINDS:
            raise ValueError(f"mode must be one of {MODE_KINDS}, got {self.kind!r}")
        if self.kind == "uniform" and not (self.h and self.h > 0):
            raise ValueError("uniform mode needs a positive h")

    @property
    def label(self) -> str:
        if self.kind == "uniform":
            return f"uniform_h{self.h:g}"
        return self.kind

    def filter_config(self, base: FilterConfig | None = None) -> FilterConfig:
        base = base or FilterConfig()
        if self.kind == "exact":
            return FilterConfig.exact()
        if self.kind == "conventional":
            return replace(base, beta=1, grid_mode="uniform", h=None)
        if self.kind == "uniform":
            return replace(base, grid_mode="uniform", h=self.h)
        return replace(base, grid_mode="adaptive")


@dataclass(frozen=True)
class OptimizerSettings:
    xtol: float = 1e-6
    ftol: float = 1e-8
    max_evals: int = 800
    init_step: float = 0.1     # relative size of the initial simplex
    restart_step: float = 0.05
    restarts: int = 1


@dataclass
class NllEvaluation:
    theta: np.ndarray
    value: float
    per_term: list = field(default_factory=list)  # (ln det Sigma_k, nu_k' Sigma_k^-1 nu_k)
    status: str = "ok"


@dataclass
class EstimationResult:
    theta: np.ndarray
    nll: float
    iterations: int
    nll_evals: int
    converged: bool
    mode: str
    accepted_steps: np.ndarray | None = None  # per observation, filter rerun at theta
    failed_steps: np.ndarray | None = None

    @property
    def trace_digest(self) -> tuple[int, int]:
        if self.accepted_steps is None:
            return (0, 0)
        return int(self.accepted_steps.sum()), int(self.failed_steps.sum())


def nll_from_trace(trace) -> NllEvaluation:
    """``(M-1) ln(2 pi) + sum_k [ln det Sigma_k + nu_k' Sigma_k^-1 nu_k]``, k = 1..M-1."""
    terms = []
    for nu, S in zip(trace.nu, trace.Sigma):
        L = np.linalg.cholesky(S)
        w = np.linalg.solve(L, nu)
        terms.append((2.0 * float(np.log(np.diag(L)).sum()), float(w @ w)))
    value = len(terms) * LOG_2PI + sum(a + b for a, b in terms)
    return NllEvaluation(theta=None, value=value, per_term=terms)


def innovation_nll(model: SdeModel, obs: ObservationModel, data: ObservationSeries,
                   init: InitialCondition, theta, cfg: FilterConfig | None = None) -> NllEvaluation:
    """Innovation NLL at ``theta``; filter failures give ``+inf`` with status ``filter-failed``."""
    theta = as_theta(theta)
    try:
        with np.errstate(all="ignore"):
            ev = nll_from_trace(run_filter(model, obs, data, init, theta, cfg))
    except (FilterError, np.linalg.LinAlgError):
        return NllEvaluation(theta=theta, value=math.inf, status="filter-failed")
    ev.theta = theta
    if not math.isfinite(ev.value):
        ev.value = math.inf
        ev.status = "filter-failed"
    return ev


def _initial_simplex(x, lo, hi, rel):
    p = x.size
    sim = np.tile(x, (p + 1, 1))
    for j in range(p):
        step = rel * abs(x[j]) if x[j] != 0 else rel * 0.5 * (hi[j] - lo[j])
        if x[j] + step > hi[j]:
            step = -step
        sim[j + 1, j] = np.clip(x[j] + step, lo[j], hi[j])
    return sim


def minimize_box(fn, x0, bounds, opt: OptimizerSettings | None = None):
    """Nelder-Mead over a box; trial points are projected onto the box.

    Returns ``(x, f, iterations, evaluations, converged)``. Raises
    :class:`EstimationError` if every vertex of the initial simplex is infinite.
    """
    opt = opt or OptimizerSettings()
    lo = np.array([min(a, b) for a, b in bounds], dtype=float)
    hi = np.array([max(a, b) for a, b in bounds], dtype=float)
    cache = {}

    def f(x):
        x = np.clip(np.asarray(x, dtype=float), lo, hi)
        key = x.tobytes()
        if key not in cache:
            val = float(fn(x))
            cache[key] = val if math.isfinite(val) else math.inf
        return cache[key]

    x = np.clip(as_theta(x0), lo, hi)
    iterations = 0
    converged = False
    for attempt in range(1 + opt.restarts):
        sim = _initial_simplex(x, lo, hi, opt.init_step if attempt == 0 else opt.restart_step)
        fsim = [f(v) for v in sim]
        if all(math.isinf(v) for v in fsim):
            raise EstimationError(f"objective is infinite on the whole initial simplex around {x.tolist()}")
        budget = opt.max_evals - len(cache)
        if budget <= 0:
            break
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            res = minimize(f, x, method="Nelder-Mead", bounds=list(zip(lo, hi)),
                           options=dict(initial_simplex=sim, xatol=opt.xtol, fatol=opt.ftol,
                                        maxfev=budget))
        iterations += int(res.nit)
        x_new = np.clip(res.x, lo, hi)
        if f(x_new) <= f(x):
            x = x_new
        converged = bool(res.status == 0)
        if not converged:
            break
    return x, f(x), iterations, len(cache), converged


def estimate(model: SdeModel, obs: ObservationModel, data: ObservationSeries, init: InitialCondition,
             theta_init, cfg: FilterConfig | None = None, opt: OptimizerSettings | None = None,
             mode: str = "") -> EstimationResult:
    """Minimize the innovation NLL over the model's parameter box."""
    cfg = cfg or FilterConfig()
    theta_init = as_theta(theta_init)
    if not model.in_box(theta_init):
        raise ValueError(f"theta_init {theta_init.tolist()} outside the parameter box")
    x, fx, nit, nfev, conv = minimize_box(
        lambda th: innovation_nll(model, obs, data, init, th, cfg).value,
        theta_init, model.theta_box, opt)
    accepted = failed = None
    try:
        tr = run_filter(model, obs, data, init, x, cfg)
        accepted, failed = tr.accepted, tr.failed
    except FilterError:
        pass
    return EstimationResult(theta=x, nll=fx, iterations=nit, nll_evals=nfev,
                            converged=conv and math.isfinite(fx), mode=mode or cfg.grid_mode,
                            accepted_steps=accepted, failed_steps=failed)


# --- batches and summaries ------------------------------------------------------

def _estimate_one(args):
    model_id, rep, series, modes, theta_init, base_cfg, opt, Pi = args
    from .registry import param_names, test_model

    model, obs, init = test_model(model_id)
    if Pi is not None:
        obs = ObservationModel.constant(obs.C, np.eye(obs.r) * Pi)
    names = param_names(model_id)
    records = []
    for mode in modes:
        rec = dict(replication=rep, mode=mode.kind, h=mode.h if mode.kind == "uniform" else "")
        try:
            res = estimate(model, obs, series, init, theta_init, mode.filter_config(base_cfg), opt, mode.label)
        except (EstimationError, FilterError) as exc:
            rec.update({n: math.nan for n in names})
            rec.update(nll=math.nan, converged=False, iterations=0, nll_evals=0,
                       accepted_steps=0, failed_steps=0, status="failed", error=str(exc))
            rec["steps"] = None
            records.append(rec)
            continue
        rec.update({n: float(v) for n, v in zip(names, res.theta)})
        acc, fail = res.trace_digest
        rec.update(nll=res.nll, converged=res.converged, iterations=res.iterations,
                   nll_evals=res.nll_evals, accepted_steps=acc, failed_steps=fail, status="ok")
        rec["steps"] = (None if res.accepted_steps is None
                        else (series.times[1:].tolist(), res.accepted_steps.tolist(), res.failed_steps.tolist()))
        records.append(rec)
    return records


def estimator_suite(model_id: str, data_batch, modes, theta_init=None, cfg: FilterConfig | None = None,
                    opt: OptimizerSettings | None = None, theta0=None, workers: int = 1,
                    Pi: float | None = None):
    """Run every mode on every data set; returns ``(records, summary_rows)``.

    ``records`` has one dict per (replication, mode) in replication-major
    order, independent of ``workers``. ``Pi`` overrides the registered
    observation noise variance.
    """
    from .registry import default_theta, param_names

    modes = [m if isinstance(m, Mode) else Mode(*m) for m in modes]
    if any(m.kind == "exact" for m in modes) and model_id not in ("ex1", "ex2"):
        raise ValueError(f"exact mode is only available for ex1 and ex2, not {model_id!r}")
    theta0 = default_theta(model_id) if theta0 is None else as_theta(theta0)
    theta_init = 1.2 * theta0 if theta_init is None else as_theta(theta_init)
    tasks = [(model_id, i, s, modes, theta_init, cfg, opt, Pi) for i, s in enumerate(data_batch)]
    if workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            chunks = list(pool.map(_estimate_one, tasks))
    else:
        chunks = [_estimate_one(t) for t in tasks]
    records = [r for chunk in chunks for r in chunk]
    return records, summarize(records, param_names(model_id), theta0)


def _sd(x) -> float:
    return float(np.std(x, ddof=1)) if len(x) > 1 else 0.0


def summarize(records, names, theta0):
    """Summary rows computed only from the estimate records.

    Tables: ``mean`` (average and sd of each estimate), ``bias`` (parameter
    value minus average), and when an exact mode is present ``error`` (mean
    and sd of |exact - mode| per replication) and ``diff_avg`` (average of
    exact minus average of mode, over replications where both succeeded).
    """
    theta0 = as_theta(theta0)
    ok = [r for r in records if r["status"] == "ok"]
    keys = []
    for r in records:
        key = (r["mode"], r["h"])
        if key not in keys:
            keys.append(key)
    by_key = {k: {r["replication"]: r for r in ok if (r["mode"], r["h"]) == k} for k in keys}
    exact = by_key.get(("exact", ""))
    rows = []
    for key in keys:
        group = by_key[key]
        n_failed = sum(1 for r in records if (r["mode"], r["h"]) == key and r["status"] != "ok")
        reps = sorted(group)
        for j, name in enumerate(names):
            vals = np.array([group[i][name] for i in reps], dtype=float)
            base = dict(mode=key[0], h=key[1], param=name, n=len(vals), n_failed=n_failed)
            if len(vals):
                rows.append(dict(base, table="mean", value=float(vals.mean()), std=_sd(vals)))
                rows.append(dict(base, table="bias", value=float(theta0[j] - vals.mean()), std=""))
            if exact is not None and key != ("exact", ""):
                common = [i for i in reps if i in exact]
                if common:
                    e = np.array([exact[i][name] for i in common])
                    a = np.array([group[i][name] for i in common])
                    b2 = dict(base, n=len(common))
                    rows.append(dict(b2, table="error", value=float(np.abs(e - a).mean()), std=_sd(np.abs(e - a))))
                    rows.append(dict(b2, table="diff_avg", value=float(e.mean() - a.mean()), std=""))
    return rows
