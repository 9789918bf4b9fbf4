"""Monte Carlo experiment driver: config parsing, runs and CSV artifacts.

Config files are INI text read by :mod:`configparser`. Keys are case
insensitive, ``#`` and ``;`` start comments, lists are comma separated::

    [experiment]
    model = ex1            # ex1 | ex2 | ex3 | ex4
    seed = 1
    replications = 20
    out = runs/ex1         # relative paths resolve against the config file
    workers = 1

    [theta0]               # optional overrides of the true parameters
    alpha = -0.1

    [protocol]
    delta = 1
    T = 10
    scheme = euler         # euler | ll, default per model
    fine_dt = 1e-3
    Pi = 1e-4              # optional observation noise variance override

    [estimators]
    modes = exact, conventional, uniform, adaptive
    h = 0.5, 0.125         # uniform steps, each must divide delta
    beta = 1
    theta_init = -0.12, 0.12
    rtol_y = 5e-6          # also atol_y, atol_P, rtol_P, h_init, h_min, h_max

    [optimizer]
    xtol = 1e-6            # also ftol, max_evals, init_step, restart_step, restarts

Only ``[experiment] model`` is required.
"""
from __future__ import annotations

import configparser
import csv
import io
import logging
import math
import re
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import __version__
from .estimator import MODE_KINDS, Mode, OptimizerSettings, estimate, estimator_suite
from .filter import FilterConfig
from .model import ObservationModel
from .registry import SPECS, default_scheme, default_theta, param_names, test_model
from .simulate import SCHEMES, SimProtocol, simulate_replication

log = logging.getLogger(__name__)

BINNING_RULE = "freedman-diaconis"
FILTER_KEYS = ("atol_y", "rtol_y", "atol_P", "rtol_P", "h_init", "h_min", "h_max")
OPTIMIZER_KEYS = tuple(f.name for f in fields(OptimizerSettings))
ESTIMATE_TAIL = ("nll", "converged", "iterations", "nll_evals", "accepted_steps", "failed_steps", "status")
SUMMARY_COLUMNS = ("table", "mode", "h", "param", "n", "n_failed", "value", "std")
STEPS_COLUMNS = ("mode", "h", "k", "t", "accepted_mean", "failed_mean", "n")
HISTOGRAM_COLUMNS = ("bin_lo", "bin_hi", "count", "q05", "q95", "n")


class ConfigError(ValueError):
    """Invalid experiment configuration; ``str()`` names the file and line."""

    def __init__(self, message, path=None, line=None):
        where = str(path) if path else "<config>"
        if line is not None:
            where += f":{line}"
        super().__init__(f"{where}: {message}")
        self.line = line


@dataclass(frozen=True)
class ExperimentConfig:
    model: str
    seed: int = 0
    replications: int = 20
    out: Path = Path("results")
    workers: int = 1
    theta0: tuple = ()
    delta: float = 1.0
    T: float = 10.0
    scheme: str = ""
    fine_dt: float = 1e-3
    Pi: float | None = None
    modes: tuple = ("conventional",)
    h: tuple = ()
    theta_init: tuple = ()
    filter: FilterConfig = field(default_factory=FilterConfig)
    optimizer: OptimizerSettings = field(default_factory=OptimizerSettings)

    @property
    def param_names(self) -> tuple:
        return param_names(self.model)

    @property
    def protocol(self) -> SimProtocol:
        return SimProtocol(scheme=self.scheme, fine_dt=self.fine_dt, T=self.T, delta=self.delta,
                           seed=self.seed, replications=self.replications, Pi=self.Pi)

    def mode_list(self) -> list[Mode]:
        out = []
        for kind in self.modes:
            if kind == "uniform":
                out.extend(Mode("uniform", h) for h in self.h)
            else:
                out.append(Mode(kind))
        return out


# --- parsing -------------------------------------------------------------------

_SECTION_RE = re.compile(r"^\s*\[([^\]]+)\]")
_KEY_RE = re.compile(r"^([^\s#;=:][^=:]*?)\s*[=:]")


def _line_index(text: str):
    """Map section names and (section, key) pairs to 1-based line numbers."""
    index = {}
    section = None
    for no, line in enumerate(text.splitlines(), start=1):
        m = _SECTION_RE.match(line)
        if m:
            section = m.group(1).strip()
            index.setdefault(section, no)
            continue
        m = _KEY_RE.match(line)
        if m and section is not None:
            index.setdefault((section, m.group(1).strip().lower()), no)
    return index


_ALLOWED = {
    "experiment": {"model", "seed", "replications", "out", "workers"},
    "theta0": None,  # checked against the model's parameter names
    "protocol": {"delta", "t", "scheme", "fine_dt", "pi"},
    "estimators": {"modes", "h", "beta", "theta_init"} | {k.lower() for k in FILTER_KEYS},
    "optimizer": set(OPTIMIZER_KEYS),
    "manifest": None,  # written by run_experiment, ignored on input
}


class _Reader:
    def __init__(self, parser, index, path):
        self.p = parser
        self.index = index
        self.path = path

    def fail(self, msg, section, key=None):
        line = self.index.get((section, key)) if key else self.index.get(section)
        raise ConfigError(msg, self.path, line)

    def has(self, section, key):
        return self.p.has_section(section) and self.p.has_option(section, key)

    def raw(self, section, key):
        return self.p.get(section, key).strip()

    def number(self, section, key, kind, default, check=None, what="a number"):
        if not self.has(section, key):
            return default
        text = self.raw(section, key)
        try:
            val = kind(text)
        except ValueError:
            self.fail(f"[{section}] {key} = {text!r} is not {what}", section, key)
        if kind is float and math.isnan(val):
            self.fail(f"[{section}] {key} must not be nan", section, key)
        if check is not None:
            problem = check(val)
            if problem:
                self.fail(f"[{section}] {key} = {text}: {problem}", section, key)
        return val

    def floats(self, section, key):
        if not self.has(section, key):
            return ()
        text = self.raw(section, key)
        try:
            vals = tuple(float(v) for v in text.split(",") if v.strip())
        except ValueError:
            self.fail(f"[{section}] {key} = {text!r} is not a comma-separated list of numbers", section, key)
        if not all(math.isfinite(v) for v in vals):
            self.fail(f"[{section}] {key} entries must be finite", section, key)
        return vals


def _positive(v):
    return None if v > 0 else "must be positive"


def _at_least_one(v):
    return None if v >= 1 else "must be at least 1"


def parse_config(text: str, path=None, base_dir=None) -> ExperimentConfig:
    """Parse config text; raises :class:`ConfigError` with the offending line."""
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"), interpolation=None)
    try:
        parser.read_string(text, source=str(path or "<config>"))
    except configparser.DuplicateOptionError as exc:
        raise ConfigError(f"duplicate key {exc.option!r} in [{exc.section}]", path, exc.lineno) from None
    except configparser.DuplicateSectionError as exc:
        raise ConfigError(f"duplicate section [{exc.section}]", path, exc.lineno) from None
    except configparser.MissingSectionHeaderError as exc:
        raise ConfigError("expected a [section] header before the first key", path, exc.lineno) from None
    except configparser.ParsingError as exc:
        lineno = exc.errors[0][0] if exc.errors else None
        raise ConfigError("cannot parse line (expected 'key = value')", path, lineno) from None
    index = _line_index(text)
    rd = _Reader(parser, index, path)

    for section in parser.sections():
        if section not in _ALLOWED:
            rd.fail(f"unknown section [{section}]; expected one of {sorted(_ALLOWED)}", section)
        allowed = _ALLOWED[section]
        if allowed is None:
            continue
        for key in parser.options(section):
            if key not in allowed:
                rd.fail(f"unknown key {key!r} in [{section}]; expected one of {sorted(allowed)}", section, key)

    if not rd.has("experiment", "model"):
        if parser.has_section("experiment"):
            rd.fail("[experiment] needs a 'model' key", "experiment")
        raise ConfigError("missing [experiment] section with a 'model' key", path, None)
    model = rd.raw("experiment", "model")
    if model not in SPECS:
        rd.fail(f"unknown model {model!r}; known: {sorted(SPECS)}", "experiment", "model")
    names = param_names(model)
    model_obj = test_model(model)[0]

    seed = rd.number("experiment", "seed", int, 0, lambda v: None if v >= 0 else "must be non-negative",
                     "an integer")
    reps = rd.number("experiment", "replications", int, 20, _at_least_one, "an integer")
    workers = rd.number("experiment", "workers", int, 1, _at_least_one, "an integer")
    out = Path(rd.raw("experiment", "out")) if rd.has("experiment", "out") else Path("results")
    if base_dir is not None and not out.is_absolute():
        out = (Path(base_dir) / out).resolve()

    theta0 = default_theta(model)
    if parser.has_section("theta0"):
        for key in parser.options("theta0"):
            if key not in names:
                rd.fail(f"unknown parameter {key!r} for {model}; expected one of {list(names)}", "theta0", key)
            theta0[names.index(key)] = rd.number("theta0", key, float, None)
        if not model_obj.in_box(theta0):
            rd.fail(f"theta0 {theta0.tolist()} lies outside the parameter box {model_obj.theta_box}", "theta0")

    delta = rd.number("protocol", "delta", float, 1.0, _positive)
    T = rd.number("protocol", "t", float, 10.0, _positive)
    fine_dt = rd.number("protocol", "fine_dt", float, 1e-3, _positive)
    Pi = rd.number("protocol", "pi", float, None, lambda v: None if v >= 0 else "must be non-negative")
    scheme = rd.raw("protocol", "scheme") if rd.has("protocol", "scheme") else default_scheme(model)
    if scheme not in SCHEMES:
        rd.fail(f"scheme must be one of {SCHEMES}, got {scheme!r}", "protocol", "scheme")
    if T < delta:
        rd.fail(f"T={T} is shorter than delta={delta}", "protocol", "t")
    if fine_dt > delta:
        rd.fail(f"fine_dt={fine_dt} exceeds delta={delta}", "protocol", "fine_dt")
    if abs(delta / fine_dt - round(delta / fine_dt)) > 1e-6 * (delta / fine_dt):
        rd.fail(f"fine_dt={fine_dt} does not divide delta={delta}", "protocol", "fine_dt")

    modes = ("conventional",)
    if rd.has("estimators", "modes"):
        modes = tuple(m.strip() for m in rd.raw("estimators", "modes").split(",") if m.strip())
        if not modes:
            rd.fail("modes list is empty", "estimators", "modes")
        for m in modes:
            if m not in MODE_KINDS:
                rd.fail(f"unknown mode {m!r}; expected some of {MODE_KINDS}", "estimators", "modes")
        if len(set(modes)) != len(modes):
            rd.fail("modes list has duplicates", "estimators", "modes")
        if "exact" in modes and model not in ("ex1", "ex2"):
            rd.fail(f"exact mode needs closed-form moments, which {model} lacks", "estimators", "modes")
    hs = rd.floats("estimators", "h")
    if "uniform" in modes and not hs:
        key = "h" if rd.has("estimators", "h") else "modes"
        rd.fail("uniform mode needs a non-empty h list", "estimators", key)
    for h in hs:
        ratio = delta / h if h > 0 else 0.0
        if h <= 0 or h > delta * (1 + 1e-12) or abs(ratio - round(ratio)) > 1e-9 * ratio:
            rd.fail(f"h={h!r} must be delta={delta!r} or divide it", "estimators", "h")
    if len(set(hs)) != len(hs):
        rd.fail("h list has duplicates", "estimators", "h")
    beta = rd.number("estimators", "beta", int, 1, lambda v: None if v in (1, 2) else "must be 1 or 2",
                     "an integer")
    theta_init = rd.floats("estimators", "theta_init")
    if theta_init:
        if len(theta_init) != len(names):
            rd.fail(f"theta_init needs {len(names)} values {list(names)}", "estimators", "theta_init")
        if not model_obj.in_box(theta_init):
            rd.fail(f"theta_init lies outside the parameter box {model_obj.theta_box}",
                    "estimators", "theta_init")
    elif not model_obj.in_box(1.2 * theta0):
        rd.fail("the default theta_init = 1.2 * theta0 leaves the parameter box; set theta_init", "theta0")

    fkw = {}
    for key in FILTER_KEYS:
        val = rd.number("estimators", key.lower(), float, None, _positive)
        if val is not None:
            fkw[key] = val
    try:
        fcfg = FilterConfig(beta=beta, **fkw)
    except ValueError as exc:
        rd.fail(f"invalid filter settings: {exc}", "estimators")

    okw = {}
    for f in fields(OptimizerSettings):
        kind = int if f.name in ("max_evals", "restarts") else float
        check = (lambda v: None if v >= 0 else "must be non-negative") if f.name == "restarts" else _positive
        val = rd.number("optimizer", f.name, kind, None, check, "an integer" if kind is int else "a number")
        if val is not None:
            okw[f.name] = val
    opt = OptimizerSettings(**okw)

    cfg = ExperimentConfig(model=model, seed=seed, replications=reps, out=out, workers=workers,
                           theta0=tuple(float(v) for v in theta0), delta=delta, T=T, scheme=scheme,
                           fine_dt=fine_dt, Pi=Pi, modes=modes, h=hs, theta_init=theta_init,
                           filter=fcfg, optimizer=opt)
    try:
        cfg.protocol
    except ValueError as exc:
        rd.fail(f"invalid protocol: {exc}", "protocol")
    return cfg


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc.strerror}", path) from None
    return parse_config(text, path, base_dir=path.parent)


def config_to_ini(cfg: ExperimentConfig) -> str:
    """Echo a config as INI text that :func:`parse_config` maps back to ``cfg``."""
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    cp["experiment"] = dict(model=cfg.model, seed=str(cfg.seed), replications=str(cfg.replications),
                            out=str(cfg.out), workers=str(cfg.workers))
    cp["theta0"] = {n: repr(v) for n, v in zip(cfg.param_names, cfg.theta0)}
    proto = dict(delta=repr(cfg.delta), T=repr(cfg.T), scheme=cfg.scheme, fine_dt=repr(cfg.fine_dt))
    if cfg.Pi is not None:
        proto["Pi"] = repr(cfg.Pi)
    cp["protocol"] = proto
    est = dict(modes=", ".join(cfg.modes), beta=str(cfg.filter.beta))
    if cfg.h:
        est["h"] = ", ".join(repr(h) for h in cfg.h)
    if cfg.theta_init:
        est["theta_init"] = ", ".join(repr(v) for v in cfg.theta_init)
    for key in FILTER_KEYS:
        est[key] = repr(getattr(cfg.filter, key))
    cp["estimators"] = est
    cp["optimizer"] = {k: repr(getattr(cfg.optimizer, k)) for k in OPTIMIZER_KEYS}
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


# --- running -------------------------------------------------------------------

@dataclass
class ExperimentResult:
    config: ExperimentConfig
    records: list
    summary: list
    files: dict


def _simulate_one(args):
    model, theta0, protocol, rep = args
    return simulate_replication(model, theta0, protocol, rep)[0]


def simulate_batch(cfg: ExperimentConfig):
    tasks = [(cfg.model, cfg.theta0, cfg.protocol, i) for i in range(cfg.replications)]
    if cfg.workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            return list(pool.map(_simulate_one, tasks))
    return [_simulate_one(t) for t in tasks]


def run_experiment(cfg: ExperimentConfig) -> ExperimentResult:
    out = Path(cfg.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"output directory {out} is not writable: {exc.strerror}") from None
    log.info("simulating %d replications of %s", cfg.replications, cfg.model)
    data = simulate_batch(cfg)
    log.info("estimating with modes %s", [m.label for m in cfg.mode_list()])
    records, summary = estimator_suite(
        cfg.model, data, cfg.mode_list(), theta_init=cfg.theta_init or None, cfg=cfg.filter,
        opt=cfg.optimizer, theta0=cfg.theta0, workers=cfg.workers, Pi=cfg.Pi)
    for r in records:
        if r["status"] != "ok":
            log.warning("replication %d, mode %s failed: %s", r["replication"], r["mode"], r.get("error", "?"))
    files = write_outputs(out, cfg, records, summary)
    return ExperimentResult(cfg, records, summary, files)


# --- writers -------------------------------------------------------------------

def _fmt(v) -> str:
    if v is None or v == "":
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _write_csv(path: Path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def estimate_columns(names) -> tuple:
    return ("replication", "mode", "h") + tuple(names) + ESTIMATE_TAIL


def _mode_label(kind, h) -> str:
    return Mode(kind, h or None).label


def histogram_rows(values):
    """Freedman-Diaconis bins of ``values`` plus empirical 5% and 95% quantiles."""
    x = np.asarray(values, dtype=float)
    x = x[np.isfinite(x)]
    if x.size == 0:
        return []
    edges = np.histogram_bin_edges(x, bins="fd")
    counts, _ = np.histogram(x, bins=edges)
    q05, q95 = np.quantile(x, [0.05, 0.95])
    return [(float(lo), float(hi), int(c), float(q05), float(q95), int(x.size))
            for lo, hi, c in zip(edges[:-1], edges[1:], counts)]


def step_rows(records):
    keys = []
    for r in records:
        if (r["mode"], r["h"]) not in keys:
            keys.append((r["mode"], r["h"]))
    rows = []
    for key in keys:
        runs = [r["steps"] for r in records
                if (r["mode"], r["h"]) == key and r["status"] == "ok" and r.get("steps")]
        if not runs:
            continue
        times = runs[0][0]
        acc = np.array([s[1] for s in runs], dtype=float)
        fail = np.array([s[2] for s in runs], dtype=float)
        for i, t in enumerate(times):
            rows.append((key[0], key[1], i + 1, float(t), float(acc[:, i].mean()),
                         float(fail[:, i].mean()), len(runs)))
    return rows


def write_outputs(out: Path, cfg: ExperimentConfig, records, summary) -> dict:
    names = cfg.param_names
    files = {}
    cols = estimate_columns(names)
    files["estimates"] = out / "estimates.csv"
    _write_csv(files["estimates"], cols, ([r[c] for c in cols] for r in records))
    files["summary"] = out / "summary.csv"
    _write_csv(files["summary"], SUMMARY_COLUMNS, ([r[c] for c in SUMMARY_COLUMNS] for r in summary))
    files["steps"] = out / "steps.csv"
    _write_csv(files["steps"], STEPS_COLUMNS, step_rows(records))
    seen = []
    for r in records:
        if (r["mode"], r["h"]) not in seen:
            seen.append((r["mode"], r["h"]))
    for kind, h in seen:
        label = _mode_label(kind, h)
        for name in names:
            vals = [r[name] for r in records if (r["mode"], r["h"]) == (kind, h) and r["status"] == "ok"]
            p = out / f"histogram_{name}_{label}.csv"
            _write_csv(p, HISTOGRAM_COLUMNS, histogram_rows(vals))
            files[f"histogram_{name}_{label}"] = p
    files["manifest"] = out / "manifest.txt"
    files["manifest"].write_text(config_to_ini(cfg) + manifest_section(cfg))
    return files


def manifest_section(cfg: ExperimentConfig) -> str:
    return (f"[manifest]\nseed = {cfg.seed}\nversion = {__version__}\n"
            f"binning = {BINNING_RULE}\nrng = PCG64, SeedSequence(seed, spawn_key=(replication, purpose))\n")


# --- convergence check -----------------------------------------------------------

@dataclass
class ConvergenceReport:
    model: str
    names: tuple
    theta_exact: np.ndarray
    h: tuple
    theta_h: np.ndarray  # (len(h), p)
    errors: np.ndarray   # |theta(h) - theta_exact|, (len(h), p)
    slopes: dict | None  # per parameter log-log slope, None for a single h
    slope: float | None = None  # of the Euclidean norm of the error vector

    @property
    def error_norm(self) -> np.ndarray:
        return np.linalg.norm(self.errors, axis=1)

    def rows(self):
        out = []
        for i, h in enumerate(self.h):
            row = {"h": h}
            row.update({n: float(v) for n, v in zip(self.names, self.theta_h[i])})
            row.update({f"err_{n}": float(v) for n, v in zip(self.names, self.errors[i])})
            row["err_norm"] = float(self.error_norm[i])
            out.append(row)
        return out

    def columns(self) -> tuple:
        return ("h",) + tuple(self.names) + tuple(f"err_{n}" for n in self.names) + ("err_norm",)

    def format(self) -> str:
        lines = [f"model {self.model}, exact estimate "
                 + ", ".join(f"{n}={v:.6g}" for n, v in zip(self.names, self.theta_exact))]
        lines.append("  ".join(f"{c:>14}" for c in self.columns()))
        for row in self.rows():
            lines.append("  ".join(f"{row[c]:>14.6g}" for c in self.columns()))
        if self.slopes is None:
            lines.append("slope: n/a (need at least two h values)")
        else:
            per = ", ".join(f"{n}={'n/a' if s is None else format(s, '.3f')}" for n, s in self.slopes.items())
            lines.append(f"slope: {'n/a' if self.slope is None else format(self.slope, '.3f')} ({per})")
        return "\n".join(lines)


def loglog_slope(h, err):
    h = np.asarray(h, dtype=float)
    err = np.asarray(err, dtype=float)
    if h.size < 2 or np.any(err <= 0) or not np.all(np.isfinite(err)):
        return None
    return float(np.polyfit(np.log(h), np.log(err), 1)[0])


def run_convergence_check(model_id: str, h_ladder, seed: int = 0, delta: float = 1.0, T: float = 10.0,
                          replication: int = 0, cfg: FilterConfig | None = None,
                          opt: OptimizerSettings | None = None, theta_init=None) -> ConvergenceReport:
    """Estimate on one simulated data set with the exact filter and with uniform LL steps ``h``."""
    if model_id not in ("ex1", "ex2"):
        raise ValueError(f"convergence check needs a model with closed-form moments, got {model_id!r}")
    h_ladder = tuple(float(h) for h in h_ladder)
    if not h_ladder:
        raise ValueError("h ladder is empty")
    for h in h_ladder:
        if not 0 < h <= delta * (1 + 1e-12):
            raise ValueError(f"h={h} must lie in (0, delta]")
    theta0 = default_theta(model_id)
    protocol = SimProtocol(scheme=default_scheme(model_id), T=T, delta=delta, seed=seed, replications=1)
    data = simulate_replication(model_id, theta0, protocol, replication)[0]
    model, obs, init = test_model(model_id)
    start = 1.2 * theta0 if theta_init is None else np.asarray(theta_init, dtype=float)
    base = cfg or FilterConfig()
    exact = estimate(model, obs, data, init, start, FilterConfig.exact(), opt, "exact").theta
    th = np.array([estimate(model, obs, data, init, start, replace(base, grid_mode="uniform", h=h), opt,
                            f"uniform_h{h:g}").theta for h in h_ladder])
    err = np.abs(th - exact)
    names = param_names(model_id)
    slopes = slope = None
    if len(h_ladder) >= 2:
        slopes = {n: loglog_slope(h_ladder, err[:, j]) for j, n in enumerate(names)}
        slope = loglog_slope(h_ladder, np.linalg.norm(err, axis=1))
    return ConvergenceReport(model_id, names, exact, h_ladder, th, err, slopes, slope)


def write_convergence_csv(path, report: ConvergenceReport):
    cols = report.columns()
    _write_csv(Path(path), cols, ([row[c] for c in cols] for row in report.rows()))
