"""Experiment orchestration: identification, safe control, Monte Carlo
safety verification, analytical bound comparison, artifact emission.

Everything here is deterministic given the master seed; per-phase and
per-trial randomness is derived through distinct spawn keys so no stream
is reused across phases.  Wall-clock timings live in a separate artifact
so repeated runs produce byte-identical outputs otherwise.
"""
import hashlib
import json
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Mapping, Optional, Sequence, Tuple, Union

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from .barrier import (BarrierChain, SafetyBound, ScalarField, SupEstimate,
                      build_chain, make_box_sup_estimator, worst_case_bound)
from .benchmarks import (ACC_DEFAULTS, BENCHMARK_NAMES, ConfigurationError,
                         acc_barrier, acc_clf, benchmark, example1_barrier)
from .controller import SafePolicy
from .diffusion import (collect_residuals, map_sigma, sample_sigma_posterior,
                        write_posterior_csv, write_residual_csv)
from .sde import IntegrationDivergedError, em_step, trial_rng, zero_policy
from .sysid import (basis_from_names, collect_drift_data, fit_drift,
                    learned_model, pilot_noise_variance, polynomial_basis_2d,
                    predict_drift, save_posterior, write_drift_csv)

_Z95 = 1.959963984540054  # two-sided 95% normal quantile


def _child_seed(master_seed: int, *tag: int) -> int:
    """Independent integer seed for a named phase of the experiment."""
    ss = np.random.SeedSequence(master_seed, spawn_key=tuple(tag))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def binomial_ci(n_safe: int, n: int) -> Tuple[float, float]:
    """Normal-approximation 95% interval for a success ratio."""
    if n < 1 or not 0 <= n_safe <= n:
        raise ValueError("need 0 <= n_safe <= n with n >= 1")
    p = n_safe / n
    half = _Z95 * math.sqrt(p * (1.0 - p) / n)
    return (max(0.0, p - half), min(1.0, p + half))


@dataclass(frozen=True)
class TrialRecord:
    """Outcome of a single Monte Carlo trial."""

    index: int
    safe: bool
    first_exit: Optional[float]
    flags: Mapping[str, int]

    def to_dict(self) -> dict:
        return {"index": self.index, "safe": self.safe,
                "first_exit": self.first_exit, "flags": dict(self.flags)}


@dataclass(frozen=True)
class SafetyReport:
    """Monte Carlo safety verdicts plus the analytical bound when known."""

    label: str
    n_trials: int
    n_safe: int
    ratio: float
    ci_lo: float
    ci_hi: float
    dt: float
    horizon: float
    master_seed: int
    bound: Optional[SafetyBound]
    trials: Tuple[TrialRecord, ...]
    config_hash: str = ""
    timings: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if self.n_trials < 1:
            raise ConfigurationError("n_trials must be at least 1")
        if self.ratio != self.n_safe / self.n_trials:
            raise ValueError("ratio must equal n_safe / n_trials exactly")
        if not self.ci_lo <= self.ratio <= self.ci_hi:
            raise ValueError("confidence interval must contain the ratio")

    def standard_error(self) -> float:
        p = self.ratio
        return math.sqrt(p * (1.0 - p) / self.n_trials)

    def to_dict(self, include_trials: bool = True) -> dict:
        out = {
            "label": self.label,
            "n_trials": self.n_trials,
            "n_safe": self.n_safe,
            "ratio": self.ratio,
            "ci": [self.ci_lo, self.ci_hi],
            "dt": self.dt,
            "horizon": self.horizon,
            "master_seed": self.master_seed,
            "config_hash": self.config_hash,
            "bound": None if self.bound is None else {
                "kind": self.bound.kind,
                "value": self.bound.value,
                "inputs": self.bound.inputs,
            },
        }
        if include_trials:
            out["trials"] = [t.to_dict() for t in self.trials]
        return out


@dataclass(frozen=True)
class MseReport:
    """Mean squared error of the fitted drift against the true one."""

    mse_f: Tuple[float, ...]
    mse_g: Tuple[Tuple[float, ...], ...]
    n_eval: int
    seed: int
    K: Optional[int] = None

    def __post_init__(self):
        if any(v < 0 for v in self.mse_f):
            raise ValueError("MSE cannot be negative")

    def to_dict(self) -> dict:
        return {"mse_f": list(self.mse_f),
                "mse_g": [list(row) for row in self.mse_g],
                "n_eval": self.n_eval, "seed": self.seed, "K": self.K}


def _field_value(h, x) -> float:
    if hasattr(h, "value"):
        return float(h.value(x))
    return float(h(x))


def _run_one_trial(model, policy, x0, dt, n_steps, master_seed, index, h,
                   intermediates) -> TrialRecord:
    rng = trial_rng(master_seed, index)
    x = np.asarray(x0, dtype=float).copy()
    flags: dict = {}
    structured = hasattr(policy, "eval")
    # one bulk draw per trial; row k equals the k-th sequential draw, so
    # trajectories are unchanged and the per-step RNG overhead is gone
    noise = rng.normal(0.0, math.sqrt(dt), size=(n_steps, model.d))
    for k in range(n_steps):
        if structured:
            u, rec = policy.eval(x)
            if not rec.feasible:
                flags["qp_infeasible"] = flags.get("qp_infeasible", 0) + 1
            if rec.warning:
                flags[rec.warning] = flags.get(rec.warning, 0) + 1
        else:
            u = np.atleast_1d(np.asarray(policy(x), dtype=float))
        dW = noise[k]
        try:
            x = em_step(model, x, u, dt, dW)
        except IntegrationDivergedError:
            flags["diverged"] = flags.get("diverged", 0) + 1
            return TrialRecord(index, False, (k + 1) * dt, flags)
        if _field_value(h, x) <= 0.0:
            return TrialRecord(index, False, (k + 1) * dt, flags)
        for j, level in enumerate(intermediates, start=1):
            if _field_value(level, x) <= 0.0:
                key = f"level{j}_exit"
                flags[key] = flags.get(key, 0) + 1
    return TrialRecord(index, True, None, flags)


def run_safety_trial_batch(true_model, policy, x0, dt: float, horizon: float,
                           n_trials: int, master_seed: int, *, h=None,
                           n_workers: Optional[int] = None, label: str = "",
                           bound: Optional[SafetyBound] = None,
                           config_hash: str = "") -> SafetyReport:
    """Monte Carlo safety ratio over independent seeded trials.

    A trial is safe iff the barrier stays strictly positive at every step
    of the dt grid.  Exits at intermediate chain levels are only logged,
    not treated as failures.  Results are invariant to n_workers.
    """
    if n_trials < 1:
        raise ConfigurationError("n_trials must be at least 1")
    if dt <= 0 or horizon <= 0:
        raise ConfigurationError("dt and horizon must be positive")
    if h is None:
        chain = getattr(policy, "chain", None)
        if chain is None:
            raise ConfigurationError(
                "pass h explicitly when the policy has no barrier chain")
        h = chain.levels[0]
    x0 = np.asarray(x0, dtype=float)
    if _field_value(h, x0) <= 0.0:
        raise ConfigurationError(
            f"initial state is not strictly inside the safe set: "
            f"h(x0) = {_field_value(h, x0):.6g}")
    n_steps = int(round(horizon / dt))
    if n_steps < 1:
        raise ConfigurationError("horizon shorter than one step")
    chain = getattr(policy, "chain", None)
    intermediates = () if chain is None else chain.levels[1:]

    t_start = time.perf_counter()

    def one(i: int) -> TrialRecord:
        return _run_one_trial(true_model, policy, x0, dt, n_steps,
                              master_seed, i, h, intermediates)

    if n_workers is not None and n_workers > 1:
        with ThreadPoolExecutor(max_workers=n_workers) as pool:
            trials = tuple(pool.map(one, range(n_trials)))
    else:
        trials = tuple(one(i) for i in range(n_trials))
    elapsed = time.perf_counter() - t_start

    n_safe = sum(1 for t in trials if t.safe)
    lo, hi = binomial_ci(n_safe, n_trials)
    return SafetyReport(label=label, n_trials=n_trials, n_safe=n_safe,
                        ratio=n_safe / n_trials, ci_lo=lo, ci_hi=hi, dt=dt,
                        horizon=horizon, master_seed=master_seed, bound=bound,
                        trials=trials, config_hash=config_hash,
                        timings={"trials": elapsed})


def run_mse_eval(posts_f, posts_g, true_model, n_eval: int, seed: int,
                 box=None, K: Optional[int] = None) -> MseReport:
    """Squared prediction error of the posterior means at random probes."""
    if n_eval < 1:
        raise ConfigurationError("n_eval must be at least 1")
    n = true_model.n
    if box is None:
        lo, hi = -np.ones(n), np.ones(n)
    else:
        lo, hi = (np.asarray(box[0], dtype=float),
                  np.asarray(box[1], dtype=float))
    rng = np.random.default_rng(seed)
    probes = rng.uniform(lo, hi, size=(n_eval, n))
    sq_f = np.zeros(n)
    sq_g = np.zeros((n, true_model.p))
    for x in probes:
        f_hat, g_hat, _, _ = predict_drift(posts_f, posts_g, x)
        sq_f += (f_hat - np.asarray(true_model.drift(x), dtype=float)) ** 2
        sq_g += (g_hat
                 - np.asarray(true_model.control_matrix(x), dtype=float)) ** 2
    mse_f = tuple((sq_f / n_eval).tolist())
    mse_g = tuple(tuple(row) for row in (sq_g / n_eval).tolist())
    return MseReport(mse_f=mse_f, mse_g=mse_g, n_eval=n_eval, seed=seed, K=K)


_DEFAULT_BASIS = tuple(polynomial_basis_2d().names)


@dataclass(frozen=True)
class ExperimentConfig:
    """Declarative description of one end-to-end experiment."""

    benchmark: str
    sigma: Tuple[float, ...]
    x0: Tuple[float, ...]
    out_dir: str
    master_seed: int = 0
    model_params: Mapping[str, float] = field(default_factory=dict)
    dt: float = 0.01
    horizon: float = 3.0
    n_trials: int = 1000
    # identification
    identify_dt: Optional[float] = None
    K: int = 100
    n_probes: int = 100
    probe_lo: Tuple[float, ...] = ()
    probe_hi: Tuple[float, ...] = ()
    basis: Tuple[str, ...] = _DEFAULT_BASIS
    u_pair: Tuple[float, float] = (-1.0, 1.0)
    scheme: str = "paired"
    alpha: float = 1.0
    beta: float = 1.0
    prior_scale: float = 1.0
    noise_var: Union[str, float] = "pilot"
    residual_rollouts: int = 100
    residual_steps: int = 300
    posterior_samples: int = 10000
    # controller
    kind: str = "scbf"
    szcbf_gain: float = 1.0
    use_clf: bool = False
    clf_target: float = 22.0
    clf_gamma: float = 1.0
    slack_weight: float = 1e3
    bounds_lo: Optional[Tuple[float, ...]] = None
    bounds_hi: Optional[Tuple[float, ...]] = None
    # barrier chain
    order: int = 1
    sup_values: Optional[Tuple[float, ...]] = None
    sup_lo: Optional[Tuple[float, ...]] = None
    sup_hi: Optional[Tuple[float, ...]] = None
    sup_samples: int = 200000
    learned_c1_tol: float = math.inf
    n_workers: Optional[int] = None
    reference: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if self.benchmark not in BENCHMARK_NAMES:
            raise ConfigurationError(
                f"unknown benchmark {self.benchmark!r}; "
                f"choose from {BENCHMARK_NAMES}")
        n = len(self.x0)
        if n == 0 or len(self.sigma) != n:
            raise ConfigurationError("x0 and sigma must share a length >= 1")
        if self.dt <= 0 or self.horizon <= 0:
            raise ConfigurationError("dt and horizon must be positive")
        if self.identify_dt is None:
            # resolved here so equal effective settings hash equal
            object.__setattr__(self, "identify_dt", self.dt)
        elif self.identify_dt <= 0:
            raise ConfigurationError("identify dt must be positive")
        if self.n_trials < 1:
            raise ConfigurationError("n_trials must be at least 1")
        if self.K < 1 or self.n_probes < 1:
            raise ConfigurationError("K and n_probes must be at least 1")
        if len(self.probe_lo) == 0 and len(self.probe_hi) == 0:
            object.__setattr__(self, "probe_lo", (-1.0,) * n)
            object.__setattr__(self, "probe_hi", (1.0,) * n)
        if len(self.probe_lo) != n or len(self.probe_hi) != n:
            raise ConfigurationError("probe box must match the state size")
        if any(a >= b for a, b in zip(self.probe_lo, self.probe_hi)):
            raise ConfigurationError("probe box must have positive extent")
        if self.u_pair[0] == self.u_pair[1]:
            raise ConfigurationError("the two probing controls must differ")
        if self.scheme not in ("paired", "sequential"):
            raise ConfigurationError("scheme must be paired or sequential")
        if self.alpha <= 0 or self.beta <= 0:
            raise ConfigurationError("alpha and beta must be positive")
        if self.prior_scale <= 0:
            raise ConfigurationError("prior_scale must be positive")
        if isinstance(self.noise_var, str):
            if self.noise_var != "pilot":
                raise ConfigurationError(
                    "noise_var must be a number or the string 'pilot'")
        elif self.noise_var < 0:
            raise ConfigurationError("noise_var must be nonnegative")
        if min(self.residual_rollouts, self.residual_steps,
               self.posterior_samples) < 1:
            raise ConfigurationError("residual/posterior sizes must be >= 1")
        if self.kind not in ("scbf", "szcbf"):
            raise ConfigurationError("controller kind must be scbf or szcbf")
        if self.order < 1:
            raise ConfigurationError("barrier chain order must be >= 1")
        if (self.bounds_lo is None) != (self.bounds_hi is None):
            raise ConfigurationError("control bounds need both lo and hi")
        if self.sup_values is not None and len(self.sup_values) != self.order:
            raise ConfigurationError("sup_values must list one value "
                                     "per chain level")
        if (self.sup_lo is None) != (self.sup_hi is None):
            raise ConfigurationError("sup box needs both lo and hi")

    @property
    def n(self) -> int:
        return len(self.x0)

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = list(v)
            elif isinstance(v, Mapping):
                v = dict(v)
            out[f.name] = v
        return out

    @property
    def config_hash(self) -> str:
        # out_dir and n_workers are execution details, not identity
        d = self.to_dict()
        d.pop("out_dir")
        d.pop("n_workers")
        blob = json.dumps(d, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


_TOML_SCHEMA = {
    "model": {"benchmark", "sigma", "params"},
    "trials": {"x0", "dt", "horizon", "n"},
    "identify": {"dt", "K", "probes", "probe_box", "basis", "u_pair", "scheme",
                 "alpha", "beta", "prior_scale", "noise_var",
                 "residual_rollouts", "residual_steps", "posterior_samples"},
    "controller": {"kind", "szcbf_gain", "use_clf", "clf_target", "clf_gamma",
                   "slack_weight", "bounds_lo", "bounds_hi"},
    "barrier": {"order", "sup_values", "sup_box", "sup_samples",
                "learned_c1_tol"},
    "run": {"out", "master_seed", "n_workers"},
    "reference": None,  # free-form method -> ratio mapping
}


def load_config(path, overrides: Optional[Mapping] = None) -> ExperimentConfig:
    """Parse and schema-check a TOML experiment description.

    overrides maps ExperimentConfig field names to replacement values
    (used by the CLI for --seed/--out/--trials).
    """
    with open(path, "rb") as fh:
        doc = tomllib.load(fh)
    for table, keys in doc.items():
        if table not in _TOML_SCHEMA:
            raise ConfigurationError(f"unknown config table [{table}]")
        allowed = _TOML_SCHEMA[table]
        if allowed is None:
            continue
        for key in keys:
            if key not in allowed:
                raise ConfigurationError(
                    f"unknown key {key!r} in table [{table}]")
    model = doc.get("model", {})
    trials = doc.get("trials", {})
    ident = doc.get("identify", {})
    ctrl = doc.get("controller", {})
    barrier_tbl = doc.get("barrier", {})
    run = doc.get("run", {})

    kwargs = {}
    if "benchmark" not in model:
        raise ConfigurationError("config needs model.benchmark")
    kwargs["benchmark"] = model["benchmark"]
    if "sigma" not in model:
        raise ConfigurationError("config needs model.sigma")
    kwargs["sigma"] = tuple(float(v) for v in model["sigma"])
    kwargs["model_params"] = {k: float(v)
                              for k, v in model.get("params", {}).items()}
    if "x0" not in trials:
        raise ConfigurationError("config needs trials.x0")
    kwargs["x0"] = tuple(float(v) for v in trials["x0"])
    for src, dst in (("dt", "dt"), ("horizon", "horizon"), ("n", "n_trials")):
        if src in trials:
            kwargs[dst] = trials[src]
    for src, dst in (("dt", "identify_dt"), ("K", "K"),
                     ("probes", "n_probes"), ("scheme", "scheme"),
                     ("alpha", "alpha"), ("beta", "beta"),
                     ("prior_scale", "prior_scale"),
                     ("noise_var", "noise_var"),
                     ("residual_rollouts", "residual_rollouts"),
                     ("residual_steps", "residual_steps"),
                     ("posterior_samples", "posterior_samples")):
        if src in ident:
            kwargs[dst] = ident[src]
    if "basis" in ident:
        kwargs["basis"] = tuple(ident["basis"])
    if "u_pair" in ident:
        kwargs["u_pair"] = tuple(float(v) for v in ident["u_pair"])
    box = ident.get("probe_box")
    if box is not None:
        if set(box) != {"lo", "hi"}:
            raise ConfigurationError("probe_box needs exactly lo and hi")
        kwargs["probe_lo"] = tuple(float(v) for v in box["lo"])
        kwargs["probe_hi"] = tuple(float(v) for v in box["hi"])
    for src, dst in (("kind", "kind"), ("szcbf_gain", "szcbf_gain"),
                     ("use_clf", "use_clf"), ("clf_target", "clf_target"),
                     ("clf_gamma", "clf_gamma"),
                     ("slack_weight", "slack_weight")):
        if src in ctrl:
            kwargs[dst] = ctrl[src]
    for src, dst in (("bounds_lo", "bounds_lo"), ("bounds_hi", "bounds_hi")):
        if src in ctrl:
            kwargs[dst] = tuple(float(v) for v in ctrl[src])
    if "order" in barrier_tbl:
        kwargs["order"] = barrier_tbl["order"]
    if "sup_values" in barrier_tbl:
        kwargs["sup_values"] = tuple(float(v)
                                     for v in barrier_tbl["sup_values"])
    sup_box = barrier_tbl.get("sup_box")
    if sup_box is not None:
        if set(sup_box) != {"lo", "hi"}:
            raise ConfigurationError("sup_box needs exactly lo and hi")
        kwargs["sup_lo"] = tuple(float(v) for v in sup_box["lo"])
        kwargs["sup_hi"] = tuple(float(v) for v in sup_box["hi"])
    if "sup_samples" in barrier_tbl:
        kwargs["sup_samples"] = barrier_tbl["sup_samples"]
    if "learned_c1_tol" in barrier_tbl:
        kwargs["learned_c1_tol"] = float(barrier_tbl["learned_c1_tol"])
    if "out" in run:
        kwargs["out_dir"] = run["out"]
    else:
        kwargs["out_dir"] = str(Path(path).with_suffix("")) + "-out"
    if "master_seed" in run:
        kwargs["master_seed"] = run["master_seed"]
    if "n_workers" in run:
        kwargs["n_workers"] = run["n_workers"]
    kwargs["reference"] = {str(k): float(v)
                           for k, v in doc.get("reference", {}).items()}
    cfg = ExperimentConfig(**kwargs)
    if overrides:
        cfg = replace(cfg, **dict(overrides))
    return cfg


def _atomic_write_text(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def _atomic_writer(write_fn, path: Path) -> None:
    tmp = path.with_name(path.name + ".tmp")
    write_fn(tmp)
    os.replace(tmp, path)


def _json_text(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def barrier_for(config: ExperimentConfig) -> ScalarField:
    """The safety field matching the configured benchmark."""
    if config.benchmark == "example1":
        return example1_barrier()
    D = config.model_params.get("D", ACC_DEFAULTS["D"])
    return acc_barrier(D)


def _chain_bound(config: ExperimentConfig, chain: BarrierChain,
                 x0) -> Optional[SafetyBound]:
    """Analytical bound at x0, or None when a level sup is unavailable."""
    if chain.sups is None:
        return None
    c_vals = []
    for est in chain.sups:
        if est.unbounded_suspect or not est.value > 0:
            return None
        c_vals.append(float(est.value))
    b_vals = chain.values(x0)
    if np.any(b_vals < 0):
        return None
    if chain.r == 1:
        if config.kind == "szcbf":
            return worst_case_bound("szcbf", h_xi=float(b_vals[0]),
                                    c=c_vals[0], T=config.horizon,
                                    k=config.szcbf_gain)
        return worst_case_bound("scbf", h_xi=float(b_vals[0]), c=c_vals[0])
    return worst_case_bound("high-order", b_vals=[float(v) for v in b_vals],
                            c_vals=c_vals)


def _write_tables_csv(path: Path, reports: Sequence[SafetyReport],
                      reference: Mapping[str, float]) -> None:
    lines = ["method,ratio,ci_lo,ci_hi,n_trials,bound,source"]
    for rep in reports:
        bound = "" if rep.bound is None else f"{rep.bound.value:.17g}"
        lines.append(f"{rep.label},{rep.ratio:.17g},{rep.ci_lo:.17g},"
                     f"{rep.ci_hi:.17g},{rep.n_trials},{bound},this-run")
    for name in sorted(reference):
        lines.append(f"{name},{reference[name]:.17g},,,,,literature")
    _atomic_write_text(path, "\n".join(lines) + "\n")


def run_experiment(config: ExperimentConfig) -> dict:
    """Identify, control, verify; emit the artifact bundle.

    Returns a dict with the fitted objects, both safety reports, and the
    artifact paths.  Any phase failure writes error_report.json (keeping
    partial artifacts) and re-raises.
    """
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    timings: dict = {}
    paths: dict = {}
    t_total = time.perf_counter()
    phase = "setup"
    try:
        model = benchmark(config.benchmark, config.sigma,
                          **dict(config.model_params))
        h = barrier_for(config)
        cfg_hash = config.config_hash
        echo = config.to_dict()
        echo["config_hash"] = cfg_hash
        paths["config"] = out / "config_echo.json"
        _atomic_write_text(paths["config"], _json_text(echo))

        probe_rng = np.random.default_rng(_child_seed(config.master_seed, 1))
        probes = probe_rng.uniform(config.probe_lo, config.probe_hi,
                                   size=(config.n_probes, config.n))

        phase = "collect"
        t0 = time.perf_counter()
        u1, u2 = config.u_pair
        data = collect_drift_data(model, probes, u1, u2, config.K,
                                  config.identify_dt,
                                  seed=_child_seed(config.master_seed, 2),
                                  scheme=config.scheme)
        paths["drift_data"] = out / "drift_data.csv"
        _atomic_writer(lambda p: write_drift_csv(data, p),
                       paths["drift_data"])
        timings["collect"] = time.perf_counter() - t0

        phase = "fit"
        t0 = time.perf_counter()
        basis = basis_from_names(config.basis)
        if config.noise_var == "pilot":
            noise_var = pilot_noise_variance(
                model, np.asarray(config.x0, dtype=float), u1, u2, config.K,
                config.identify_dt, seed=_child_seed(config.master_seed, 8))
        else:
            noise_var = float(config.noise_var)
        posts_f, posts_g = fit_drift(data, basis, config.prior_scale,
                                     noise_var)
        for i, post in enumerate(posts_f, start=1):
            key = f"posterior_f{i}"
            paths[key] = out / f"{key}.json"
            _atomic_writer(lambda p, q=post: save_posterior(q, p), paths[key])
        for i, row in enumerate(posts_g, start=1):
            for j, post in enumerate(row, start=1):
                key = f"posterior_g{i}{j}"
                paths[key] = out / f"{key}.json"
                _atomic_writer(lambda p, q=post: save_posterior(q, p),
                               paths[key])
        timings["fit"] = time.perf_counter() - t0

        phase = "residuals"
        t0 = time.perf_counter()

        def f_hat(x):
            return predict_drift(posts_f, posts_g, x)[0]

        def g_hat(x):
            return predict_drift(posts_f, posts_g, x)[1]

        x0_rng = np.random.default_rng(_child_seed(config.master_seed, 3))
        roll_x0s = x0_rng.uniform(config.probe_lo, config.probe_hi,
                                  size=(config.residual_rollouts, config.n))
        residuals = collect_residuals(
            model, f_hat, g_hat, zero_policy(model.p), roll_x0s,
            config.identify_dt, config.residual_steps,
            seed=_child_seed(config.master_seed, 4), provenance=cfg_hash)
        paths["residuals"] = out / "residuals.csv"
        _atomic_writer(lambda p: write_residual_csv(residuals, p),
                       paths["residuals"])
        timings["residuals"] = time.perf_counter() - t0

        phase = "diffusion"
        t0 = time.perf_counter()
        sigma_hat = []
        for ch in range(config.n):
            post = map_sigma(residuals, config.alpha, config.beta, channel=ch)
            sigma_hat.append(post.sigma_hat)
            key = f"sigma_posterior_ch{ch + 1}"
            paths[key] = out / f"{key}.csv"
            _atomic_writer(lambda p, q=post: write_posterior_csv(q, p),
                           paths[key])
            samples = sample_sigma_posterior(
                post, config.posterior_samples,
                seed=_child_seed(config.master_seed, 5, ch))
            key = f"sigma_samples_ch{ch + 1}"
            paths[key] = out / f"{key}.csv"
            _atomic_write_text(
                paths[key],
                "sigma\n" + "\n".join(f"{v:.17g}" for v in samples) + "\n")
        sigma_hat = tuple(sigma_hat)
        timings["diffusion"] = time.perf_counter() - t0
        timings["learning"] = sum(timings[k] for k in
                                  ("collect", "fit", "residuals", "diffusion"))

        phase = "chain"
        t0 = time.perf_counter()
        sup_estimator = None
        if config.sup_lo is not None:
            sup_estimator = make_box_sup_estimator(
                config.sup_lo, config.sup_hi, n_samples=config.sup_samples,
                within=lambda x: _field_value(h, x) >= 0.0)
        true_chain = build_chain(model, h, config.order,
                                 sup_estimator=sup_estimator,
                                 probe_points=probes[:20])
        if config.sup_values is not None:
            sups = tuple(SupEstimate(value=v, n_samples=0, argmax=None,
                                     unbounded_suspect=False)
                         for v in config.sup_values)
            true_chain = BarrierChain(model=true_chain.model,
                                      levels=true_chain.levels, sups=sups)
        learned = learned_model(posts_f, posts_g, sigma_hat)
        # the chain order is declared by the config; fitted control-matrix
        # entries that are statistical zeros at the lower levels are dropped
        # by the c0-only recursion, so the strict degree gate stays off here
        learned_chain = build_chain(learned, h, config.order,
                                    probe_points=probes[:20],
                                    c1_tol=config.learned_c1_tol)
        paths["chain_report"] = out / "chain_report.json"
        _atomic_write_text(paths["chain_report"],
                           _json_text(true_chain.report()))
        timings["chain"] = time.perf_counter() - t0

        phase = "policies"
        clf = acc_clf(config.clf_target) if config.use_clf else None
        bounds = None
        if config.bounds_lo is not None:
            bounds = (np.asarray(config.bounds_lo, dtype=float),
                      np.asarray(config.bounds_hi, dtype=float))
        mk = dict(kind=config.kind, k=config.szcbf_gain, clf=clf,
                  clf_gamma=config.clf_gamma,
                  slack_weight=config.slack_weight, bounds=bounds)
        true_policy = SafePolicy(true_chain, model, **mk)
        learned_policy = SafePolicy(learned_chain, learned, **mk)
        bound = _chain_bound(config, true_chain, np.asarray(config.x0))

        phase = "verify-true"
        t0 = time.perf_counter()
        rep_true = run_safety_trial_batch(
            model, true_policy, config.x0, config.dt, config.horizon,
            config.n_trials, _child_seed(config.master_seed, 6), h=h,
            n_workers=config.n_workers, label="scbf-true-model", bound=bound,
            config_hash=cfg_hash)
        timings["verify-true"] = time.perf_counter() - t0
        paths["safety_true"] = out / "safety_true.json"
        _atomic_write_text(paths["safety_true"],
                           _json_text(rep_true.to_dict()))

        phase = "verify-learned"
        t0 = time.perf_counter()
        rep_learned = run_safety_trial_batch(
            model, learned_policy, config.x0, config.dt, config.horizon,
            config.n_trials, _child_seed(config.master_seed, 7), h=h,
            n_workers=config.n_workers, label="scbf-learned-model",
            bound=bound, config_hash=cfg_hash)
        timings["verify-learned"] = time.perf_counter() - t0
        paths["safety_learned"] = out / "safety_learned.json"
        _atomic_write_text(paths["safety_learned"],
                           _json_text(rep_learned.to_dict()))

        phase = "tables"
        paths["tables"] = out / "tables.csv"
        _write_tables_csv(paths["tables"], (rep_true, rep_learned),
                          config.reference)
        timings["total"] = time.perf_counter() - t_total
        paths["timings"] = out / "timings.json"
        _atomic_write_text(paths["timings"], _json_text(timings))
    except Exception as err:
        report = {"phase": phase, "error_type": type(err).__name__,
                  "message": str(err)}
        _atomic_write_text(out / "error_report.json", _json_text(report))
        raise
    return {"config": config, "paths": {k: str(v) for k, v in paths.items()},
            "safety": {"true": rep_true, "learned": rep_learned},
            "sigma_hat": sigma_hat, "noise_var": noise_var, "bound": bound,
            "posteriors": (posts_f, posts_g), "timings": timings}
