"""Command-line front end.

Subcommands cover the pipeline stages individually (simulate,
collect-drift, fit-drift, fit-diffusion, verify) plus the end-to-end
experiment and report rendering.  Stage subcommands derive their random
streams exactly as the full experiment does, so artifacts produced
piecewise match the bundle.
"""
import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .barrier import build_chain, make_box_sup_estimator
from .benchmarks import ConfigurationError, acc_clf, benchmark
from .controller import SafePolicy, write_qp_trace_csv
from .diffusion import collect_residuals, map_sigma, sample_sigma_posterior, \
    write_posterior_csv, write_residual_csv
from .harness import (_child_seed, barrier_for, load_config, run_experiment,
                      run_mse_eval, run_safety_trial_batch, _chain_bound,
                      _write_tables_csv, _json_text, _atomic_write_text)
from .sde import Trajectory, em_step, trial_rng, write_trajectory_csv
from .sysid import (basis_from_names, collect_drift_data, fit_drift,
                    learned_model, pilot_noise_variance, read_drift_csv,
                    save_posterior, write_drift_csv)


def _overrides(args) -> dict:
    out = {}
    if getattr(args, "seed", None) is not None:
        out["master_seed"] = args.seed
    if getattr(args, "out", None) is not None:
        out["out_dir"] = args.out
    if getattr(args, "trials", None) is not None:
        out["n_trials"] = args.trials
    return out


def _config(args):
    if args.config is None:
        raise ConfigurationError("this subcommand needs --config")
    return load_config(args.config, overrides=_overrides(args))


def _out_dir(cfg) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _probes(cfg) -> np.ndarray:
    rng = np.random.default_rng(_child_seed(cfg.master_seed, 1))
    return rng.uniform(cfg.probe_lo, cfg.probe_hi,
                       size=(cfg.n_probes, cfg.n))


def _true_chain(cfg, model, h):
    sup_estimator = None
    if cfg.sup_lo is not None:
        sup_estimator = make_box_sup_estimator(
            cfg.sup_lo, cfg.sup_hi, n_samples=cfg.sup_samples,
            within=lambda x: float(h.value(x)) >= 0.0)
    chain = build_chain(model, h, cfg.order, sup_estimator=sup_estimator)
    if cfg.sup_values is not None:
        from .barrier import BarrierChain, SupEstimate
        sups = tuple(SupEstimate(value=v, n_samples=0, argmax=None,
                                 unbounded_suspect=False)
                     for v in cfg.sup_values)
        chain = BarrierChain(model=chain.model, levels=chain.levels,
                             sups=sups)
    return chain


def _policy(cfg, chain, model):
    clf = acc_clf(cfg.clf_target) if cfg.use_clf else None
    bounds = None
    if cfg.bounds_lo is not None:
        bounds = (np.asarray(cfg.bounds_lo, dtype=float),
                  np.asarray(cfg.bounds_hi, dtype=float))
    return SafePolicy(chain, model, kind=cfg.kind, k=cfg.szcbf_gain, clf=clf,
                      clf_gamma=cfg.clf_gamma, slack_weight=cfg.slack_weight,
                      bounds=bounds)


def cmd_simulate(args) -> int:
    cfg = _config(args)
    out = _out_dir(cfg)
    model = benchmark(cfg.benchmark, cfg.sigma, **dict(cfg.model_params))
    h = barrier_for(cfg)
    n_steps = int(round(cfg.horizon / cfg.dt))
    if args.policy == "zero":
        from .sde import simulate, zero_policy
        traj = simulate(model, np.asarray(cfg.x0), zero_policy(model.p),
                        cfg.dt, n_steps, cfg.master_seed)
        records = None
    else:
        chain = _true_chain(cfg, model, h)
        policy = _policy(cfg, chain, model)
        rng = trial_rng(cfg.master_seed, 0)
        x = np.asarray(cfg.x0, dtype=float)
        states, controls, records = [x.copy()], [], []
        for _ in range(n_steps):
            u, rec = policy.eval(x)
            records.append(rec)
            controls.append(u)
            dW = rng.normal(0.0, np.sqrt(cfg.dt), size=model.d)
            x = em_step(model, x, u, cfg.dt, dW)
            states.append(x.copy())
        traj = Trajectory(dt=cfg.dt,
                          times=np.arange(n_steps + 1) * cfg.dt,
                          states=np.array(states),
                          controls=np.array(controls),
                          seed=cfg.master_seed)
    path = out / f"trajectory_seed{cfg.master_seed}.csv"
    write_trajectory_csv(traj, path)
    print(f"wrote {path}")
    if records:
        trace = out / f"qp_trace_seed{cfg.master_seed}.csv"
        write_qp_trace_csv(traj.times[:-1], records, trace)
        print(f"wrote {trace}")
    inside = all(float(h.value(s)) > 0 for s in traj.states)
    print(f"stayed inside safe set: {inside}")
    return 0


def cmd_collect_drift(args) -> int:
    cfg = _config(args)
    out = _out_dir(cfg)
    model = benchmark(cfg.benchmark, cfg.sigma, **dict(cfg.model_params))
    u1, u2 = cfg.u_pair
    data = collect_drift_data(model, _probes(cfg), u1, u2, cfg.K,
                              cfg.identify_dt,
                              seed=_child_seed(cfg.master_seed, 2),
                              scheme=cfg.scheme)
    path = out / "drift_data.csv"
    write_drift_csv(data, path)
    print(f"wrote {path} ({data.K} replicates x {len(data.X)} probes)")
    return 0


def _fit(cfg, model, data):
    basis = basis_from_names(cfg.basis)
    if cfg.noise_var == "pilot":
        u1, u2 = cfg.u_pair
        noise_var = pilot_noise_variance(
            model, np.asarray(cfg.x0, dtype=float), u1, u2, cfg.K,
            cfg.identify_dt, seed=_child_seed(cfg.master_seed, 8))
    else:
        noise_var = float(cfg.noise_var)
    posts_f, posts_g = fit_drift(data, basis, cfg.prior_scale, noise_var)
    return posts_f, posts_g, noise_var


def _collect_and_fit(cfg, model, data_path=None):
    if data_path is not None:
        data = read_drift_csv(data_path)
    else:
        u1, u2 = cfg.u_pair
        data = collect_drift_data(model, _probes(cfg), u1, u2, cfg.K,
                                  cfg.identify_dt,
                                  seed=_child_seed(cfg.master_seed, 2),
                                  scheme=cfg.scheme)
    posts_f, posts_g, noise_var = _fit(cfg, model, data)
    return data, posts_f, posts_g, noise_var


def cmd_fit_drift(args) -> int:
    cfg = _config(args)
    out = _out_dir(cfg)
    model = benchmark(cfg.benchmark, cfg.sigma, **dict(cfg.model_params))
    _, posts_f, posts_g, noise_var = _collect_and_fit(cfg, model, args.data)
    for i, post in enumerate(posts_f, start=1):
        path = out / f"posterior_f{i}.json"
        save_posterior(post, path)
        print(f"wrote {path}")
    for i, row in enumerate(posts_g, start=1):
        for j, post in enumerate(row, start=1):
            path = out / f"posterior_g{i}{j}.json"
            save_posterior(post, path)
            print(f"wrote {path}")
    mse = run_mse_eval(posts_f, posts_g, model, 100,
                       _child_seed(cfg.master_seed, 9),
                       box=(cfg.probe_lo, cfg.probe_hi), K=cfg.K)
    path = out / "mse.json"
    _atomic_write_text(path, _json_text(mse.to_dict()))
    print(f"wrote {path} (noise_var {noise_var:.4g}, "
          f"mse_f {[f'{v:.3g}' for v in mse.mse_f]})")
    return 0


def cmd_fit_diffusion(args) -> int:
    cfg = _config(args)
    out = _out_dir(cfg)
    model = benchmark(cfg.benchmark, cfg.sigma, **dict(cfg.model_params))
    _, posts_f, posts_g, _ = _collect_and_fit(cfg, model, args.data)
    from .sysid import predict_drift

    def f_hat(x):
        return predict_drift(posts_f, posts_g, x)[0]

    def g_hat(x):
        return predict_drift(posts_f, posts_g, x)[1]

    from .sde import zero_policy
    x0_rng = np.random.default_rng(_child_seed(cfg.master_seed, 3))
    roll_x0s = x0_rng.uniform(cfg.probe_lo, cfg.probe_hi,
                              size=(cfg.residual_rollouts, cfg.n))
    residuals = collect_residuals(
        model, f_hat, g_hat, zero_policy(model.p), roll_x0s, cfg.identify_dt,
        cfg.residual_steps, seed=_child_seed(cfg.master_seed, 4),
        provenance=cfg.config_hash)
    path = out / "residuals.csv"
    write_residual_csv(residuals, path)
    print(f"wrote {path}")
    for ch in range(cfg.n):
        post = map_sigma(residuals, cfg.alpha, cfg.beta, channel=ch)
        path = out / f"sigma_posterior_ch{ch + 1}.csv"
        write_posterior_csv(post, path)
        samples = sample_sigma_posterior(post, cfg.posterior_samples,
                                         seed=_child_seed(cfg.master_seed,
                                                          5, ch))
        spath = out / f"sigma_samples_ch{ch + 1}.csv"
        _atomic_write_text(
            spath, "sigma\n" + "\n".join(f"{v:.17g}" for v in samples) + "\n")
        print(f"wrote {path} (MAP {post.sigma_hat:.5g}, "
              f"true {cfg.sigma[ch]:.5g}) and {spath}")
    return 0


def cmd_verify(args) -> int:
    cfg = _config(args)
    out = _out_dir(cfg)
    model = benchmark(cfg.benchmark, cfg.sigma, **dict(cfg.model_params))
    h = barrier_for(cfg)
    chain = _true_chain(cfg, model, h)
    policy = _policy(cfg, chain, model)
    bound = _chain_bound(cfg, chain, np.asarray(cfg.x0))
    rep = run_safety_trial_batch(
        model, policy, cfg.x0, cfg.dt, cfg.horizon, cfg.n_trials,
        _child_seed(cfg.master_seed, 6), h=h, n_workers=cfg.n_workers,
        label="scbf-true-model", bound=bound, config_hash=cfg.config_hash)
    path = out / "safety_true.json"
    _atomic_write_text(path, _json_text(rep.to_dict()))
    _write_tables_csv(out / "tables.csv", (rep,), cfg.reference)
    print(f"wrote {path}")
    b = "n/a" if bound is None else f"{bound.value:.4g}"
    print(f"safety ratio {rep.ratio:.4g} "
          f"(95% CI [{rep.ci_lo:.4g}, {rep.ci_hi:.4g}], bound {b})")
    return 0


def cmd_experiment(args) -> int:
    cfg = _config(args)
    bundle = run_experiment(cfg)
    for rep in (bundle["safety"]["true"], bundle["safety"]["learned"]):
        print(f"{rep.label}: ratio {rep.ratio:.4g} "
              f"(95% CI [{rep.ci_lo:.4g}, {rep.ci_hi:.4g}])")
    bound = bundle["bound"]
    if bound is not None:
        print(f"analytical bound: {bound.value:.4g} ({bound.kind})")
    print(f"sigma MAP: "
          f"{', '.join(f'{v:.5g}' for v in bundle['sigma_hat'])}")
    print(f"bundle in {bundle['paths']['config'].rsplit('/', 1)[0]}")
    return 0


def cmd_report(args) -> int:
    from .report import render_report
    if args.out is not None:
        out = args.out
    elif args.config is not None:
        out = load_config(args.config).out_dir
    else:
        raise ConfigurationError("report needs --out or --config")
    paths = render_report(out)
    for key in sorted(paths):
        print(f"wrote {paths[key]}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stochsafe",
        description="Data-driven safe control with Monte Carlo verification")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_text, trials=False, data=False, policy=False):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="TOML experiment description")
        p.add_argument("--seed", type=int, help="master seed override")
        p.add_argument("--out", help="output directory override")
        if trials:
            p.add_argument("--trials", type=int, help="trial count override")
        if data:
            p.add_argument("--data", help="reuse an existing drift CSV")
        if policy:
            p.add_argument("--policy", choices=("scbf", "zero"),
                           default="scbf")
        p.set_defaults(fn=fn)
        return p

    add("simulate", cmd_simulate,
        "one trajectory under the safety filter (or open loop)", policy=True)
    add("collect-drift", cmd_collect_drift,
        "replicated one-step probing of the black box")
    add("fit-drift", cmd_fit_drift,
        "Bayesian drift fit plus MSE table", data=True)
    add("fit-diffusion", cmd_fit_diffusion,
        "residual collection and noise-scale posterior", data=True)
    add("verify", cmd_verify,
        "Monte Carlo safety ratio for the true-model controller",
        trials=True)
    add("experiment", cmd_experiment,
        "full identify-control-verify bundle", trials=True)
    add("report", cmd_report, "figures and summary for a bundle")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigurationError, OSError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
