"""End-to-end acceptance gates.

One test per headline guarantee: generator exactness against hand-derived
forms, closed-form bound values, identification error trends, noise-scale
recovery, Monte Carlo reproduction of the literature reference ratios from
the shipped configs, exact recovery on noiseless in-basis dynamics, QP
optimality against a grid oracle, and the learning-time budget.  Expected
numbers come from independent oracles or from the [reference] blocks of the
configs, never from the code under test.
"""
import math
import time
from pathlib import Path

import numpy as np
import pytest

from stochsafe.barrier import build_chain, generator, worst_case_bound
from stochsafe.benchmarks import (acc_b1_derived, acc_b1_transcribed,
                                  acc_b2_derived, acc_b2_transcribed,
                                  acc_barrier, benchmark, example1_barrier,
                                  example1_generator_derived,
                                  example1_generator_transcribed)
from stochsafe.controller import SafePolicy
from stochsafe.diffusion import collect_residuals, map_sigma
from stochsafe.harness import (_child_seed, load_config, run_experiment,
                               run_mse_eval)
from stochsafe.qp import QpSpec, solve_qp
from stochsafe.sde import zero_policy
from stochsafe.sysid import (basis_from_names, collect_drift_data, fit_drift,
                             learned_model, pilot_noise_variance,
                             polynomial_basis_2d, predict_drift)

from _oracles import grid_oracle, random_feasible_rows

ROOT = Path(__file__).resolve().parents[1]
CONFIGS = {
    "example1-deep": ROOT / "configs" / "example1.toml",
    "example1-edge": ROOT / "configs" / "example1-edge.toml",
    "acc": ROOT / "configs" / "acc.toml",
}
LEARNED_REFERENCE_KEY = "Bayesian SCBF (literature)"


@pytest.fixture(scope="module")
def experiments(tmp_path_factory):
    """Full identify-control-verify bundles for every shipped config."""
    bundles = {}
    for name, path in CONFIGS.items():
        out = tmp_path_factory.mktemp(f"exp-{name}")
        cfg = load_config(path, overrides={"out_dir": str(out)})
        bundles[name] = run_experiment(cfg)
    return bundles


# -- generator exactness ----------------------------------------------------

def _fd_generator(model, field, x, u, eps=1e-4):
    """Generator via central differences, independent of the dual path."""
    n = len(x)
    grad = np.zeros(n)
    hess = np.zeros((n, n))
    base = float(field.value(x))
    for i in range(n):
        e = np.zeros(n)
        e[i] = eps
        grad[i] = (field.value(x + e) - field.value(x - e)) / (2 * eps)
        hess[i, i] = (field.value(x + e) - 2 * base
                      + field.value(x - e)) / eps ** 2
        for j in range(i):
            ej = np.zeros(n)
            ej[j] = eps
            hess[i, j] = hess[j, i] = (
                field.value(x + e + ej) - field.value(x + e - ej)
                - field.value(x - e + ej) + field.value(x - e - ej)
            ) / (4 * eps ** 2)
    f = np.asarray(model.drift(x), dtype=float)
    g = np.asarray(model.control_matrix(x), dtype=float)
    s = np.asarray(model.diffusion(x), dtype=float)
    drift = f + g @ np.atleast_1d(np.asarray(u, dtype=float))
    return float(grad @ drift + 0.5 * np.trace(s @ s.T @ hess))


def test_generator_matches_hand_derived_forms():
    rng = np.random.default_rng(314)
    sig1 = (0.3, 0.1)
    m1 = benchmark("example1", sig1)
    h1 = example1_barrier()
    acc = benchmark("acc", (0.5, 0.5))
    chain_acc = build_chain(acc, acc_barrier(), 2)
    for _ in range(1000):
        x = rng.uniform(-1.0, 1.0, size=2)
        u = rng.uniform(-1.0, 1.0)
        ga = generator(m1, h1, x)
        val = float(ga.c0 + ga.c1[0] * u)
        ref = example1_generator_derived(x, u, sig1)
        assert abs(val - ref) <= 1e-8 * max(1.0, abs(ref))
        xa = rng.uniform((0.0, 10.5), (30.0, 60.0))
        ua = rng.uniform(-1650.0, 1650.0)
        gb1 = generator(acc, chain_acc.levels[0], xa)
        ref1 = acc_b1_derived(xa, (0.5, 0.5))
        assert abs(gb1.c0 - ref1) <= 1e-8 * max(1.0, abs(ref1))
        assert abs(gb1.c1[0]) <= 1e-8 * max(1.0, abs(ref1))
        gb2 = generator(acc, chain_acc.levels[1], xa)
        val = float(gb2.c0 + gb2.c1[0] * ua)
        ref2 = acc_b2_derived(xa, ua, (0.5, 0.5))
        assert abs(val - ref2) <= 1e-8 * max(1.0, abs(ref2))
    # finite-difference cross-check, independent of both closed forms
    for _ in range(100):
        x = rng.uniform(-0.9, 0.9, size=2)
        u = rng.uniform(-1.0, 1.0)
        ga = generator(m1, h1, x)
        val = float(ga.c0 + ga.c1[0] * u)
        ref = _fd_generator(m1, h1, x, u)
        assert abs(val - ref) <= 1e-5 * max(1.0, abs(ref))
    # the circulated hand-derivation variants disagree with machine
    # differentiation; the disagreement is asserted, not papered over
    x = np.array([0.4, -0.6])
    assert abs(example1_generator_transcribed(x, 0.3, sig1)
               - example1_generator_derived(x, 0.3, sig1)) > 1e-3
    xa = np.array([12.0, 17.0])
    assert abs(acc_b1_transcribed(xa) - acc_b1_derived(xa, (0.5, 0.5))) > 1.0
    assert abs(acc_b2_transcribed(xa, 500.0, (0.5, 0.5))
               - acc_b2_derived(xa, 500.0, (0.5, 0.5))) > 1.0


# -- closed-form bound values ----------------------------------------------

def test_worst_case_bound_reproduces_reference_points():
    t0 = time.perf_counter()
    deep = worst_case_bound("scbf", h_xi=0.5, c=1.0)
    edge = worst_case_bound("scbf", h_xi=0.35, c=1.0)
    elapsed = time.perf_counter() - t0
    assert deep.value == 0.5
    assert edge.value == 0.35
    assert elapsed < 2e-3  # two calls, budget 1 ms each
    # same numbers through the evaluated barrier, up to float rounding
    h = example1_barrier()
    for x0, target in (((-0.1, 0.7), 0.5), ((-0.1, 0.8), 0.35)):
        got = worst_case_bound("scbf", h_xi=float(h.value(np.array(x0))),
                               c=1.0)
        assert abs(got.value - target) <= 1e-15


# -- identification error trend --------------------------------------------

def test_drift_mse_decreases_with_replication():
    t0 = time.perf_counter()
    model = benchmark("example1", (0.2, 0.2))
    basis = polynomial_basis_2d()
    means = {}
    for K in (10, 30, 100):
        vals = []
        for seed in range(5):
            probes = np.random.default_rng(
                _child_seed(seed, 1)).uniform(-1, 1, size=(100, 2))
            data = collect_drift_data(model, probes, -1.0, 1.0, K, 0.01,
                                      seed=_child_seed(seed, 2))
            noise_var = pilot_noise_variance(
                model, np.array([-0.1, 0.7]), -1.0, 1.0, K, 0.01,
                seed=_child_seed(seed, 8))
            posts_f, posts_g = fit_drift(data, basis, 1.0, noise_var)
            rep = run_mse_eval(posts_f, posts_g, model, 100,
                               _child_seed(seed, 9), K=K)
            vals.append(float(np.mean(rep.mse_f)))
        means[K] = float(np.mean(vals))
    assert means[10] > means[30] > means[100]
    # span check: starts in the 1e-2 decade, ends in the 1e-3 one or below
    assert 1e-3 < means[10] < 1e-1
    assert 1e-5 < means[100] < 1e-2
    assert means[100] < means[10] / 5
    assert time.perf_counter() - t0 < 120.0


# -- noise-scale recovery ---------------------------------------------------

@pytest.mark.parametrize("key,sigma", [("example1-deep", 0.2), ("acc", 0.5)])
def test_map_noise_scale_within_ten_percent(key, sigma):
    cfg = load_config(CONFIGS[key], overrides={"out_dir": "/tmp/unused"})
    model = benchmark(cfg.benchmark, cfg.sigma, **dict(cfg.model_params))
    probes = np.random.default_rng(
        _child_seed(cfg.master_seed, 1)).uniform(
        cfg.probe_lo, cfg.probe_hi, size=(cfg.n_probes, cfg.n))
    u1, u2 = cfg.u_pair
    data = collect_drift_data(model, probes, u1, u2, cfg.K, cfg.identify_dt,
                              seed=_child_seed(cfg.master_seed, 2))
    noise_var = pilot_noise_variance(
        model, np.asarray(cfg.x0, dtype=float), u1, u2, cfg.K,
        cfg.identify_dt, seed=_child_seed(cfg.master_seed, 8))
    posts_f, posts_g = fit_drift(data, basis_from_names(cfg.basis),
                                 cfg.prior_scale, noise_var)

    def f_hat(x):
        return predict_drift(posts_f, posts_g, x)[0]

    def g_hat(x):
        return predict_drift(posts_f, posts_g, x)[1]

    x0s = np.random.default_rng(
        _child_seed(cfg.master_seed, 3)).uniform(
        cfg.probe_lo, cfg.probe_hi, size=(100, cfg.n))
    residuals = collect_residuals(model, f_hat, g_hat, zero_policy(model.p),
                                  x0s, cfg.identify_dt, 300,
                                  seed=_child_seed(cfg.master_seed, 4))
    for ch in range(model.n):
        post = map_sigma(residuals, cfg.alpha, cfg.beta, channel=ch)
        assert abs(post.sigma_hat - sigma) <= 0.1 * sigma
        dens = post.log_posterior(post.grid_sigmas)
        i = int(np.argmax(dens))
        cell = post.grid_sigmas[min(i + 1, len(dens) - 1)] \
            - post.grid_sigmas[max(i - 1, 0)]
        assert abs(post.sigma_hat - post.grid_sigmas[i]) <= cell


# -- Monte Carlo reproduction of the reference ratios -----------------------

def test_learned_policy_reproduces_reference_ratios(experiments):
    for name, bundle in experiments.items():
        cfg = bundle["config"]
        target = cfg.reference[LEARNED_REFERENCE_KEY]
        rep = bundle["safety"]["learned"]
        assert rep.ci_lo <= target <= rep.ci_hi, (
            f"{name}: learned ratio {rep.ratio:.4f} "
            f"CI [{rep.ci_lo:.4f}, {rep.ci_hi:.4f}] misses {target}")
        for phase in ("verify-true", "verify-learned"):
            assert bundle["timings"][phase] < 600.0, (
                f"{name}: {phase} took {bundle['timings'][phase]:.0f}s")
        bound = bundle["bound"]
        if bound is not None:
            for rep in bundle["safety"].values():
                assert rep.ratio >= bound.value - 2 * rep.standard_error()


# -- exact recovery on noiseless in-basis dynamics --------------------------

def test_noiseless_in_basis_pipeline_recovers_true_controls():
    model = benchmark("example1", (0.0, 0.0))
    rng = np.random.default_rng(2718)
    probes = rng.uniform(-1.0, 1.0, size=(100, 2))
    data = collect_drift_data(model, probes, -1.0, 1.0, 10, 0.01, seed=5)
    posts_f, posts_g = fit_drift(data, polynomial_basis_2d(), 1e6, 1e-12)
    learned = learned_model(posts_f, posts_g, (0.0, 0.0))
    h = example1_barrier()
    true_pol = SafePolicy(build_chain(model, h, 1), model)
    learned_pol = SafePolicy(build_chain(learned, h, 1), learned)
    worst = 0.0
    for x in rng.uniform(-0.8, 0.8, size=(100, 2)):
        u_true, _ = true_pol.eval(x)
        u_learned, _ = learned_pol.eval(x)
        worst = max(worst, float(np.max(np.abs(u_true - u_learned))))
    assert worst <= 1e-6


# -- QP optimality against the grid oracle ----------------------------------

def test_qp_matches_grid_oracle_on_200_instances():
    rng = np.random.default_rng(99)
    for _ in range(200):
        p = int(rng.integers(1, 4))
        m = int(rng.integers(1, 4))
        rows = random_feasible_rows(rng, p, m)
        sol = solve_qp(QpSpec(p=p, rows=tuple(rows)))
        ref = grid_oracle(rows, p)
        assert np.max(np.abs(sol.u - ref)) < 2e-3
        assert sol.kkt_residual <= 1e-8


# -- learning-phase runtime -------------------------------------------------

def test_learning_phase_fits_runtime_budget(experiments):
    for name, bundle in experiments.items():
        assert bundle["timings"]["learning"] <= 60.0, (
            f"{name}: learning took {bundle['timings']['learning']:.1f}s")
