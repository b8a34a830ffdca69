import json
import math

import numpy as np
import pytest

from stochsafe.barrier import (BarrierChain, BoxSampler, EstimationError,
                               InvalidInitialStateError, RelativeDegreeError,
                               ScalarField, SupEstimate, build_chain,
                               generator, make_box_sup_estimator,
                               sup_over_set, worst_case_bound)
from stochsafe.benchmarks import (acc_b1_derived, acc_b1_transcribed,
                                  acc_b2_derived, acc_b2_transcribed,
                                  acc_barrier, benchmark, example1_barrier,
                                  example1_generator_derived,
                                  example1_generator_transcribed)
from stochsafe.sde import SdeModel

SIG = (0.2, 0.2)


def ex1():
    return benchmark("example1", SIG)


def disk_fields():
    h = example1_barrier()
    dual = ScalarField.from_callable(h.fn, name="disk_dual")
    fd = ScalarField(fn=h.fn, derivation="finite-difference", name="disk_fd")
    return h, dual, fd


def test_generator_annihilates_constants():
    m = SdeModel(n=2, p=1, d=1,
                 drift=lambda x: np.array([x[0], x[1]]),
                 control_matrix=lambda x: np.array([[1.0], [0.0]]),
                 diffusion=lambda x: np.zeros((2, 1)))
    const = ScalarField.from_callable(lambda x: 4.2)
    gen = generator(m, const, np.array([0.3, -0.7]))
    assert gen.c0 == 0.0
    assert np.all(gen.c1 == 0.0)


def test_example1_generator_hand_values():
    gen = generator(ex1(), example1_barrier(), np.array([1.0, 1.0]))
    assert abs(gen.c0 - 1.12) < 1e-12
    assert abs(gen.c1[0] + 2.0) < 1e-12


def test_generator_matches_closed_form_all_modes():
    m = ex1()
    rng = np.random.default_rng(2)
    for h in disk_fields():
        for _ in range(100):
            x = rng.uniform(-1, 1, 2)
            u = rng.uniform(-1, 1)
            gen = generator(m, h, x)
            want = example1_generator_derived(x, u, SIG)
            got = gen.c0 + gen.c1[0] * u
            tol = 1e-4 if h.derivation == "finite-difference" else 1e-10
            assert abs(got - want) <= tol * max(1.0, abs(want))


def test_transcribed_form_disagrees_with_derived():
    x = np.array([1.0, 1.0])
    derived = example1_generator_derived(x, 0.0, SIG)
    transcribed = example1_generator_transcribed(x, 0.0, SIG)
    assert abs(derived - transcribed) > 0.5


def test_generator_linear_in_field():
    m = ex1()
    rng = np.random.default_rng(5)
    b1 = ScalarField.from_callable(lambda x: x[0] ** 2 * x[1])
    b2 = ScalarField.from_callable(lambda x: x[1] ** 3 - x[0])
    for _ in range(20):
        a, b = rng.standard_normal(2)
        x = rng.standard_normal(2)
        combo = ScalarField.from_callable(
            lambda x_, a=a, b=b: a * b1.fn(x_) + b * b2.fn(x_))
        g1 = generator(m, b1, x)
        g2 = generator(m, b2, x)
        gc = generator(m, combo, x)
        assert abs(gc.c0 - (a * g1.c0 + b * g2.c0)) < 1e-10
        assert abs(gc.c1[0] - (a * g1.c1[0] + b * g2.c1[0])) < 1e-10


def test_sigma_zero_reduces_to_lie_derivatives():
    m = benchmark("example1", (0.0, 0.0))
    h = example1_barrier()
    rng = np.random.default_rng(8)
    for _ in range(50):
        x = rng.uniform(-1, 1, 2)
        gen = generator(m, h, x)
        grad = h.gradient(x)
        lie_f = grad @ np.asarray(m.drift(x), dtype=float)
        lie_g = grad @ np.asarray(m.control_matrix(x), dtype=float)
        assert abs(gen.c0 - lie_f) < 1e-10
        assert abs(gen.c1[0] - lie_g[0]) < 1e-10


def test_gradient_matches_finite_differences():
    _, dual, fd = disk_fields()
    rng = np.random.default_rng(3)
    for _ in range(50):
        x = rng.uniform(-1, 1, 2)
        assert np.allclose(dual.gradient(x), fd.gradient(x),
                           rtol=1e-5, atol=1e-7)


def test_hessian_symmetry_reporting():
    f = ScalarField.from_callable(lambda x: x[0] ** 3 * x[1] ** 2)
    x = np.array([1.3, -0.4])
    H = f.hessian(x)
    assert np.array_equal(H, H.T)
    assert f.hessian_asymmetry(x) < 1e-12


def test_acc_chain_levels_match_hand_derivation():
    sig = (0.5, 0.5)
    m = benchmark("acc", sig)
    probes = np.random.default_rng(1).uniform([0.0, 10.5], [30.0, 40.0],
                                              (50, 2))
    chain = build_chain(m, acc_barrier(), 2, probe_points=probes[:10])
    assert chain.r == 2
    for x in probes:
        b1 = float(chain.levels[1].value(x))
        assert abs(b1 - acc_b1_derived(x, sig)) <= 1e-9 * max(1, abs(b1))
        top = generator(m, chain.levels[1], x)
        c0_want = acc_b2_derived(x, 0.0, sig)
        c1_want = acc_b2_derived(x, 1.0, sig) - c0_want
        assert abs(top.c0 - c0_want) <= 1e-9 * max(1, abs(c0_want))
        assert abs(top.c1[0] - c1_want) <= 1e-6 * max(1, abs(c1_want))


def test_acc_transcribed_chain_disagrees():
    sig = (0.5, 0.5)
    x = np.array([12.0, 17.0])
    assert abs(acc_b1_derived(x, sig) - acc_b1_transcribed(x)) > 1.0
    d = acc_b2_derived(x, 1.0, sig)
    t = acc_b2_transcribed(x, 1.0, sig)
    assert abs(d - t) > 1.0
    # control coefficients differ by the factor of five
    cd = acc_b2_derived(x, 1.0, sig) - acc_b2_derived(x, 0.0, sig)
    ct = acc_b2_transcribed(x, 1.0, sig) - acc_b2_transcribed(x, 0.0, sig)
    assert abs(cd - 5.0 * ct) < 1e-9 * abs(cd)


def test_build_chain_detects_relative_degree_violation():
    # the disk barrier's generator is already u-dependent, so r=2 must fail
    with pytest.raises(RelativeDegreeError) as exc:
        build_chain(ex1(), example1_barrier(), 2,
                    probe_points=np.array([[0.5, 0.5]]))
    assert exc.value.level == 0


def test_build_chain_r1_top_is_h():
    m = ex1()
    h = example1_barrier()
    chain = build_chain(m, h, 1)
    rng = np.random.default_rng(0)
    for _ in range(100):
        x = rng.uniform(-1, 1, 2)
        g_chain = generator(m, chain.top, x)
        g_h = generator(m, h, x)
        assert g_chain.c0 == g_h.c0
        assert np.array_equal(g_chain.c1, g_h.c1)


def test_sup_over_set_disk_maximum():
    est = sup_over_set(example1_barrier(),
                       BoxSampler.make([-1, -1], [1, 1]), 100_000, seed=0)
    assert abs(est.value - 1.0) < 1e-3
    assert est.n_samples == 100_000
    assert not est.unbounded_suspect
    assert np.linalg.norm(est.argmax) < 0.1


def test_sup_over_set_constant_field():
    est = sup_over_set(ScalarField.from_callable(lambda x: 5.0),
                       BoxSampler.make([0], [1]), 10, seed=1)
    assert est.value == 5.0
    assert float(est) == 5.0


def test_sup_over_set_flags_unbounded_growth():
    est = sup_over_set(acc_barrier(), BoxSampler.make([0, 10], [30, 100]),
                       20_000, seed=2)
    assert est.unbounded_suspect
    assert est.argmax[1] > 98.0


def test_sup_over_set_empty_region_errors():
    sampler = BoxSampler.make([0, 0], [1, 1], within=lambda p: False)
    with pytest.raises(EstimationError):
        sup_over_set(example1_barrier(), sampler, 100, seed=0)
    with pytest.raises(EstimationError):
        sup_over_set(example1_barrier(), BoxSampler.make([0], [1]), 0, seed=0)


def test_worst_case_bound_benchmark_points():
    # the bound op adds no error of its own: exact on exact inputs
    assert worst_case_bound("scbf", h_xi=0.5, c=1.0).value == 0.5
    assert worst_case_bound("scbf", h_xi=0.35, c=1.0).value == 0.35
    # fed the evaluated barrier, only float rounding of h itself remains
    h = example1_barrier()
    b1 = worst_case_bound("scbf", h_xi=float(h.value([-0.1, 0.7])), c=1.0)
    b2 = worst_case_bound("scbf", h_xi=float(h.value([-0.1, 0.8])), c=1.0)
    assert abs(b1.value - 0.5) < 1e-15
    assert abs(b2.value - 0.35) < 1e-15


def test_szcbf_bound_limits():
    b = worst_case_bound("szcbf", h_xi=2.0, c=2.0, T=1.5)
    assert abs(b.value - math.exp(-3.0)) < 1e-15
    assert worst_case_bound("szcbf", h_xi=2.0, c=2.0, T=0.0).value == 1.0


def test_high_order_bound_is_product_and_capped():
    b = worst_case_bound("high-order", b_vals=[0.5, 0.2], c_vals=[1.0, 0.4])
    assert abs(b.value - 0.25) < 1e-15
    assert b.value <= 0.5 and b.value <= 0.5
    capped = worst_case_bound("scbf", h_xi=3.0, c=1.0)
    assert capped.value == 1.0


def test_bound_rejects_negative_level():
    with pytest.raises(InvalidInitialStateError) as exc:
        worst_case_bound("high-order", b_vals=[0.5, -0.1], c_vals=[1.0, 1.0])
    assert exc.value.level == 1


def test_bound_monotonicity():
    rng = np.random.default_rng(4)
    for _ in range(50):
        h1, h2 = np.sort(rng.uniform(0, 1, 2))
        c = rng.uniform(1.0, 3.0)
        assert (worst_case_bound("scbf", h_xi=h1, c=c).value
                <= worst_case_bound("scbf", h_xi=h2, c=c).value)
        assert (worst_case_bound("scbf", h_xi=h1, c=c + 1.0).value
                <= worst_case_bound("scbf", h_xi=h1, c=c).value)


def test_chain_report_structure():
    m = ex1()
    est = make_box_sup_estimator([-1, -1], [1, 1], n_samples=20_000, seed=0)
    chain = build_chain(m, example1_barrier(), 1, sup_estimator=est)
    rep = chain.report()
    assert rep["r"] == 1
    assert abs(rep["levels"][0]["c_j"] - 1.0) < 1e-2
    assert rep["levels"][0]["unbounded_suspect"] is False
    json.dumps(rep)  # must be serializable as-is
