import numpy as np
import pytest

from stochsafe.qp import (ConstraintRow, QpInfeasibleError, QpSpec, solve_qp)

from _oracles import grid_oracle, random_feasible_rows


def qp(rows, p=None, **kw):
    p = p if p is not None else len(rows[0].a)
    return solve_qp(QpSpec(p=p, rows=tuple(rows), **kw))


def test_inactive_constraint_returns_zero():
    sol = qp([ConstraintRow(a=[2.0], b=0.5)])
    assert np.array_equal(sol.u, [0.0])
    assert sol.active_set == ()
    assert sol.kkt_residual <= 1e-8


def test_single_constraint_closed_form():
    # min (1/2) u^2  s.t.  2u - 1 >= 0  has its optimum at the boundary
    sol = qp([ConstraintRow(a=[2.0], b=-1.0)])
    assert abs(sol.u[0] - 0.5) < 1e-14
    assert sol.active_set == (0,)
    assert sol.kkt_residual <= 1e-8


def test_matches_grid_oracle_on_random_instances():
    rng = np.random.default_rng(0)
    for _ in range(40):
        p = int(rng.integers(1, 4))
        m = int(rng.integers(1, 4))
        rows = random_feasible_rows(rng, p, m)
        sol = qp(rows, p=p)
        ref = grid_oracle(rows, p)
        assert np.max(np.abs(sol.u - ref)) < 2e-3
        assert sol.kkt_residual <= 1e-8


def test_constraint_satisfaction_and_minimality():
    rng = np.random.default_rng(1)
    for _ in range(30):
        p = int(rng.integers(1, 4))
        rows = random_feasible_rows(rng, p, int(rng.integers(1, 4)))
        sol = qp(rows, p=p)
        slacks = [row.a @ sol.u + row.b for row in rows]
        assert min(slacks) >= -1e-8
        obj = 0.5 * sol.u @ sol.u
        for _ in range(100):
            step = rng.standard_normal(p)
            step *= 1e-3 / np.linalg.norm(step)
            cand = sol.u + step
            if all(row.a @ cand + row.b >= 0 for row in rows):
                assert 0.5 * cand @ cand > obj - 1e-9


def test_row_scaling_leaves_minimizer_unchanged():
    rng = np.random.default_rng(2)
    for _ in range(20):
        rows = random_feasible_rows(rng, 2, 2)
        lam = rng.uniform(0.1, 10.0)
        scaled = [ConstraintRow(a=lam * r.a, b=lam * r.b) for r in rows]
        u1 = qp(rows).u
        u2 = qp(scaled).u
        assert np.max(np.abs(u1 - u2)) < 1e-10


def test_infeasible_reports_most_violated_row():
    rows = [ConstraintRow(a=[0.0], b=-0.2, tag="weak"),
            ConstraintRow(a=[0.0], b=-1.5, tag="strong")]
    with pytest.raises(QpInfeasibleError) as exc:
        qp(rows)
    assert exc.value.most_violated == 1
    assert exc.value.row.tag == "strong"
    assert abs(exc.value.violation - 1.5) < 1e-12


def test_single_uncontrollable_row_infeasible():
    with pytest.raises(QpInfeasibleError):
        qp([ConstraintRow(a=[0.0], b=-1.0)])


def test_slack_row_soft_tracking():
    # hard safety row forbids u > 1; soft row wants a u >= 5 and must yield
    hard = ConstraintRow(a=[-1.0], b=1.0)
    soft = ConstraintRow(a=[1.0], b=-5.0, slack=True)
    sol = solve_qp(QpSpec(p=1, rows=(hard, soft), slack_weight=1e3))
    assert sol.u[0] <= 1.0 + 1e-9
    assert sol.delta is not None and sol.delta > 0
    assert sol.kkt_residual <= 1e-8


def test_slack_weight_limit_tightens_tracking():
    soft = ConstraintRow(a=[1.0], b=-2.0, slack=True)
    deltas = []
    for w in (1e1, 1e3, 1e6):
        sol = solve_qp(QpSpec(p=1, rows=(soft,), slack_weight=w))
        deltas.append(sol.delta)
    assert deltas[0] > deltas[1] > deltas[2]
    # in the stiff limit the soft row behaves like a hard one
    assert abs(solve_qp(QpSpec(p=1, rows=(soft,),
                               slack_weight=1e9)).u[0] - 2.0) < 1e-3


def test_box_bounds_respected():
    lo = np.array([-0.5])
    hi = np.array([0.5])
    sol = solve_qp(QpSpec(p=1, rows=(ConstraintRow(a=[1.0], b=-0.2),),
                          bounds=(lo, hi)))
    assert abs(sol.u[0] - 0.2) < 1e-12
    with pytest.raises(QpInfeasibleError) as exc:
        solve_qp(QpSpec(p=1, rows=(ConstraintRow(a=[1.0], b=-2.0),),
                        bounds=(lo, hi)))
    # the conflict is between the safety row and the upper bound; either
    # may be named, but the reported gap is the same
    assert exc.value.row.tag in ("", "hi[0]")
    assert abs(exc.value.violation - 1.5) < 1e-9


def test_soft_pair_fast_path_matches_enumeration():
    # infinite bounds add no rows but force the generic subset path, so the
    # same geometry is solved both ways
    inf_bounds = (np.array([-np.inf]), np.array([np.inf]))
    rng = np.random.default_rng(7)
    for _ in range(200):
        hard = ConstraintRow(a=[rng.uniform(-2, 2)], b=rng.uniform(-2, 2))
        soft = ConstraintRow(a=[rng.uniform(-2, 2)], b=rng.uniform(-2, 2),
                             slack=True)
        w = 10.0 ** rng.uniform(0, 4)
        fast = solve_qp(QpSpec(p=1, rows=(hard, soft), slack_weight=w))
        slow = solve_qp(QpSpec(p=1, rows=(hard, soft), slack_weight=w,
                               bounds=inf_bounds))
        assert abs(fast.u[0] - slow.u[0]) < 1e-10
        assert abs(fast.delta - slow.delta) < 1e-10
        assert fast.active_set == slow.active_set
        rel = np.abs(fast.multipliers - slow.multipliers) / (
            1.0 + np.abs(slow.multipliers))
        assert np.max(rel) < 1e-9
        assert fast.kkt_residual <= 1e-8


def test_soft_pair_fast_path_infeasible_matches():
    hard = ConstraintRow(a=[0.0], b=-0.7, tag="stuck")
    soft = ConstraintRow(a=[1.0], b=0.0, slack=True)
    with pytest.raises(QpInfeasibleError) as exc:
        solve_qp(QpSpec(p=1, rows=(hard, soft), slack_weight=1e3))
    assert exc.value.most_violated == 0
    assert exc.value.row.tag == "stuck"
    assert abs(exc.value.violation - 0.7) < 1e-12


def test_spec_validation():
    with pytest.raises(ValueError):
        QpSpec(p=1, rows=())
    with pytest.raises(ValueError):
        ConstraintRow(a=[np.inf], b=0.0)
    with pytest.raises(ValueError):
        QpSpec(p=2, rows=(ConstraintRow(a=[1.0], b=0.0),))
