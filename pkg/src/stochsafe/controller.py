"""Min-norm safe control via barrier-constrained QPs.

The safety row demands a nonnegative generator of the top chain level,
A b_top(x, u) >= 0 (optionally + k * b_top(x) for the zeroing variant);
an optional Lyapunov tracking row A V <= -gamma V + delta enters softly
through a penalized slack. Safety rows are hard, tracking is soft.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple

import numpy as np

from .barrier import BarrierChain, ScalarField, generator
from .qp import ConstraintRow, QpInfeasibleError, QpSpec, QpSolution, solve_qp
from .sde import SdeModel

UNCONTROLLABLE = "pointwise-uncontrollable"


def scbf_constraint(chain: BarrierChain, dynamics: SdeModel, x,
                    kind: str = "scbf", k: float = 1.0,
                    c1_tol: float = 1e-9) -> ConstraintRow:
    """Hard safety row from the generator of the chain's top level.

    dynamics may be the true model or a learned stand-in; the chain supplies
    the field, the dynamics supply the generator. When the control cannot
    influence the row (c1 ~ 0) and the offset is already negative, the row
    carries a pointwise-uncontrollable warning instead of silently failing.
    """
    if kind not in ("scbf", "szcbf"):
        raise ValueError("kind must be 'scbf' or 'szcbf'")
    gen = generator(dynamics, chain.top, x)
    c0 = float(gen.c0)
    c1 = np.asarray(gen.c1, dtype=float)
    if kind == "szcbf":
        c0 += k * float(chain.top.value(x))
    warning = None
    if np.max(np.abs(c1)) < c1_tol and c0 < 0.0:
        warning = UNCONTROLLABLE
    return ConstraintRow(a=c1, b=c0, slack=False, tag=kind.upper(),
                         warning=warning)


def clf_constraint(V: ScalarField, dynamics: SdeModel, x,
                   gamma: float = 1.0) -> ConstraintRow:
    """Soft tracking row A V(x, u) <= -gamma V(x) + delta."""
    gen = generator(dynamics, V, x)
    c0 = float(gen.c0)
    c1 = np.asarray(gen.c1, dtype=float)
    v_val = float(V.value(x))
    return ConstraintRow(a=-c1, b=-c0 - gamma * v_val, slack=True, tag="CLF")


@dataclass
class StepRecord:
    """One policy evaluation, in trace-CSV field order."""

    c0: float
    c1: np.ndarray
    u: np.ndarray
    delta: Optional[float]
    active_set: Tuple[int, ...]
    feasible: bool
    warning: Optional[str] = None


@dataclass(frozen=True)
class SafePolicy:
    """State-feedback min-norm controller for a fixed chain and dynamics."""

    chain: BarrierChain
    dynamics: SdeModel
    kind: str = "scbf"
    k: float = 1.0
    clf: Optional[ScalarField] = None
    clf_gamma: float = 1.0
    slack_weight: float = 1e3
    bounds: Optional[Tuple[np.ndarray, np.ndarray]] = None

    def eval(self, x) -> Tuple[np.ndarray, StepRecord]:
        """Control plus the per-step record; u = 0 on infeasibility."""
        safety = scbf_constraint(self.chain, self.dynamics, x,
                                 kind=self.kind, k=self.k)
        rows = [safety]
        if self.clf is not None:
            rows.append(clf_constraint(self.clf, self.dynamics, x,
                                       gamma=self.clf_gamma))
        spec = QpSpec(p=self.dynamics.p, rows=tuple(rows),
                      slack_weight=self.slack_weight, bounds=self.bounds)
        try:
            sol = solve_qp(spec)
            rec = StepRecord(c0=safety.b, c1=safety.a, u=sol.u,
                             delta=sol.delta, active_set=sol.active_set,
                             feasible=True, warning=safety.warning)
            return sol.u, rec
        except QpInfeasibleError:
            u = np.zeros(self.dynamics.p)
            rec = StepRecord(c0=safety.b, c1=safety.a, u=u, delta=None,
                             active_set=(), feasible=False,
                             warning=safety.warning or UNCONTROLLABLE)
            return u, rec

    def __call__(self, x) -> np.ndarray:
        return self.eval(x)[0]


def safe_policy_eval(policy: SafePolicy, x) -> np.ndarray:
    """Assemble rows, solve, return the control (fallback u = 0)."""
    return policy.eval(x)[0]


def write_qp_trace_csv(times: Sequence[float], records: Sequence[StepRecord],
                       path) -> None:
    """Per-step QP trace: t, c0, c1..., u..., delta, active_set, feasible,
    warning."""
    if not records:
        raise ValueError("no records to write")
    p = len(records[0].u)
    header = (["t", "c0"] + [f"c1_{j + 1}" for j in range(p)]
              + [f"u{j + 1}" for j in range(p)]
              + ["delta", "active_set", "feasible", "warning"])
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for t, rec in zip(times, records):
            row = ([f"{t:.17g}", f"{rec.c0:.17g}"]
                   + [f"{v:.17g}" for v in rec.c1]
                   + [f"{v:.17g}" for v in rec.u]
                   + ["" if rec.delta is None else f"{rec.delta:.17g}",
                      ";".join(str(i) for i in rec.active_set),
                      "1" if rec.feasible else "0",
                      rec.warning or ""])
            writer.writerow(row)
