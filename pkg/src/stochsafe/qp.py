"""Small dense strictly convex QP solver for min-norm safety filtering.

Minimizes 0.5 ||u||^2 (plus 0.5 * slack_weight * delta^2 when a soft row is
present) subject to affine rows a^T u [+ delta] + b >= 0 and optional box
bounds. Problems here never exceed a handful of rows, so the solver checks
KKT candidates over active-set subsets and returns the unique minimizer with
machine-accurate residuals.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np


@dataclass
class ConstraintRow:
    """Affine constraint a^T u (+ delta if slack) + b >= 0."""

    a: np.ndarray
    b: float
    slack: bool = False
    tag: str = ""
    warning: Optional[str] = None

    def __post_init__(self):
        self.a = np.atleast_1d(np.asarray(self.a, dtype=float))
        self.b = float(self.b)
        if not (np.all(np.isfinite(self.a)) and math.isfinite(self.b)):
            raise ValueError(f"non-finite constraint row (tag={self.tag!r})")


@dataclass(frozen=True)
class QpSpec:
    p: int
    rows: Tuple[ConstraintRow, ...]
    slack_weight: float = 1e3
    bounds: Optional[Tuple[np.ndarray, np.ndarray]] = None

    def __post_init__(self):
        if self.p < 1:
            raise ValueError("control dimension must be positive")
        if not self.rows and self.bounds is None:
            raise ValueError("spec needs at least one constraint or bound")
        for row in self.rows:
            if len(row.a) != self.p:
                raise ValueError("constraint row length must match p")
        if self.slack_weight <= 0:
            raise ValueError("slack_weight must be positive")


@dataclass(frozen=True)
class QpSolution:
    u: np.ndarray
    delta: Optional[float]
    active_set: Tuple[int, ...]
    multipliers: np.ndarray
    kkt_residual: float
    objective: float


class QpInfeasibleError(RuntimeError):
    """No point satisfies all hard constraints."""

    def __init__(self, most_violated: int, violation: float,
                 row: ConstraintRow):
        self.most_violated = most_violated
        self.violation = violation
        self.row = row
        super().__init__(
            f"infeasible QP: row {most_violated} (tag={row.tag!r}) violated "
            f"by {violation:.3e}")


def _assemble(spec: QpSpec):
    """Rows in z = (u, delta?) space, including box-bound rows."""
    has_slack = any(r.slack for r in spec.rows)
    dim = spec.p + (1 if has_slack else 0)
    h_diag = np.ones(dim)
    if has_slack:
        h_diag[-1] = spec.slack_weight
    G = []
    b = []
    rows = list(spec.rows)
    for row in spec.rows:
        g = np.zeros(dim)
        g[:spec.p] = row.a
        if row.slack:
            g[-1] = 1.0
        G.append(g)
        b.append(row.b)
    if spec.bounds is not None:
        lo, hi = spec.bounds
        lo = np.asarray(lo, dtype=float)
        hi = np.asarray(hi, dtype=float)
        for i in range(spec.p):
            if np.isfinite(lo[i]):
                g = np.zeros(dim)
                g[i] = 1.0
                G.append(g)
                b.append(-lo[i])
                rows.append(ConstraintRow(a=g[:spec.p], b=-lo[i],
                                          tag=f"lo[{i}]"))
            if np.isfinite(hi[i]):
                g = np.zeros(dim)
                g[i] = -1.0
                G.append(g)
                b.append(hi[i])
                rows.append(ConstraintRow(a=g[:spec.p], b=hi[i],
                                          tag=f"hi[{i}]"))
    return np.array(G), np.array(b), h_diag, has_slack, rows


def _kkt_residual(z, lam, G, b, h_diag) -> float:
    slacks = G @ z + b
    stat = np.max(np.abs(h_diag * z - G.T @ lam)) if len(G) else \
        np.max(np.abs(h_diag * z))
    comp = np.max(np.abs(lam * slacks)) if len(G) else 0.0
    feas = max(0.0, -np.min(slacks)) if len(G) else 0.0
    dual = max(0.0, -np.min(lam)) if len(G) else 0.0
    return max(stat, comp, feas, dual)


def _solve_one_control_soft(spec: QpSpec) -> QpSolution:
    """Closed form for p = 1 with one hard row plus one slack row, unbounded.

    Mirrors the subset enumeration exactly (same candidate order, acceptance
    tolerance and tie rule) in scalar arithmetic; the policy loop hits this
    shape every step, and the generic path stays authoritative elsewhere.
    """
    hard, soft = spec.rows
    a1, b1 = float(hard.a[0]), hard.b
    a2, b2 = float(soft.a[0]), soft.b
    w = spec.slack_weight
    tol = 1e-9
    cands = [((), 0.0, 0.0, 0.0, 0.0)]
    if a1 != 0.0:
        lam = -b1 / (a1 * a1)
        cands.append(((0,), a1 * lam, 0.0, lam, 0.0))
    lam = -b2 / (a2 * a2 + 1.0 / w)
    cands.append(((1,), a2 * lam, lam / w, 0.0, lam))
    if a1 != 0.0:
        u = -b1 / a1
        delta = -b2 - a2 * u
        lam2 = w * delta
        cands.append(((0, 1), u, delta, (u - a2 * lam2) / a1, lam2))
    best = None
    least = None
    for subset, u, delta, l1, l2 in cands:
        s1 = a1 * u + b1
        s2 = a2 * u + delta + b2
        violation = max(0.0, -min(s1, s2))
        if least is None or violation < least[0]:
            least = (violation, s1, s2)
        if l1 < -tol or l2 < -tol or violation > tol:
            continue
        obj = 0.5 * (u * u + w * delta * delta)
        if best is None or obj < best[0] - 1e-15:
            best = (obj, subset, u, delta, l1, l2)
    if best is None:
        violation, s1, s2 = least
        worst = 0 if s1 <= s2 else 1
        raise QpInfeasibleError(worst, violation, spec.rows[worst])
    obj, subset, u, delta, l1, l2 = best
    l1, l2 = max(l1, 0.0), max(l2, 0.0)
    s1 = a1 * u + b1
    s2 = a2 * u + delta + b2
    res = max(abs(u - a1 * l1 - a2 * l2), abs(w * delta - l2),
              abs(l1 * s1), abs(l2 * s2), max(0.0, -min(s1, s2)))
    return QpSolution(u=np.array([u]), delta=delta, active_set=subset,
                      multipliers=np.array([l1, l2]), kkt_residual=res,
                      objective=obj)


def solve_qp(spec: QpSpec) -> QpSolution:
    """Unique KKT-satisfying minimizer, or QpInfeasibleError.

    A single unbounded hard constraint is solved closed-form as
    u = max(0, -b / ||a||^2) a; everything else goes through subset
    enumeration of KKT candidates, which is exact at these sizes.
    """
    if (len(spec.rows) == 1 and not spec.rows[0].slack
            and spec.bounds is None):
        row = spec.rows[0]
        nrm = float(row.a @ row.a)
        if nrm > 0.0:
            scale = max(0.0, -row.b / nrm)
            u = scale * row.a
            lam = np.array([scale])
            active = (0,) if scale > 0 else ()
            res = _kkt_residual(u, lam if active else np.zeros(1),
                                row.a[None, :], np.array([row.b]),
                                np.ones(spec.p))
            return QpSolution(u=u, delta=None, active_set=active,
                              multipliers=lam if active else np.zeros(1),
                              kkt_residual=res,
                              objective=0.5 * float(u @ u))
        if row.b >= 0.0:
            u = np.zeros(spec.p)
            return QpSolution(u=u, delta=None, active_set=(),
                              multipliers=np.zeros(1), kkt_residual=0.0,
                              objective=0.0)
        raise QpInfeasibleError(0, -row.b, row)

    if (spec.p == 1 and spec.bounds is None and len(spec.rows) == 2
            and spec.rows[1].slack and not spec.rows[0].slack):
        return _solve_one_control_soft(spec)

    G, b, h_diag, has_slack, rows = _assemble(spec)
    m, dim = G.shape
    tol = 1e-9
    best = None
    least_violation = None
    for size in range(0, dim + 1):
        for subset in itertools.combinations(range(m), size):
            if subset:
                Gs = G[list(subset)]
                W = Gs / h_diag  # H^{-1} Gs^T, transposed
                Msys = Gs @ W.T
                try:
                    lam_s = np.linalg.solve(Msys, -b[list(subset)])
                except np.linalg.LinAlgError:
                    continue
                z = W.T @ lam_s
            else:
                lam_s = np.zeros(0)
                z = np.zeros(dim)
            slacks = G @ z + b
            violation = max(0.0, -np.min(slacks)) if m else 0.0
            if least_violation is None or violation < least_violation[0]:
                least_violation = (violation, z)
            if np.any(lam_s < -tol) or violation > tol:
                continue
            obj = 0.5 * float(z @ (h_diag * z))
            if best is None or obj < best[0] - 1e-15:
                lam = np.zeros(m)
                lam[list(subset)] = np.maximum(lam_s, 0.0)
                best = (obj, z, subset, lam)
    if best is None:
        violation, z = least_violation
        slacks = G @ z + b
        worst = int(np.argmin(slacks))
        raise QpInfeasibleError(worst, -float(slacks[worst]), rows[worst])
    obj, z, subset, lam = best
    u = z[:spec.p]
    delta = float(z[-1]) if has_slack else None
    res = _kkt_residual(z, lam, G, b, h_diag)
    return QpSolution(u=u, delta=delta, active_set=tuple(subset),
                      multipliers=lam, kkt_residual=res, objective=obj)
