"""Scalar fields, the process generator, barrier chains and safety bounds.

For a twice differentiable field B and the control-affine model
dX = (f + g u) dt + sigma dW, the generator evaluates to

    A B(x, u) = grad B . (f + g u) + 0.5 * sum_ij (sigma sigma^T)_ij Hess_ij

which is affine in u and is returned as the pair (c0, c1) with
A B = c0 + c1 . u.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Tuple

import numpy as np

from .autodiff import Dual2, value_grad_hess
from .sde import SdeModel

DERIVATION_MODES = ("analytic", "dual-number-automatic", "finite-difference")


class EvaluationError(RuntimeError):
    """Field evaluation produced a non-finite derivative."""


class RelativeDegreeError(RuntimeError):
    """Control entered the chain before the declared relative degree."""

    def __init__(self, level: int, probe):
        self.level = level
        self.probe = np.asarray(probe, dtype=float)
        super().__init__(
            f"generator of chain level {level} depends on u at probe "
            f"{self.probe.tolist()}")


class EstimationError(RuntimeError):
    """Supremum estimation received an empty sample set."""


class InvalidInitialStateError(ValueError):
    """Initial state lies outside a chain level set."""

    def __init__(self, level: int, value: float):
        self.level = level
        self.value = value
        super().__init__(
            f"initial state outside level set {level}: b_{level}(xi) = {value}")


def _is_number(v) -> bool:
    return isinstance(v, (int, float, np.floating, np.integer))


@dataclass(frozen=True)
class ScalarField:
    """Twice differentiable scalar field with a declared derivation mode.

    fn must accept any indexable state whose entries support arithmetic
    (floats or Dual2), so fields compose and nest.
    """

    fn: Callable
    grad_fn: Optional[Callable] = None
    hess_fn: Optional[Callable] = None
    derivation: str = "dual-number-automatic"
    name: str = ""
    fd_step: float = 1e-5

    def __post_init__(self):
        if self.derivation not in DERIVATION_MODES:
            raise ValueError(f"derivation must be one of {DERIVATION_MODES}")
        if self.derivation == "analytic" and (self.grad_fn is None
                                              or self.hess_fn is None):
            raise ValueError("analytic mode requires grad_fn and hess_fn")

    @classmethod
    def from_callable(cls, fn, name: str = "",
                      mode: str = "dual-number-automatic",
                      fd_step: float = 1e-5) -> "ScalarField":
        return cls(fn=fn, derivation=mode, name=name, fd_step=fd_step)

    @classmethod
    def analytic(cls, fn, grad_fn, hess_fn, name: str = "") -> "ScalarField":
        return cls(fn=fn, grad_fn=grad_fn, hess_fn=hess_fn,
                   derivation="analytic", name=name)

    def __call__(self, x):
        return self.fn(x)

    # -- evaluation ------------------------------------------------------

    def value(self, x):
        return self.fn(x)

    def eval_all(self, x):
        """(value, gradient, symmetrized Hessian) in one pass."""
        if self.derivation == "analytic":
            val = self.fn(x)
            grad = self.grad_fn(x)
            hess = self.hess_fn(x)
        elif self.derivation == "dual-number-automatic":
            val, grad, hess = value_grad_hess(self.fn, x)
        else:
            val = self.fn(x)
            grad = self._fd_gradient(x)
            hess = self._fd_hessian(x)
        hess = np.asarray(hess)
        hess = (hess + hess.T) * 0.5
        return val, np.asarray(grad), hess

    def gradient(self, x):
        return self.eval_all(x)[1]

    def hessian(self, x):
        return self.eval_all(x)[2]

    def hessian_asymmetry(self, x) -> float:
        """Max |H - H^T| entry before symmetrization (float states only)."""
        if self.derivation == "analytic":
            hess = np.asarray(self.hess_fn(x), dtype=float)
        elif self.derivation == "dual-number-automatic":
            hess = np.asarray(value_grad_hess(self.fn, x)[2], dtype=float)
        else:
            hess = np.asarray(self._fd_hessian(x), dtype=float)
        return float(np.max(np.abs(hess - hess.T)))

    # -- finite differences ---------------------------------------------

    def _steps(self, x):
        x = np.asarray(x, dtype=float)
        return self.fd_step * np.maximum(1.0, np.abs(x))

    def _fd_gradient(self, x):
        x = np.asarray(x, dtype=float)
        h = self._steps(x)
        out = np.empty(len(x))
        for i in range(len(x)):
            e = np.zeros(len(x))
            e[i] = h[i]
            out[i] = (self.fn(x + e) - self.fn(x - e)) / (2 * h[i])
        return out

    def _fd_hessian(self, x):
        x = np.asarray(x, dtype=float)
        n = len(x)
        h = self._steps(x)
        out = np.empty((n, n))
        f0 = self.fn(x)
        for i in range(n):
            ei = np.zeros(n)
            ei[i] = h[i]
            out[i, i] = (self.fn(x + ei) - 2 * f0 + self.fn(x - ei)) / h[i] ** 2
            for j in range(i + 1, n):
                ej = np.zeros(n)
                ej[j] = h[j]
                mixed = (self.fn(x + ei + ej) - self.fn(x + ei - ej)
                         - self.fn(x - ei + ej) + self.fn(x - ei - ej))
                out[i, j] = out[j, i] = mixed / (4 * h[i] * h[j])
        return out


@dataclass(frozen=True)
class GeneratorAffine:
    """Control-affine generator value A B(x, u) = c0 + c1 . u."""

    c0: object
    c1: np.ndarray

    def evaluate(self, u):
        u = np.atleast_1d(u)
        acc = self.c0
        for k in range(len(self.c1)):
            acc = acc + self.c1[k] * u[k]
        return acc


def generator(model: SdeModel, B: ScalarField, x) -> GeneratorAffine:
    """Generator of B along the model at x, split into (c0, c1).

    Works for float states and for states carrying Dual2 entries, which is
    how chain levels are differentiated in turn.
    """
    _, grad, hess = B.eval_all(x)
    f = model.drift(x)
    g = model.control_matrix(x)
    s = model.diffusion(x)
    n, p, d = model.n, model.p, model.d

    c0 = 0.0
    for i in range(n):
        c0 = c0 + grad[i] * f[i]
    for i in range(n):
        for j in range(n):
            a_ij = 0.0
            for k in range(d):
                a_ij = a_ij + s[i][k] * s[j][k]
            if _is_number(a_ij) and a_ij == 0.0:
                continue
            c0 = c0 + 0.5 * a_ij * hess[i][j]

    c1 = np.empty(p, dtype=object)
    for k in range(p):
        acc = 0.0
        for i in range(n):
            acc = acc + grad[i] * g[i][k]
        c1[k] = acc

    if _is_number(c0) and all(_is_number(v) for v in c1):
        if not (math.isfinite(float(c0))
                and all(math.isfinite(float(v)) for v in c1)):
            raise EvaluationError(
                f"non-finite generator of {B.name or 'field'} at "
                f"{np.asarray(x, dtype=float).tolist()}")
        return GeneratorAffine(float(c0), np.array([float(v) for v in c1]))
    return GeneratorAffine(c0, c1)


@dataclass(frozen=True)
class SupEstimate:
    """Sampled supremum with provenance needed to judge its soundness."""

    value: float
    n_samples: int
    argmax: Optional[np.ndarray] = None
    unbounded_suspect: bool = False

    def __float__(self):
        return float(self.value)


@dataclass(frozen=True)
class BoxSampler:
    """Uniform sampler over a box, optionally filtered by a membership test."""

    lo: np.ndarray
    hi: np.ndarray
    within: Optional[Callable] = None
    edge_frac: float = 0.01

    @classmethod
    def make(cls, lo, hi, within=None, edge_frac: float = 0.01) -> "BoxSampler":
        lo = np.atleast_1d(np.asarray(lo, dtype=float))
        hi = np.atleast_1d(np.asarray(hi, dtype=float))
        if np.any(hi <= lo):
            raise ValueError("box must have hi > lo")
        return cls(lo=lo, hi=hi, within=within, edge_frac=edge_frac)

    def sample(self, rng: np.random.Generator, m: int) -> np.ndarray:
        pts = rng.uniform(self.lo, self.hi, size=(m, len(self.lo)))
        if self.within is not None:
            pts = pts[[bool(self.within(p)) for p in pts]]
        return pts

    def near_edge(self, x: np.ndarray) -> bool:
        margin = self.edge_frac * (self.hi - self.lo)
        return bool(np.any(x - self.lo < margin) or np.any(self.hi - x < margin))


def sup_over_set(b: ScalarField, sampler: BoxSampler, n_samples: int,
                 seed) -> SupEstimate:
    """Monte Carlo estimate of sup b over the sampled region.

    Flags `unbounded_suspect` when the maximizer sits against the sampling
    boundary, i.e. the sample max may be an artifact of the box, not of b.
    """
    if n_samples < 1:
        raise EstimationError("n_samples must be at least 1")
    rng = np.random.default_rng(seed)
    pts = sampler.sample(rng, n_samples)
    if len(pts) == 0:
        raise EstimationError("sampler produced no points in the region")
    best_val = -math.inf
    best_x = None
    for x in pts:
        v = float(b.value(x))
        if v > best_val:
            best_val = v
            best_x = x
    return SupEstimate(value=best_val, n_samples=len(pts), argmax=best_x,
                       unbounded_suspect=sampler.near_edge(best_x))


def make_box_sup_estimator(lo, hi, n_samples: int = 100_000, seed: int = 0,
                           within=None) -> Callable[[ScalarField], SupEstimate]:
    """Sup estimator over a fixed box, for filling chain level suprema."""
    sampler = BoxSampler.make(lo, hi, within=within)

    def estimator(b: ScalarField) -> SupEstimate:
        return sup_over_set(b, sampler, n_samples, seed)

    return estimator


@dataclass(frozen=True)
class BarrierChain:
    """Nested generator chain b_0 = h, b_{j+1} = c0 part of A b_j."""

    model: SdeModel
    levels: Tuple[ScalarField, ...]
    sups: Optional[Tuple[SupEstimate, ...]] = None

    @property
    def r(self) -> int:
        return len(self.levels)

    @property
    def top(self) -> ScalarField:
        return self.levels[-1]

    def values(self, x) -> np.ndarray:
        return np.array([float(b.value(x)) for b in self.levels])

    def inside(self, x) -> bool:
        return bool(np.all(self.values(x) >= 0.0))

    def report(self) -> dict:
        levels = []
        for j, b in enumerate(self.levels):
            entry = {"index": j, "name": b.name, "derivation": b.derivation}
            if self.sups is not None:
                est = self.sups[j]
                entry.update({
                    "c_j": est.value,
                    "n_samples": est.n_samples,
                    "argmax": None if est.argmax is None
                    else [float(v) for v in est.argmax],
                    "unbounded_suspect": est.unbounded_suspect,
                })
            else:
                entry["c_j"] = None
            levels.append(entry)
        return {"r": self.r, "levels": levels,
                "derivation": self.levels[-1].derivation}


def build_chain(model: SdeModel, h: ScalarField, r: int, sup_estimator=None,
                probe_points=None, c1_tol: float = 1e-8) -> BarrierChain:
    """Build the chain of r nested generator fields starting at h.

    Levels below the top must have u-independent generators; this is checked
    on probe points and violation reports the offending level and probe.
    """
    if r < 1:
        raise ValueError("relative degree r must be at least 1")
    if probe_points is None:
        rng = np.random.default_rng(0)
        probe_points = rng.standard_normal((20, model.n))
    levels = [h]
    for j in range(r - 1):
        prev = levels[-1]
        for x in probe_points:
            gen = generator(model, prev, x)
            if np.max(np.abs(np.asarray(gen.c1, dtype=float))) > c1_tol:
                raise RelativeDegreeError(j, x)

        def next_fn(x, _prev=prev):
            return generator(model, _prev, x).c0

        levels.append(ScalarField.from_callable(
            next_fn, name=f"{h.name or 'b0'}:gen^{j + 1}"))
    sups = None
    if sup_estimator is not None:
        sups = tuple(sup_estimator(b) for b in levels)
    return BarrierChain(model=model, levels=tuple(levels), sups=sups)


@dataclass(frozen=True)
class SafetyBound:
    """Analytical worst-case lower bound on the stay-safe probability."""

    kind: str
    value: float
    inputs: dict

    def __post_init__(self):
        if not 0.0 <= self.value <= 1.0:
            raise ValueError("bound value must lie in [0, 1]")


def worst_case_bound(kind: str, *, h_xi: float = None, c: float = None,
                     T: float = None, k: float = None,
                     b_vals: Sequence[float] = None,
                     c_vals: Sequence[float] = None) -> SafetyBound:
    """Worst-case probability that the process stays in the safe set.

    kinds:
      "scbf":       h(xi)/c
      "szcbf":      (h(xi)/c) * exp(-c T)
      "high-order": prod_j b_j(xi)/c_j
    Values are clamped to [0, 1]; a negative level value is rejected with the
    offending level index.
    """
    if kind in ("scbf", "szcbf"):
        if h_xi is None or c is None:
            raise ValueError(f"{kind} bound needs h_xi and c")
        if c <= 0:
            raise ValueError("level-set supremum c must be positive")
        if h_xi < 0:
            raise InvalidInitialStateError(0, h_xi)
        value = h_xi / c
        inputs = {"h_xi": h_xi, "c": c}
        if kind == "szcbf":
            if T is None or T < 0:
                raise ValueError("szcbf bound needs horizon T >= 0")
            value *= math.exp(-c * T)
            inputs["T"] = T
            if k is not None:
                inputs["k"] = k
    elif kind == "high-order":
        if b_vals is None or c_vals is None or len(b_vals) != len(c_vals):
            raise ValueError("high-order bound needs matching b_vals, c_vals")
        value = 1.0
        inputs = {"b_vals": list(map(float, b_vals)),
                  "c_vals": list(map(float, c_vals))}
        for j, (b_j, c_j) in enumerate(zip(b_vals, c_vals)):
            if b_j < 0:
                raise InvalidInitialStateError(j, b_j)
            if c_j <= 0:
                raise ValueError(f"level-set supremum c_{j} must be positive")
            value *= b_j / c_j
    else:
        raise ValueError("kind must be one of scbf, szcbf, high-order")
    return SafetyBound(kind=kind, value=min(1.0, max(0.0, value)),
                       inputs=inputs)
