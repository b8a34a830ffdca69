"""Bundled benchmark systems and their barrier/Lyapunov fields.

Two systems ship as ground-truth oracles:

  "example1": planar system f = (-0.6 x1 - x2, x1^3), g = (0, x2)^T,
              diagonal noise; safe set is the unit disk h = 1 - x1^2 - x2^2.
  "acc":      adaptive cruise control with state (v, z) = (speed, gap),
              f = (-F_r(v)/M, v_f - v), g = (1/M, 0)^T, drag
              F_r(v) = f0 + f1 v + f2 v^2; barrier h = (z - D)^5.

Alongside the machine-differentiated path, hand-derived closed forms of the
generators are kept here as oracles, plus "transcribed" variants that
reproduce a circulated hand derivation verbatim; the transcribed forms are
known to differ from machine differentiation (see tests) and exist only for
comparison runs.
"""
from __future__ import annotations

import numpy as np

from .barrier import ScalarField
from .sde import SdeModel


class ConfigurationError(ValueError):
    pass


BENCHMARK_NAMES = ("example1", "acc")

ACC_DEFAULTS = {"f0": 0.1, "f1": 5.0, "f2": 0.25, "M": 1650.0,
                "v_f": 13.89, "v_d": 22.0, "D": 10.0}


def benchmark(name: str, sigma, **params) -> SdeModel:
    """Construct a benchmark SdeModel with diagonal diffusion sigma."""
    sigma = np.atleast_1d(np.asarray(sigma, dtype=float))
    if not np.all(np.isfinite(sigma)):
        raise ConfigurationError("sigma must be finite")
    if name == "example1":
        if params:
            raise ConfigurationError(f"example1 takes no params, got {params}")
        return _example1(sigma)
    if name == "acc":
        cfg = dict(ACC_DEFAULTS)
        unknown = set(params) - set(cfg)
        if unknown:
            raise ConfigurationError(f"unknown acc params: {sorted(unknown)}")
        cfg.update(params)
        return _acc(sigma, cfg)
    raise ConfigurationError(
        f"unknown benchmark {name!r}; valid names: {list(BENCHMARK_NAMES)}")


def _diag_diffusion(sigma):
    s1, s2 = float(sigma[0]), float(sigma[1])
    mat = np.array([[s1, 0.0], [0.0, s2]])
    return lambda x: mat


def _example1(sigma) -> SdeModel:
    if sigma.shape != (2,):
        raise ConfigurationError("example1 needs sigma of length 2")

    def drift(x):
        return np.array([-0.6 * x[0] - x[1], x[0] ** 3])

    def control_matrix(x):
        return np.array([[0.0], [x[1]]])

    return SdeModel(n=2, p=1, d=2, drift=drift, control_matrix=control_matrix,
                    diffusion=_diag_diffusion(sigma), label="example1")


def _acc(sigma, cfg) -> SdeModel:
    if sigma.shape != (2,):
        raise ConfigurationError("acc needs sigma of length 2")
    f0, f1, f2 = cfg["f0"], cfg["f1"], cfg["f2"]
    M, v_f = cfg["M"], cfg["v_f"]

    def drift(x):
        drag = f0 + f1 * x[0] + f2 * x[0] ** 2
        return np.array([-drag / M, v_f - x[0]])

    gmat = np.array([[1.0 / M], [0.0]])

    return SdeModel(n=2, p=1, d=2, drift=drift,
                    control_matrix=lambda x: gmat,
                    diffusion=_diag_diffusion(sigma), label="acc")


# -- barrier and Lyapunov fields ----------------------------------------


def example1_barrier() -> ScalarField:
    """Unit-disk barrier h = 1 - x1^2 - x2^2 with analytic derivatives."""
    return ScalarField.analytic(
        fn=lambda x: 1.0 - x[0] ** 2 - x[1] ** 2,
        grad_fn=lambda x: np.array([-2.0 * x[0], -2.0 * x[1]]),
        hess_fn=lambda x: np.array([[-2.0, 0.0], [0.0, -2.0]]),
        name="disk_h")


def acc_barrier(D: float = 10.0) -> ScalarField:
    """Gap barrier h = (z - D)^5 for the acc system, state x = (v, z)."""
    return ScalarField.analytic(
        fn=lambda x: (x[1] - D) ** 5,
        grad_fn=lambda x: np.array([0.0 * x[0], 5.0 * (x[1] - D) ** 4]),
        hess_fn=lambda x: np.array([[0.0 * x[0], 0.0],
                                    [0.0, 20.0 * (x[1] - D) ** 3]]),
        name="gap_h")


def acc_clf(v_d: float = 22.0) -> ScalarField:
    """Speed-tracking Lyapunov field V = (v - v_d)^2."""
    return ScalarField.analytic(
        fn=lambda x: (x[0] - v_d) ** 2,
        grad_fn=lambda x: np.array([2.0 * (x[0] - v_d), 0.0 * x[1]]),
        hess_fn=lambda x: np.array([[2.0, 0.0], [0.0, 0.0]]),
        name="speed_V")


# -- closed-form generator oracles --------------------------------------


def example1_generator_derived(x, u, sigma) -> float:
    """Hand-derived generator of disk_h along example1 (independent oracle)."""
    x1, x2 = float(x[0]), float(x[1])
    s1, s2 = float(sigma[0]), float(sigma[1])
    u = float(np.atleast_1d(u)[0])
    return (1.2 * x1 ** 2 + 2.0 * x1 * x2 - 2.0 * x1 ** 3 * x2
            - 2.0 * x2 ** 2 * u - (s1 ** 2 + s2 ** 2))


def example1_generator_transcribed(x, u, sigma) -> float:
    """Transcribed comparison form of the disk_h generator.

    Kept verbatim for comparison runs; its cross term (x1 x2 instead of
    2 x1 x2) and noise term (2 sigma2^2 instead of sigma1^2 + sigma2^2)
    disagree with machine differentiation.
    """
    x1, x2 = float(x[0]), float(x[1])
    s2 = float(sigma[1])
    u = float(np.atleast_1d(u)[0])
    return (1.2 * x1 ** 2 + x1 * x2 - 2.0 * x1 ** 3 * x2
            - 2.0 * x2 ** 2 * u - (s2 ** 2 + s2 ** 2))


def acc_b1_derived(x, sigma, D: float = 10.0, v_f: float = 13.89) -> float:
    """Hand-derived first chain level for acc: A(gap_h), u-independent."""
    v, z = float(x[0]), float(x[1])
    s2 = float(sigma[1])
    return (5.0 * (z - D) ** 4 * (v_f - v)
            + 10.0 * s2 ** 2 * (z - D) ** 3)


def acc_b1_transcribed(x, D: float = 10.0, v_f: float = 13.89) -> float:
    """Transcribed comparison form of the first acc chain level.

    Omits the second-order noise correction 10 sigma2^2 (z - D)^3 present in
    machine differentiation.
    """
    v, z = float(x[0]), float(x[1])
    return 5.0 * (z - D) ** 4 * (v_f - v)


def acc_b2_derived(x, u, sigma, f0: float = 0.1, f1: float = 5.0,
                   f2: float = 0.25, M: float = 1650.0, D: float = 10.0,
                   v_f: float = 13.89) -> float:
    """Hand-derived generator of the first acc chain level (with control)."""
    v, z = float(x[0]), float(x[1])
    s2 = float(sigma[1])
    u = float(np.atleast_1d(u)[0])
    drag = f0 + f1 * v + f2 * v ** 2
    return (5.0 * (z - D) ** 4 * drag / M
            - 5.0 * (z - D) ** 4 * u / M
            + 20.0 * (z - D) ** 3 * (v_f - v) ** 2
            + 60.0 * s2 ** 2 * (z - D) ** 2 * (v_f - v)
            + 30.0 * s2 ** 4 * (z - D))


def acc_b2_transcribed(x, u, sigma, f0: float = 0.1, f1: float = 5.0,
                       f2: float = 0.25, M: float = 1650.0, D: float = 10.0,
                       v_f: float = 13.89) -> float:
    """Transcribed comparison form of the second acc chain level.

    Kept verbatim for comparison runs; its control coefficient
    (-(z - D)^4 / M instead of -5 (z - D)^4 / M) and noise term
    (120 (z - D)(sigma1^2 + sigma2^2)) disagree with machine differentiation.
    """
    v, z = float(x[0]), float(x[1])
    s1, s2 = float(sigma[0]), float(sigma[1])
    u = float(np.atleast_1d(u)[0])
    drag = f0 + f1 * v + f2 * v ** 2
    return (5.0 * (z - D) ** 4 * drag / M
            + 20.0 * (z - D) ** 3 * (v_f - v) ** 2
            - (z - D) ** 4 * u / M
            + 120.0 * (z - D) * (s1 ** 2 + s2 ** 2))
