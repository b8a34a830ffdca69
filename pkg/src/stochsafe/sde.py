"""Control-affine SDE models and Euler-Maruyama simulation.

Dynamics have the form

    dX = (f(X) + g(X) u) dt + sigma(X) dW

with state dimension n, control dimension p and noise dimension d.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

Policy = Callable[[np.ndarray], np.ndarray]


class IntegrationDivergedError(RuntimeError):
    """A step produced a non-finite state entry."""

    def __init__(self, entry: int, step: Optional[int] = None):
        self.entry = entry
        self.step = step
        where = f" at step {step}" if step is not None else ""
        super().__init__(f"non-finite state entry x[{entry}]{where}")


@dataclass(frozen=True)
class SdeModel:
    """Immutable control-affine SDE.

    drift, control_matrix and diffusion are callables of the state returning
    arrays of shape (n,), (n, p) and (n, d). They must accept any indexable
    state whose entries support arithmetic, so the same model can be fed
    dual numbers for differentiation.
    """

    n: int
    p: int
    d: int
    drift: Callable
    control_matrix: Callable
    diffusion: Callable
    label: str = ""

    def __post_init__(self):
        for name in ("n", "p", "d"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be a positive integer")

    def validate_at(self, x: np.ndarray) -> None:
        """Check that all fields evaluate finite with the declared shapes."""
        x = np.asarray(x, dtype=float)
        for name, fn, shape in (
            ("drift", self.drift, (self.n,)),
            ("control_matrix", self.control_matrix, (self.n, self.p)),
            ("diffusion", self.diffusion, (self.n, self.d)),
        ):
            val = np.asarray(fn(x), dtype=float)
            if val.shape != shape:
                raise ValueError(f"{name} returned shape {val.shape}, expected {shape}")
            if not np.all(np.isfinite(val)):
                raise ValueError(f"{name} returned non-finite values at {x!r}")


@dataclass(frozen=True)
class Trajectory:
    """A simulated path: N+1 states on a uniform dt grid, N controls."""

    dt: float
    times: np.ndarray
    states: np.ndarray
    controls: np.ndarray
    seed: int

    @property
    def n_steps(self) -> int:
        return len(self.controls)

    def final_state(self) -> np.ndarray:
        return self.states[-1]


class NoiseStream:
    """Seeded Brownian-increment source; same seed, same increments."""

    def __init__(self, seed, dimension: int):
        self.seed = seed
        self.dimension = dimension
        self._rng = np.random.default_rng(seed)

    def increments(self, n_steps: int, dt: float) -> np.ndarray:
        """n_steps rows of N(0, dt * I_d) increments."""
        return self._rng.normal(0.0, np.sqrt(dt), size=(n_steps, self.dimension))


def trial_rng(master_seed: int, trial_index: int) -> np.random.Generator:
    """Independent per-trial stream derived from (master_seed, trial_index)."""
    ss = np.random.SeedSequence(entropy=master_seed, spawn_key=(trial_index,))
    return np.random.default_rng(ss)


def em_step(model: SdeModel, x: np.ndarray, u: np.ndarray, dt: float,
            dW: np.ndarray) -> np.ndarray:
    """One Euler-Maruyama step x + (f + g u) dt + sigma dW.

    The input state is not modified.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    x = np.asarray(x, dtype=float)
    u = np.atleast_1d(np.asarray(u, dtype=float))
    dW = np.asarray(dW, dtype=float)
    if dW.shape != (model.d,):
        raise ValueError(f"dW must have length {model.d}, got shape {dW.shape}")
    f = np.asarray(model.drift(x), dtype=float)
    g = np.asarray(model.control_matrix(x), dtype=float)
    s = np.asarray(model.diffusion(x), dtype=float)
    out = x + (f + g @ u) * dt + s @ dW
    bad = np.flatnonzero(~np.isfinite(out))
    if bad.size:
        raise IntegrationDivergedError(int(bad[0]))
    return out


def simulate(model: SdeModel, x0: np.ndarray, policy: Policy, dt: float,
             n_steps: int, seed) -> Trajectory:
    """Iterate em_step under a state-feedback policy with seeded noise."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    if n_steps < 1:
        raise ValueError("n_steps must be at least 1")
    x0 = np.asarray(x0, dtype=float)
    model.validate_at(x0)
    stream = NoiseStream(seed, model.d)
    dWs = stream.increments(n_steps, dt)
    states = np.empty((n_steps + 1, model.n))
    controls = np.empty((n_steps, model.p))
    states[0] = x0
    x = x0
    for i in range(n_steps):
        u = np.atleast_1d(np.asarray(policy(x), dtype=float))
        try:
            x = em_step(model, x, u, dt, dWs[i])
        except IntegrationDivergedError as err:
            raise IntegrationDivergedError(err.entry, step=i) from None
        states[i + 1] = x
        controls[i] = u
    times = dt * np.arange(n_steps + 1)
    seed_val = seed if isinstance(seed, int) else -1
    return Trajectory(dt=dt, times=times, states=states, controls=controls,
                      seed=seed_val)


def zero_policy(p: int) -> Policy:
    u0 = np.zeros(p)
    return lambda x: u0


def constant_policy(u) -> Policy:
    u = np.atleast_1d(np.asarray(u, dtype=float))
    return lambda x: u


def write_trajectory_csv(traj: Trajectory, path) -> None:
    """Write a trajectory as CSV with header t,x1..xn,u1..up.

    N+1 rows are written; the final row repeats the last control since the
    trajectory holds one more state than control. Floats carry 17 significant
    digits.
    """
    n = traj.states.shape[1]
    p = traj.controls.shape[1]
    header = (["t"] + [f"x{i + 1}" for i in range(n)]
              + [f"u{j + 1}" for j in range(p)])
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for i in range(len(traj.times)):
            u = traj.controls[min(i, len(traj.controls) - 1)]
            row = [traj.times[i], *traj.states[i], *u]
            writer.writerow([f"{v:.17g}" for v in row])
