"""Diffusion-scale estimation from model residuals.

One-step residuals xi_i = x_{i+1} - x_i - f_hat(x_i) dt - g_hat(x_i) u_i dt
are collected per output channel, normalized by sqrt(dt) so their scale
matches the continuous-time diffusion, and fed to a MAP estimate under an
inverse-gamma prior on sigma:

    log-posterior(sigma) = -(N + alpha) log sigma - S / (2 sigma^2)
                           - beta / sigma  (+ const),  S = sum xi_i^2

whose stationary point has the closed form
sigma_hat = (beta + sqrt(beta^2 + 4 (N + alpha) S)) / (2 (N + alpha)).
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .benchmarks import ConfigurationError
from .sde import IntegrationDivergedError, Policy, SdeModel, em_step

NORMALIZATION_MODES = ("raw", "per-sqrt-dt")


@dataclass(frozen=True)
class ResidualDataset:
    """Per-channel residuals from rollouts under a fixed fitted model."""

    xi: np.ndarray            # (n_channels, N)
    dt: float
    normalization: str
    provenance: str = ""      # hash of the (f_hat, g_hat) pair's origin
    truncated_rollouts: int = 0

    @property
    def n_channels(self) -> int:
        return self.xi.shape[0]

    @property
    def n_residuals(self) -> int:
        return self.xi.shape[1]


def collect_residuals(blackbox: SdeModel, f_hat: Callable, g_hat: Callable,
                      policy: Policy, x0s, dt: float, n_steps: int, seed: int,
                      normalization: str = "per-sqrt-dt",
                      provenance: str = "") -> ResidualDataset:
    """Roll out the blackbox under the policy and difference against the fit.

    Divergent rollouts are truncated at the failing step and counted; the
    residuals gathered before the failure are kept.
    """
    if dt <= 0:
        raise ConfigurationError("dt must be positive")
    if n_steps < 1:
        raise ConfigurationError("n_steps must be at least 1")
    if normalization not in NORMALIZATION_MODES:
        raise ConfigurationError(
            f"normalization must be one of {NORMALIZATION_MODES}")
    x0s = np.atleast_2d(np.asarray(x0s, dtype=float))
    chunks = []
    truncated = 0
    for i, x0 in enumerate(x0s):
        rng = np.random.default_rng(
            np.random.SeedSequence(entropy=seed, spawn_key=(i,)))
        dWs = rng.normal(0.0, np.sqrt(dt), size=(n_steps, blackbox.d))
        x = x0
        rows = []
        for step in range(n_steps):
            u = np.atleast_1d(np.asarray(policy(x), dtype=float))
            try:
                x_next = em_step(blackbox, x, u, dt, dWs[step])
            except IntegrationDivergedError:
                truncated += 1
                break
            pred = (np.asarray(f_hat(x), dtype=float) * dt
                    + np.asarray(g_hat(x), dtype=float) @ u * dt)
            rows.append(x_next - x - pred)
            x = x_next
        if rows:
            chunks.append(np.asarray(rows))
    if not chunks:
        raise ConfigurationError("no residuals collected (all rollouts diverged)")
    xi = np.concatenate(chunks, axis=0).T  # (n_channels, N)
    if normalization == "per-sqrt-dt":
        xi = xi / np.sqrt(dt)
    return ResidualDataset(xi=xi, dt=dt, normalization=normalization,
                           provenance=provenance,
                           truncated_rollouts=truncated)


def write_residual_csv(data: ResidualDataset, path) -> None:
    meta = {"dt": data.dt, "normalization": data.normalization,
            "provenance": data.provenance,
            "truncated_rollouts": data.truncated_rollouts}
    with open(path, "w", newline="") as fh:
        fh.write("# " + json.dumps(meta, sort_keys=True) + "\n")
        writer = csv.writer(fh)
        writer.writerow([f"xi{i + 1}" for i in range(data.n_channels)])
        for row in data.xi.T:
            writer.writerow([f"{v:.17g}" for v in row])


def read_residual_csv(path) -> ResidualDataset:
    with open(path) as fh:
        first = fh.readline()
        if not first.startswith("#"):
            raise ConfigurationError(f"{path} has no metadata line")
        meta = json.loads(first[1:])
        rows = list(csv.reader(fh))
    vals = np.array([[float(v) for v in row] for row in rows[1:]])
    return ResidualDataset(xi=vals.T, dt=float(meta["dt"]),
                           normalization=meta["normalization"],
                           provenance=meta.get("provenance", ""),
                           truncated_rollouts=int(meta["truncated_rollouts"]))


@dataclass(frozen=True)
class DiffusionPosterior:
    """Inverse-gamma MAP estimate with a normalized grid posterior."""

    alpha: float
    beta: float
    sigma_hat: float
    grid_sigmas: np.ndarray
    grid_masses: np.ndarray
    S: float
    n_residuals: int
    channel: int = 0

    def log_posterior(self, sigma: float) -> float:
        """Log posterior kernel, up to an additive constant."""
        N = self.n_residuals
        return (-(N + self.alpha) * np.log(sigma)
                - self.S / (2.0 * sigma ** 2) - self.beta / sigma)


def map_sigma(data, alpha: float, beta: float, channel: int = 0,
              grid_cells: int = 4096, span: float = 10.0) -> DiffusionPosterior:
    """Closed-form MAP of sigma plus a log-spaced grid posterior.

    `data` is a ResidualDataset (channel selected by index) or a plain 1-D
    residual array. The grid spans [sigma_hat/span, sigma_hat*span].
    """
    if alpha <= 0 or beta <= 0:
        raise ConfigurationError("alpha and beta must be positive")
    if isinstance(data, ResidualDataset):
        xi = data.xi[channel]
    else:
        xi = np.asarray(data, dtype=float).ravel()
    N = len(xi)
    if N < 1:
        raise ConfigurationError("need at least one residual")
    S = float(xi @ xi)
    denom = 2.0 * (N + alpha)
    sigma_hat = (beta + np.sqrt(beta ** 2 + 2.0 * denom * S)) / denom

    sigmas = np.geomspace(sigma_hat / span, sigma_hat * span, grid_cells)
    log_dens = (-(N + alpha) * np.log(sigmas) - S / (2.0 * sigmas ** 2)
                - beta / sigmas)
    edges = np.empty(grid_cells + 1)
    edges[1:-1] = np.sqrt(sigmas[:-1] * sigmas[1:])
    edges[0] = sigmas[0] ** 2 / edges[1]
    edges[-1] = sigmas[-1] ** 2 / edges[-2]
    widths = np.diff(edges)
    masses = np.exp(log_dens - log_dens.max()) * widths
    masses /= masses.sum()
    return DiffusionPosterior(alpha=alpha, beta=beta, sigma_hat=sigma_hat,
                              grid_sigmas=sigmas, grid_masses=masses, S=S,
                              n_residuals=N, channel=channel)


def sample_sigma_posterior(post: DiffusionPosterior, n: int,
                           seed: int) -> np.ndarray:
    """Inverse-CDF samples of the grid posterior atoms; seeded, exact."""
    if n <= 0:
        raise ConfigurationError("n must be positive")
    rng = np.random.default_rng(seed)
    cdf = np.cumsum(post.grid_masses)
    cdf[-1] = 1.0
    idx = np.searchsorted(cdf, rng.uniform(size=n), side="right")
    return post.grid_sigmas[idx]


def write_posterior_csv(post: DiffusionPosterior, path) -> None:
    """Grid posterior as a two-column histogram table."""
    meta = {"alpha": post.alpha, "beta": post.beta,
            "sigma_hat": post.sigma_hat, "S": post.S,
            "n_residuals": post.n_residuals, "channel": post.channel}
    with open(path, "w", newline="") as fh:
        fh.write("# " + json.dumps(meta, sort_keys=True) + "\n")
        writer = csv.writer(fh)
        writer.writerow(["sigma", "mass"])
        for s, m in zip(post.grid_sigmas, post.grid_masses):
            writer.writerow([f"{s:.17g}", f"{m:.17g}"])
