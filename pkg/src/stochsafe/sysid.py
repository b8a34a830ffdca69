"""Drift identification from one-step increments via Bayesian regression.

Targets come from K-replication averaged increments under two controls.
With mean increments dx1, dx2 under u1, u2 the eliminated targets are

    y_f = (dx1 u2 - dx2 u1) / ((u2 - u1) dt)
    y_g = (dx1 - dx2) / ((u1 - u2) dt)

for a single control channel. A sequential variant (estimate f with u1,
then g with u2 using an f estimate) hides behind the same interface.
"""
from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence

import numpy as np

from .benchmarks import ConfigurationError
from .sde import SdeModel, em_step


class IllPosedError(RuntimeError):
    """Normal matrix is rank deficient and no prior regularizes it."""


class DegeneratePairError(ValueError):
    """Control pair too close for elimination."""


@dataclass(frozen=True)
class Basis:
    """Fixed, ordered set of named feature functions of the state."""

    names: tuple
    fns: tuple

    @property
    def M(self) -> int:
        return len(self.fns)

    def phi(self, x):
        """Feature vector at one state; entries may be dual numbers."""
        return np.array([fn(x) for fn in self.fns])

    def design_matrix(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        return np.array([[fn(x) for fn in self.fns] for x in X])


_POLY_2D = {
    "1": lambda x: 1.0,
    "x1": lambda x: x[0],
    "x2": lambda x: x[1],
    "x1^2": lambda x: x[0] ** 2,
    "x2^2": lambda x: x[1] ** 2,
    "x1*x2": lambda x: x[0] * x[1],
    "x1^3": lambda x: x[0] ** 3,
    "x2^3": lambda x: x[1] ** 3,
}


def polynomial_basis_2d() -> Basis:
    """Default polynomial features [1, x1, x2, x1^2, x2^2, x1*x2, x1^3, x2^3]."""
    return Basis(names=tuple(_POLY_2D), fns=tuple(_POLY_2D.values()))


def basis_from_names(names: Sequence[str]) -> Basis:
    """Rebuild a basis from serialized feature names."""
    try:
        fns = tuple(_POLY_2D[n] for n in names)
    except KeyError as err:
        raise ConfigurationError(f"unknown basis feature {err.args[0]!r}")
    return Basis(names=tuple(names), fns=fns)


@dataclass(frozen=True)
class DriftDataset:
    """Per-probe elimination targets for f and g."""

    X: np.ndarray        # (N, n) probes
    Y_f: np.ndarray      # (N, n)
    Y_g: np.ndarray      # (N, n, p)
    K: int
    dt: float
    u_pair: tuple
    scheme: str
    seed: int

    def content_hash(self) -> str:
        hasher = hashlib.sha256()
        for arr in (self.X, self.Y_f, self.Y_g):
            hasher.update(np.ascontiguousarray(arr).tobytes())
        hasher.update(f"{self.K},{self.dt},{self.u_pair},{self.scheme}".encode())
        return hasher.hexdigest()[:16]


def collect_drift_data(blackbox: SdeModel, x_probes, u1, u2, K: int,
                       dt: float, seed: int, scheme: str = "paired",
                       f_hat: Optional[Callable] = None) -> DriftDataset:
    """Collect elimination targets by sampling one-step increments.

    The blackbox is used strictly as a step sampler; its drift and control
    fields are never read. Per-probe noise streams derive from `seed`.
    """
    if K < 1:
        raise ConfigurationError("K must be at least 1")
    if dt <= 0:
        raise ConfigurationError("dt must be positive")
    if scheme not in ("paired", "sequential"):
        raise ConfigurationError("scheme must be 'paired' or 'sequential'")
    if blackbox.p != 1:
        raise ConfigurationError("elimination supports a single control channel")
    X = np.atleast_2d(np.asarray(x_probes, dtype=float))
    u1v = float(np.atleast_1d(u1)[0])
    u2v = float(np.atleast_1d(u2)[0])
    if abs(u2v - u1v) < 1e-9:
        raise DegeneratePairError(
            f"|u2 - u1| = {abs(u2v - u1v):.2e} is below 1e-9")

    def mean_increment(x, u, rng):
        dWs = rng.normal(0.0, np.sqrt(dt), size=(K, blackbox.d))
        acc = np.zeros(blackbox.n)
        for k in range(K):
            acc += em_step(blackbox, x, np.array([u]), dt, dWs[k]) - x
        return acc / K

    N = len(X)
    Y_f = np.empty((N, blackbox.n))
    Y_g = np.empty((N, blackbox.n, 1))
    for i, x in enumerate(X):
        rng1 = np.random.default_rng(
            np.random.SeedSequence(entropy=seed, spawn_key=(i, 0)))
        rng2 = np.random.default_rng(
            np.random.SeedSequence(entropy=seed, spawn_key=(i, 1)))
        dx1 = mean_increment(x, u1v, rng1)
        dx2 = mean_increment(x, u2v, rng2)
        if scheme == "paired":
            Y_f[i] = (dx1 * u2v - dx2 * u1v) / ((u2v - u1v) * dt)
            Y_g[i, :, 0] = (dx1 - dx2) / ((u1v - u2v) * dt)
        else:
            if abs(u2v) < 1e-9:
                raise DegeneratePairError("sequential scheme needs |u2| >= 1e-9")
            f_est = dx1 / dt if f_hat is None else np.asarray(f_hat(x),
                                                             dtype=float)
            Y_f[i] = dx1 / dt
            Y_g[i, :, 0] = (dx2 / dt - f_est) / u2v
    return DriftDataset(X=X, Y_f=Y_f, Y_g=Y_g, K=K, dt=dt,
                        u_pair=(u1v, u2v), scheme=scheme, seed=seed)


def write_drift_csv(data: DriftDataset, path) -> None:
    """Persist a dataset; metadata rides in a leading comment line."""
    n = data.X.shape[1]
    meta = {"K": data.K, "dt": data.dt, "u1": data.u_pair[0],
            "u2": data.u_pair[1], "scheme": data.scheme, "seed": data.seed}
    header = ([f"x{i + 1}" for i in range(n)]
              + [f"yf{i + 1}" for i in range(n)]
              + [f"yg{i + 1}_1" for i in range(n)])
    with open(path, "w", newline="") as fh:
        fh.write("# " + json.dumps(meta, sort_keys=True) + "\n")
        writer = csv.writer(fh)
        writer.writerow(header)
        for i in range(len(data.X)):
            row = [*data.X[i], *data.Y_f[i], *data.Y_g[i, :, 0]]
            writer.writerow([f"{v:.17g}" for v in row])


def read_drift_csv(path) -> DriftDataset:
    with open(path) as fh:
        first = fh.readline()
        if not first.startswith("#"):
            raise ConfigurationError(f"{path} has no metadata line")
        meta = json.loads(first[1:])
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    n = sum(1 for name in header if name.startswith("x"))
    vals = np.array([[float(v) for v in row] for row in body])
    return DriftDataset(X=vals[:, :n], Y_f=vals[:, n:2 * n],
                        Y_g=vals[:, 2 * n:].reshape(-1, n, 1),
                        K=int(meta["K"]), dt=float(meta["dt"]),
                        u_pair=(meta["u1"], meta["u2"]),
                        scheme=meta["scheme"], seed=int(meta["seed"]))


@dataclass(frozen=True)
class BlrPosterior:
    """Gaussian posterior over basis weights for one scalar output."""

    theta: np.ndarray
    Sigma: np.ndarray
    noise_var: float
    basis: Optional[Basis] = None
    provenance: str = ""

    def predict(self, x):
        phi = self.basis.phi(x)
        mean = self.theta @ phi
        var = float(phi @ self.Sigma @ phi)
        return mean, var

    def __call__(self, x):
        return self.theta @ self.basis.phi(x)


def fit_blr(Phi_rows, Y, Sigma0, noise_var: float,
            basis: Optional[Basis] = None,
            provenance: str = "") -> BlrPosterior:
    """Closed-form Gaussian posterior for weights of Phi theta = Y.

    Posterior mean solves (Phi^T Phi + noise_var * Sigma0^{-1}) theta =
    Phi^T Y and the covariance is noise_var times that matrix inverse; both
    are computed through a factorization-based solve, never an explicit
    inverse. noise_var is the effective per-target variance (already divided
    by the replication count of the averaged targets).
    """
    Phi = np.atleast_2d(np.asarray(Phi_rows, dtype=float))
    Y = np.asarray(Y, dtype=float)
    if noise_var < 0:
        raise ConfigurationError("noise_var must be nonnegative")
    N, M = Phi.shape
    if N < 1:
        raise ConfigurationError("need at least one sample row")

    normal = Phi.T @ Phi
    if noise_var == 0.0:
        eigs = np.linalg.eigvalsh(normal)
        if eigs[0] <= 1e-12 * max(eigs[-1], 1.0):
            raise IllPosedError(
                "normal matrix is rank deficient with noise_var = 0; "
                "supply a positive noise_var with a prior Sigma0")
        A = normal
    else:
        Sigma0 = np.asarray(Sigma0, dtype=float)
        if Sigma0.ndim == 0:
            prior_inv = (noise_var / float(Sigma0)) * np.eye(M)
        elif Sigma0.ndim == 1:
            prior_inv = np.diag(noise_var / Sigma0)
        else:
            prior_inv = noise_var * np.linalg.solve(Sigma0, np.eye(M))
        A = normal + prior_inv
    A = (A + A.T) * 0.5

    theta = np.linalg.solve(A, Phi.T @ Y)
    if noise_var == 0.0:
        Sigma = np.zeros((M, M))
    else:
        Sigma = noise_var * np.linalg.solve(A, np.eye(M))
        Sigma = (Sigma + Sigma.T) * 0.5
    return BlrPosterior(theta=theta, Sigma=Sigma, noise_var=float(noise_var),
                        basis=basis, provenance=provenance)


def fit_drift(data: DriftDataset, basis: Basis, Sigma0, noise_var: float):
    """Fit one posterior per f channel and per g entry, sharing the basis."""
    Phi = basis.design_matrix(data.X)
    prov = data.content_hash()
    n = data.Y_f.shape[1]
    p = data.Y_g.shape[2]
    posts_f = [fit_blr(Phi, data.Y_f[:, i], Sigma0, noise_var, basis=basis,
                       provenance=prov) for i in range(n)]
    posts_g = [[fit_blr(Phi, data.Y_g[:, i, k], Sigma0, noise_var,
                        basis=basis, provenance=prov) for k in range(p)]
               for i in range(n)]
    return posts_f, posts_g


def predict_drift(posts_f: List[BlrPosterior],
                  posts_g: List[List[BlrPosterior]], x):
    """Posterior-mean drift fields and predictive variances at x."""
    f_hat = np.array([p.predict(x)[0] for p in posts_f])
    var_f = np.array([p.predict(x)[1] for p in posts_f])
    g_hat = np.array([[q.predict(x)[0] for q in row] for row in posts_g])
    var_g = np.array([[q.predict(x)[1] for q in row] for row in posts_g])
    return f_hat, g_hat, var_f, var_g


def learned_model(posts_f: List[BlrPosterior],
                  posts_g: List[List[BlrPosterior]], sigma,
                  label: str = "learned") -> SdeModel:
    """Wrap fitted posterior means as an SdeModel with diagonal diffusion.

    The callables evaluate the shared basis generically, so the learned
    model supports the same differentiation paths as a hand-written one.
    """
    n = len(posts_f)
    p = len(posts_g[0])
    basis = posts_f[0].basis
    thetas_f = [post.theta for post in posts_f]
    thetas_g = [[q.theta for q in row] for row in posts_g]
    sigma = np.atleast_1d(np.asarray(sigma, dtype=float))
    smat = np.diag(sigma)

    def drift(x):
        phi = basis.phi(x)
        return np.array([th @ phi for th in thetas_f])

    def control_matrix(x):
        phi = basis.phi(x)
        return np.array([[th @ phi for th in row] for row in thetas_g])

    return SdeModel(n=n, p=p, d=len(sigma), drift=drift,
                    control_matrix=control_matrix,
                    diffusion=lambda x: smat, label=label)


def save_posterior(post: BlrPosterior, path) -> None:
    doc = {
        "basis": list(post.basis.names) if post.basis else None,
        "theta": [float(v) for v in post.theta],
        "Sigma": [float(v) for v in np.asarray(post.Sigma).ravel()],
        "noise_var": post.noise_var,
        "provenance": post.provenance,
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_posterior(path) -> BlrPosterior:
    with open(path) as fh:
        doc = json.load(fh)
    theta = np.array(doc["theta"])
    M = len(theta)
    basis = basis_from_names(doc["basis"]) if doc["basis"] else None
    return BlrPosterior(theta=theta,
                        Sigma=np.array(doc["Sigma"]).reshape(M, M),
                        noise_var=float(doc["noise_var"]), basis=basis,
                        provenance=doc.get("provenance", ""))


def pilot_noise_variance(blackbox: SdeModel, x, u1, u2, K: int, dt: float,
                         seed: int) -> float:
    """Crude effective target variance from a pilot batch of increments.

    Estimates the diffusion scale from K one-step increments at one probe,
    then scales it to the variance of the eliminated targets,
    (u1^2 + u2^2) sigma^2 / ((u2 - u1)^2 K dt). Used as the default BLR
    noise_var; note the circularity (the diffusion is only estimated later)
    is inherent to fitting before sigma is known.
    """
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed,
                                                       spawn_key=(0x9107,)))
    x = np.asarray(x, dtype=float)
    incs = np.empty((K, blackbox.n))
    dWs = rng.normal(0.0, np.sqrt(dt), size=(K, blackbox.d))
    for k in range(K):
        incs[k] = em_step(blackbox, x, np.zeros(blackbox.p), dt, dWs[k]) - x
    sigma2 = float(np.mean(np.var(incs, axis=0, ddof=1))) / dt
    u1v = float(np.atleast_1d(u1)[0])
    u2v = float(np.atleast_1d(u2)[0])
    return (u1v ** 2 + u2v ** 2) * sigma2 / ((u2v - u1v) ** 2 * K * dt)
