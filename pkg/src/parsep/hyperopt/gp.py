"""Gaussian-process regression with a Matern-5/2 ARD kernel.

Targets are standardized internally (empirical mean and standard deviation);
``mean`` and ``std`` returned by :func:`gp_predict` are in the original units.
Kernel hyperparameters live in log space: per-dimension length scales, the
signal variance and the noise variance.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_solve, solve_triangular
from scipy.linalg.lapack import dpotrf, dpotri, dpotrs

from ..errors import NumericalError, ShapeError
from . import lbfgs

SQRT5 = np.sqrt(5.0)
JITTER = 1e-10
MAX_JITTER = 1e-4
LOG_LENGTH_BOUNDS = (np.log(1e-2), np.log(1e2))
LOG_SIGNAL_BOUNDS = (np.log(1e-6), np.log(1e2))
LOG_NOISE_BOUNDS = (np.log(1e-8), np.log(1.0))


@dataclass(frozen=True)
class Theta:
    lengthscales: np.ndarray
    signal_var: float
    noise_var: float

    def to_log(self) -> np.ndarray:
        return np.concatenate([np.log(self.lengthscales), [np.log(self.signal_var), np.log(self.noise_var)]])

    @classmethod
    def from_log(cls, v: np.ndarray) -> "Theta":
        v = np.asarray(v, dtype=np.float64)
        return cls(np.exp(v[:-2]), float(np.exp(v[-2])), float(np.exp(v[-1])))


@dataclass(frozen=True)
class GPState:
    X: np.ndarray
    y: np.ndarray
    theta: Theta
    y_mean: float
    y_scale: float
    chol: np.ndarray
    alpha: np.ndarray
    jitter: float
    lml: float
    lml_traces: list = field(default_factory=list)


def _scaled_diffs(A: np.ndarray, B: np.ndarray, ls: np.ndarray) -> np.ndarray:
    return (A[:, None, :] - B[None, :, :]) / ls


def matern52(A: np.ndarray, B: np.ndarray, theta: Theta) -> np.ndarray:
    r = np.sqrt(np.sum(_scaled_diffs(A, B, theta.lengthscales) ** 2, axis=-1))
    return theta.signal_var * (1.0 + SQRT5 * r + 5.0 / 3.0 * r * r) * np.exp(-SQRT5 * r)


def _chol(K: np.ndarray) -> np.ndarray:
    L, info = dpotrf(K, lower=1, clean=1, overwrite_a=0)
    if info != 0:
        raise np.linalg.LinAlgError("not positive definite")
    return L


def _factor(K: np.ndarray) -> tuple[np.ndarray, float]:
    """Cholesky factor of K, adding diagonal jitter only if K is not numerically PD."""
    try:
        return _chol(K), 0.0
    except np.linalg.LinAlgError:
        pass
    jitter = JITTER
    while jitter <= MAX_JITTER:
        Kj = K.copy()
        Kj.flat[::len(K) + 1] += jitter
        try:
            return _chol(Kj), jitter
        except np.linalg.LinAlgError:
            jitter *= 10.0
    raise NumericalError("kernel matrix is not positive definite even with maximal jitter")


def _evidence(log_theta: np.ndarray, sq: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    n, d = len(y), sq.shape[-1]
    inv_ls2 = np.exp(-2.0 * log_theta[:d])
    sig, noise = np.exp(log_theta[d]), np.exp(log_theta[d + 1])
    D2 = sq * inv_ls2
    r = np.sqrt(D2.sum(axis=-1))
    e = np.exp(-SQRT5 * r)
    base = (1.0 + SQRT5 * r) * e
    Kf = sig * (base + 5.0 / 3.0 * r * r * e)
    K = Kf.copy()
    K.flat[::n + 1] += noise
    L, _ = _factor(K)
    alpha, _ = dpotrs(L, y, lower=1)
    Kinv, _ = dpotri(L, lower=1)
    Kinv = Kinv + Kinv.T - np.diag(np.diag(Kinv))  # dpotri fills the lower triangle only
    lml = -0.5 * y @ alpha - np.log(np.diag(L)).sum() - 0.5 * n * np.log(2 * np.pi)
    W = np.outer(alpha, alpha) - Kinv
    g_ls = 0.5 * ((W * (sig * 5.0 / 3.0) * base).reshape(-1) @ D2.reshape(-1, d))
    g = np.empty(d + 2)
    g[:d] = g_ls
    g[d] = 0.5 * np.sum(W * Kf)
    g[d + 1] = 0.5 * noise * np.trace(W)
    return float(lml), g


def log_marginal_likelihood(log_theta: np.ndarray, X: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    """Log evidence of standardized targets ``y`` and its gradient in log space."""
    diff = X[:, None, :] - X[None, :, :]
    return _evidence(log_theta, diff * diff, y)


def _bounds(d: int) -> tuple[np.ndarray, np.ndarray]:
    lo = np.array([LOG_LENGTH_BOUNDS[0]] * d + [LOG_SIGNAL_BOUNDS[0], LOG_NOISE_BOUNDS[0]])
    hi = np.array([LOG_LENGTH_BOUNDS[1]] * d + [LOG_SIGNAL_BOUNDS[1], LOG_NOISE_BOUNDS[1]])
    return lo, hi


def gp_fit(X: np.ndarray, y: np.ndarray, seed: int | np.random.Generator = 0, n_restarts: int = 8,
           theta: Theta | None = None, max_iter: int = 30, warm_start: Theta | None = None) -> GPState:
    """Condition a GP on (X, y).

    Without ``theta`` the kernel hyperparameters maximize the log marginal
    likelihood, via bounded L-BFGS from ``n_restarts`` starts: ``warm_start``
    (or a default setting) first, the rest uniform in the log-bounds.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if len(X) != len(y):
        raise ShapeError(f"{len(X)} inputs vs {len(y)} targets")
    if len(X) < 2:
        raise ShapeError("need at least two observations")
    y_mean = float(np.mean(y))
    sd = float(np.std(y))
    y_scale = sd if sd > 1e-12 else 1.0
    ys = (y - y_mean) / y_scale
    d = X.shape[1]
    traces = []
    if theta is None:
        rng = np.random.default_rng(seed)
        lo, hi = _bounds(d)
        first = warm_start.to_log() if warm_start is not None else np.concatenate(
            [np.full(d, np.log(0.5)), [0.0, np.log(1e-2)]])
        starts = [np.clip(first, lo, hi)]
        diff = X[:, None, :] - X[None, :, :]
        sq = diff * diff
        starts += [rng.uniform(lo, hi) for _ in range(n_restarts - 1)]
        best = None

        def neg(v):
            try:
                f, g = _evidence(v, sq, ys)
            except NumericalError:
                return np.inf, np.zeros_like(v)
            return -f, -g

        for s in starts:
            res = lbfgs.minimize(neg, s, lo, hi, max_iter=max_iter, gtol=1e-5)
            traces.append([-f for f in res.trace])
            if np.isfinite(res.f) and (best is None or res.f < best.f):
                best = res
        if best is None:
            raise NumericalError("log marginal likelihood could not be evaluated at any start")
        theta = Theta.from_log(best.x)
    K = matern52(X, X, theta) + theta.noise_var * np.eye(len(X))
    L, jitter = _factor(K)
    alpha = cho_solve((L, True), ys)
    lml = log_marginal_likelihood(theta.to_log(), X, ys)[0]
    return GPState(X, y, theta, y_mean, y_scale, L, alpha, jitter, lml, traces)


def gp_predict(gp: GPState, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Posterior mean and standard deviation of the latent function."""
    Xs = np.atleast_2d(np.asarray(x, dtype=np.float64))
    Ks = matern52(Xs, gp.X, gp.theta)
    mean = Ks @ gp.alpha
    v = solve_triangular(gp.chol, Ks.T, lower=True)
    var = np.maximum(gp.theta.signal_var - np.sum(v * v, axis=0), 0.0)
    return gp.y_mean + gp.y_scale * mean, gp.y_scale * np.sqrt(var)


def gp_predict_grad(gp: GPState, x: np.ndarray) -> tuple[float, float, np.ndarray, np.ndarray]:
    """Mean, std and their gradients with respect to a single input ``x``."""
    x = np.asarray(x, dtype=np.float64)
    ls = gp.theta.lengthscales
    diff = (x[None, :] - gp.X) / ls
    r = np.sqrt(np.sum(diff * diff, axis=1))
    e = np.exp(-SQRT5 * r)
    k = gp.theta.signal_var * (1.0 + SQRT5 * r + 5.0 / 3.0 * r * r) * e
    dk = -(gp.theta.signal_var * 5.0 / 3.0 * (1.0 + SQRT5 * r) * e)[:, None] * diff / ls
    mean = k @ gp.alpha
    dmean = dk.T @ gp.alpha
    kinv_k = cho_solve((gp.chol, True), k)
    var = gp.theta.signal_var - k @ kinv_k
    if var <= 1e-300:
        std, dstd = 0.0, np.zeros_like(x)
    else:
        std = np.sqrt(var)
        dstd = -(dk.T @ kinv_k) / std
    s = gp.y_scale
    return gp.y_mean + s * mean, s * std, s * dmean, s * dstd
