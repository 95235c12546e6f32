"""Exact t-SNE for small point sets (tens of probe vectors)."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np

from .errors import ConfigError, ShapeError

log = logging.getLogger(__name__)

ENTROPY_TOL = 1e-4


@dataclass
class TsneConfig:
    perplexity: float = 15.0
    iterations: int = 1000
    learning_rate: float = 200.0
    momentum: float = 0.5
    final_momentum: float = 0.8
    momentum_switch: int = 250
    exaggeration: float = 4.0
    exaggeration_iters: int = 100
    init_std: float = 1e-4
    seed: int = 0

    def validate(self):
        if self.perplexity <= 1:
            raise ConfigError("perplexity must exceed 1")
        if self.iterations < 1 or self.learning_rate <= 0:
            raise ConfigError("iterations and learning_rate must be positive")

    def to_dict(self):
        return asdict(self)


@dataclass
class TsneResult:
    coords: np.ndarray
    kl: np.ndarray
    entropies: np.ndarray
    P: np.ndarray


def _sq_distances(X):
    sq = np.sum(X * X, axis=1)
    D = sq[:, None] + sq[None, :] - 2.0 * X @ X.T
    np.fill_diagonal(D, 0.0)
    return np.maximum(D, 0.0)


def _row_entropy(d_row, beta):
    """Shannon entropy (nats) and probabilities of exp(-beta * d) over one row."""
    shifted = -(d_row - d_row.min()) * beta
    p = np.exp(shifted)
    z = p.sum()
    p /= z
    H = np.log(z) - np.sum(p * shifted)
    return H, p


def conditional_affinities(D: np.ndarray, perplexity: float, tol=ENTROPY_TOL / 10, max_iter=200):
    """Row-stochastic P(j|i) with each row's entropy within ``tol`` of log(perplexity)."""
    n = D.shape[0]
    target = np.log(perplexity)
    P = np.zeros((n, n))
    H_out = np.empty(n)
    for i in range(n):
        row = np.delete(D[i], i)
        lo, hi = 0.0, np.inf
        beta = 1.0 / max(np.median(row), 1e-300)
        for _ in range(max_iter):
            H, p = _row_entropy(row, beta)
            if abs(H - target) < tol:
                break
            if H > target:
                lo = beta
                beta = beta * 2.0 if hi == np.inf else 0.5 * (beta + hi)
            else:
                hi = beta
                beta = 0.5 * (beta + lo)
        H_out[i] = H
        P[i, np.arange(n) != i] = p
    return P, H_out


def _kl(P, Q):
    mask = P > 0
    return float(np.sum(P[mask] * np.log(P[mask] / Q[mask])))


def tsne(points, config: TsneConfig | None = None) -> TsneResult:
    config = config or TsneConfig()
    config.validate()
    X = np.asarray(points, dtype=np.float64)
    if X.ndim != 2:
        raise ShapeError(f"t-SNE expects an (N, m) array, got {X.shape}")
    n = X.shape[0]
    if n < 5:
        raise ShapeError("t-SNE needs at least 5 points")
    if not np.all(np.isfinite(X)):
        raise ConfigError("t-SNE input must be finite")
    if config.perplexity >= n - 1:
        raise ConfigError(f"perplexity {config.perplexity} is unreachable with {n} points")
    if config.perplexity >= (n - 1) / 3:
        log.warning("perplexity %.1f is large for %d points", config.perplexity, n)
    rng = np.random.default_rng(config.seed)

    D = _sq_distances(X)
    off = ~np.eye(n, dtype=bool)
    if np.any(D[off] == 0.0):
        log.warning("duplicate points found; adding 1e-9 jitter")
        X = X + 1e-9 * rng.standard_normal(X.shape)
        D = _sq_distances(X)

    cond, entropies = conditional_affinities(D, config.perplexity)
    P = (cond + cond.T) / (2.0 * n)

    Y = config.init_std * rng.standard_normal((n, 2))
    velocity = np.zeros_like(Y)
    gains = np.ones_like(Y)
    kl = np.empty(config.iterations + 1)

    def q_matrix(Y):
        num = 1.0 / (1.0 + _sq_distances(Y))
        np.fill_diagonal(num, 0.0)
        return num, np.maximum(num / num.sum(), 1e-300)

    num, Q = q_matrix(Y)
    kl[0] = _kl(P, Q)
    for it in range(config.iterations):
        exag = config.exaggeration if it < config.exaggeration_iters else 1.0
        mom = config.momentum if it < config.momentum_switch else config.final_momentum
        W = (exag * P - Q) * num
        grad = 4.0 * (np.sum(W, axis=1)[:, None] * Y - W @ Y)
        same = np.sign(grad) == np.sign(velocity)
        gains = np.where(same, gains * 0.8, gains + 0.2)
        np.maximum(gains, 0.01, out=gains)
        velocity = mom * velocity - config.learning_rate * gains * grad
        Y = Y + velocity
        Y = Y - Y.mean(axis=0)
        num, Q = q_matrix(Y)
        kl[it + 1] = _kl(P, Q)
    return TsneResult(coords=Y, kl=kl, entropies=entropies, P=P)
