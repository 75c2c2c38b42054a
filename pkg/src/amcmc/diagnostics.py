"""Sample-quality measures: kernel Stein discrepancy, exact KL traces on
finite chains, predictive metrics for weight samples, mode coverage."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .targets import ConfigError, FiniteChainTarget, TargetDensity, chain_evolve_exact


@dataclass
class KsdConfig:
    """RBF-kernel Stein discrepancy settings.

    bandwidth=None means the median pairwise-distance heuristic; statistic
    is "V" (biased, always >= 0) or "U" (unbiased).
    """

    bandwidth: float | None = None
    statistic: str = "V"

    def __post_init__(self):
        if self.bandwidth is not None and self.bandwidth <= 0:
            raise ValueError("bandwidth must be positive")
        if self.statistic not in ("U", "V"):
            raise ValueError("statistic must be 'U' or 'V'")


@dataclass
class PredictiveMetrics:
    log_likelihood: float  # nats per test point
    error_rate: float


def _worker_count() -> int:
    raw = os.environ.get("AMCMC_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def median_bandwidth(X: np.ndarray) -> float:
    """Median of off-diagonal pairwise distances; 1.0 if all points agree."""
    X = np.atleast_2d(X)
    sq = np.sum(X * X, axis=1)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2.0 * X @ X.T, 0.0)
    off = d2[~np.eye(X.shape[0], dtype=bool)]
    med = float(np.sqrt(np.median(off)))
    return med if med > 0 else 1.0


def _stein_kernel_block(X, S, rows, h):
    """u_p(x_i, x_j) for i in `rows`, all j, with RBF k = exp(-r^2/(2h^2))."""
    Xi, Si = X[rows], S[rows]
    diff = Xi[:, None, :] - X[None, :, :]  # (m, K, d)
    r2 = np.sum(diff * diff, axis=2)
    k = np.exp(-r2 / (2.0 * h * h))
    d = X.shape[1]
    term1 = k * (Si @ S.T)
    # grad_y k = k (x - y)/h^2 ; grad_x k = -k (x - y)/h^2
    term2 = k * np.einsum("id,ijd->ij", Si, diff) / (h * h)
    term3 = -k * np.einsum("jd,ijd->ij", S, diff) / (h * h)
    term4 = k * (d / (h * h) - r2 / h**4)
    return term1 + term2 + term3 + term4


def ksd(samples, target: TargetDensity, cfg: KsdConfig | None = None) -> float:
    """Stein discrepancy statistic of a sample set against the target score.

    Returns the U- or V-statistic of u_p over all pairs; the V form is an
    unnormalised squared discrepancy, non-negative by construction.
    """
    cfg = cfg or KsdConfig()
    X = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    if X.shape[0] < 2:
        raise ValueError("KSD needs at least two samples")
    K = X.shape[0]
    S = target.grad_log_density_batch(X)
    h = cfg.bandwidth if cfg.bandwidth is not None else median_bandwidth(X)

    workers = _worker_count()
    blocks = np.array_split(np.arange(K), min(workers, K))
    if workers > 1 and len(blocks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(lambda rows: _stein_kernel_block(X, S, rows, h), blocks))
    else:
        parts = [_stein_kernel_block(X, S, rows, h) for rows in blocks]
    U = np.vstack(parts)

    if cfg.statistic == "V":
        return float(U.sum() / (K * K))
    return float((U.sum() - np.trace(U)) / (K * (K - 1)))


def kl_to_reference(q: np.ndarray, ref: np.ndarray) -> float:
    q = np.asarray(q, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if np.any((ref <= 0) & (q > 0)):
        raise ConfigError("q puts mass where the reference has none")
    mask = q > 0
    return float(np.sum(q[mask] * (np.log(q[mask]) - np.log(ref[mask]))))


def lemma1_monotonicity_check(
    M: np.ndarray, pi: np.ndarray, q0: np.ndarray, steps: int
) -> list[float]:
    """Exact KL(q_t || pi) for t = 0..steps under q_{t+1} = q_t M.

    The returned sequence is the test subject: Markov transitions with
    stationary pi never increase it.
    """
    chain = FiniteChainTarget(pi, M)  # validates stationarity and support
    values = []
    q = np.asarray(q0, dtype=np.float64)
    for _ in range(steps + 1):
        values.append(kl_to_reference(q, chain.pi))
        q = chain_evolve_exact(q, chain.M, 1)
    return values


def predictive_metrics(weight_samples, bnn, X_test, y_test) -> PredictiveMetrics:
    """Posterior-averaged Bernoulli predictions from BNN weight samples.

    Predictive prob per point is the mean sigmoid over samples; ties at
    exactly 0.5 are classed as label 1.
    """
    X_test = np.atleast_2d(X_test)
    y_test = np.asarray(y_test, dtype=np.float64)
    if X_test.shape[0] == 0:
        raise ConfigError("empty test set")
    Z = np.atleast_2d(weight_samples)
    eval_bnn = type(bnn)(X_test, y_test, hidden=bnn.hidden, prior_std=bnn.prior_std)
    logits = eval_bnn.logits_batch(Z)  # (K, N)
    probs = np.where(
        logits >= 0,
        1.0 / (1.0 + np.exp(-np.abs(logits))),
        np.exp(-np.abs(logits)) / (1.0 + np.exp(-np.abs(logits))),
    ).mean(axis=0)
    probs = np.clip(probs, 1e-12, 1 - 1e-12)
    ll = float(np.mean(y_test * np.log(probs) + (1 - y_test) * np.log(1 - probs)))
    predicted = (probs >= 0.5).astype(np.float64)
    return PredictiveMetrics(
        log_likelihood=ll, error_rate=float(np.mean(predicted != y_test))
    )


def mode_coverage(samples, boundaries=(0.0,)) -> np.ndarray:
    """Fractions of 1-D samples per region cut by the boundaries."""
    z = np.asarray(samples, dtype=np.float64).ravel()
    edges = [-np.inf, *boundaries, np.inf]
    counts = np.array(
        [np.sum((z >= lo) & (z < hi)) for lo, hi in zip(edges[:-1], edges[1:])],
        dtype=np.float64,
    )
    return counts / z.size
