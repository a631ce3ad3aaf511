"""Text-based and cache-based classifiers, their cross-entropy losses, the
combined training objective with its analytic partials w.r.t. the adapted
features, and the fused inference rule.

Everything is a pure function; batch reductions run in a fixed row order so
repeated calls are bitwise deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .adapter import AdapterOutput
from .errors import DimMismatchError, ZeroQueryError
from .tensor import log_softmax, logsumexp, row_l2_normalize, row_norms, softmax

ZERO_QUERY_TOL = 1e-12


@dataclass(frozen=True)
class LossBreakdown:
    text_loss: float
    cache_loss: float
    total: float
    lam: float


def _unit_query(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z)
    n = float(np.sqrt(np.dot(z, z)))
    if n < ZERO_QUERY_TOL:
        raise ZeroQueryError(f"query norm {n:.3e} is below {ZERO_QUERY_TOL:g}")
    return z / n


def _unit_queries(queries: np.ndarray) -> np.ndarray:
    queries = np.asarray(queries)
    if queries.ndim != 2:
        raise DimMismatchError(f"queries must be 2-D, got {queries.shape}")
    norms = row_norms(queries)
    if np.any(norms < ZERO_QUERY_TOL):
        raise ZeroQueryError("a query row has (near-)zero norm")
    return queries / norms[:, None]


def text_logits(z: np.ndarray, xp_tilde: np.ndarray, tau: float) -> np.ndarray:
    """Per-class scores cos(z, adapted positive prompt) / tau."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    zn = _unit_query(z)
    un = row_l2_normalize(xp_tilde)
    return (un @ zn) / tau


def cache_logits(z: np.ndarray, xcache_tilde: np.ndarray, onehot: np.ndarray) -> np.ndarray:
    """Key-value cache scores: per-class sums of exp(cos(z, key) - 1) affinities."""
    zn = _unit_query(z)
    kn = row_l2_normalize(xcache_tilde)
    if onehot.shape[0] != xcache_tilde.shape[0]:
        raise DimMismatchError(
            f"onehot rows {onehot.shape[0]} != cache rows {xcache_tilde.shape[0]}"
        )
    aff = np.exp(np.clip(kn @ zn, -1.0, 1.0) - 1.0)
    return aff @ onehot


def cross_entropy(
    scores: np.ndarray, label: int, tau_divide: bool = False, tau: float = 1.0
) -> float:
    """-log softmax(scores / tau)[label], computed via log-sum-exp.

    The text classifier passes scores already divided by tau (tau_divide
    unset); the cache classifier passes raw affinity sums (tau_divide set).
    """
    scores = np.asarray(scores, dtype=np.float64)
    if not 0 <= label < scores.shape[0]:
        raise IndexError(f"label {label} out of range for {scores.shape[0]} classes")
    if tau_divide:
        if tau <= 0:
            raise ValueError("tau must be positive")
        scores = scores / tau
    return float(logsumexp(scores) - scores[label])


def total_loss(
    queries: np.ndarray,
    labels: np.ndarray,
    output: AdapterOutput,
    onehot: np.ndarray,
    tau: float,
    lam: float,
) -> tuple[LossBreakdown, np.ndarray, np.ndarray]:
    """Mean text + lam * cache loss over a query batch, plus the analytic
    partials of that total w.r.t. the adapted prompts and the adapted cache.

    Returns (breakdown, d_xp_tilde, d_xcache_tilde).
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    if lam < 0:
        raise ValueError("lam must be nonnegative")
    z = _unit_queries(queries)
    y = np.asarray(labels, dtype=np.int64)
    bsz = z.shape[0]
    if y.shape != (bsz,):
        raise DimMismatchError(f"labels shape {y.shape} != ({bsz},)")

    u = output.xp_tilde
    c = u.shape[0]
    if np.any(y < 0) or np.any(y >= c):
        raise DimMismatchError("labels out of class range")
    rows = np.arange(bsz)

    # Text branch. cos is kept unclipped so the analytic partials are exact.
    u_norm = row_norms(u)
    u_hat = u / u_norm[:, None]
    cos_t = z @ u_hat.T
    s = cos_t / tau
    text_loss = float(-np.mean(log_softmax(s, axis=1)[rows, y]))
    g = softmax(s, axis=1)
    g[rows, y] -= 1.0
    g /= bsz
    # d/du of cos(z, u) = (z - cos * u_hat) / |u|, folded over the batch.
    t1 = g.T @ z
    t2 = np.sum(g * cos_t, axis=0)
    d_xp = (t1 - t2[:, None] * u_hat) / (tau * u_norm)[:, None]

    # Cache branch.
    k = output.xcache_tilde
    k_norm = row_norms(k)
    k_hat = k / k_norm[:, None]
    cos_k = z @ k_hat.T
    aff = np.exp(cos_k - 1.0)
    scores = aff @ onehot
    cache_loss = float(-np.mean(log_softmax(scores / tau, axis=1)[rows, y]))
    if lam != 0.0:
        dq = softmax(scores / tau, axis=1)
        dq[rows, y] -= 1.0
        dq *= lam / (bsz * tau)
        dcos = (dq @ onehot.T) * aff
        t1 = dcos.T @ z
        t2 = np.sum(dcos * cos_k, axis=0)
        d_xcache = (t1 - t2[:, None] * k_hat) / k_norm[:, None]
    else:
        d_xcache = np.zeros_like(k)

    total = text_loss + lam * cache_loss
    return (
        LossBreakdown(text_loss=text_loss, cache_loss=cache_loss, total=total, lam=lam),
        d_xp.astype(u.dtype, copy=False),
        d_xcache.astype(k.dtype, copy=False),
    )


def fused_scores(
    queries: np.ndarray,
    output: AdapterOutput,
    onehot: np.ndarray,
    tau: float,
    lam: float,
    text_only: bool = False,
) -> np.ndarray:
    """Batched inference scores: temperature-scaled text cosines plus
    lam-weighted cache scores (also divided by tau)."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    z = _unit_queries(queries)
    u_hat = row_l2_normalize(output.xp_tilde)
    scores = (z @ u_hat.T) / tau
    if not text_only and lam != 0.0:
        k_hat = row_l2_normalize(output.xcache_tilde)
        aff = np.exp(np.clip(z @ k_hat.T, -1.0, 1.0) - 1.0)
        scores = scores + lam * (aff @ onehot) / tau
    return scores


def predict(
    queries: np.ndarray,
    output: AdapterOutput,
    onehot: np.ndarray,
    tau: float,
    lam: float,
    text_only: bool = False,
) -> np.ndarray:
    """Top-1 class per query; ties break to the lowest class index."""
    return np.argmax(
        fused_scores(queries, output, onehot, tau, lam, text_only), axis=1
    )


def fused_inference(
    z: np.ndarray,
    output: AdapterOutput,
    onehot: np.ndarray,
    tau: float,
    lam: float,
    text_only: bool = False,
) -> tuple[int, np.ndarray]:
    """Single-query fused prediction: (predicted class, score vector)."""
    scores = fused_scores(
        np.asarray(z)[None, :], output, onehot, tau, lam, text_only
    )[0]
    return int(np.argmax(scores)), scores
