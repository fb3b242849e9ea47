"""Clustering of token embeddings under cosine similarity.

Both modes run spherical K-means (Lloyd iterations on unit-normalised tokens
and centroids).  ``fixed`` uses a preset K; ``adaptive`` starts at ``k_min``
and keeps splitting the least cohesive cluster while its mean member/centroid
cosine is below ``tau``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import List, Optional

import numpy as np

from .tensor_ops import count_flops, matmul


class QuantizerError(ValueError):
    pass


@dataclass(frozen=True)
class QuantizerConfig:
    mode: str = "fixed"
    k: int = 32
    k_min: int = 4
    k_max: int = 256
    tau: float = 0.92
    max_iters: int = 100
    tol: float = 1e-6
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("fixed", "adaptive"):
            raise QuantizerError(f"mode must be 'fixed' or 'adaptive', got {self.mode!r}")
        if self.mode == "fixed" and self.k < 1:
            raise QuantizerError("k must be >= 1")
        if self.mode == "adaptive":
            if not 1 <= self.k_min <= self.k_max:
                raise QuantizerError("need 1 <= k_min <= k_max")
            if not 0.0 < self.tau < 1.0:
                raise QuantizerError("tau must lie in (0, 1)")
        if self.max_iters < 1:
            raise QuantizerError("max_iters must be >= 1")


@dataclass
class ClusterAssignment:
    assignments: np.ndarray
    k: int
    iterations: int = 0
    final_cost: float = 0.0
    cost_history: List[float] = field(default_factory=list)

    @property
    def n_tokens(self) -> int:
        return self.assignments.shape[0]

    @property
    def member_sets(self) -> List[np.ndarray]:
        order = np.argsort(self.assignments, kind="stable")
        bounds = np.searchsorted(self.assignments[order], np.arange(self.k + 1))
        return [order[bounds[j]:bounds[j + 1]] for j in range(self.k)]

    def sizes(self) -> np.ndarray:
        return np.bincount(self.assignments, minlength=self.k)

    def validate(self) -> None:
        a = self.assignments
        if a.ndim != 1 or (a.size and (a.min() < 0 or a.max() >= self.k)):
            raise QuantizerError("assignment ids outside [0, K)")
        if (self.sizes() == 0).any():
            raise QuantizerError("assignment has an empty cluster")


def cosine_sim(a, b) -> float:
    """Cosine similarity; 0 when either vector is zero."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def normalize_rows(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    return np.divide(x, norms, out=np.zeros_like(x), where=norms > 0)


def _centroids(xn: np.ndarray, assign: np.ndarray, k: int) -> np.ndarray:
    sums = np.zeros((k, xn.shape[1]))
    np.add.at(sums, assign, xn)
    count_flops(2 * xn.shape[0] * xn.shape[1], "centroid_update")
    return normalize_rows(sums)


def _own_similarity(xn: np.ndarray, cn: np.ndarray, assign: np.ndarray) -> np.ndarray:
    count_flops(2 * xn.shape[0] * xn.shape[1], "cost")
    return np.einsum("ij,ij->i", xn, cn[assign])


def assignment_cost(tokens, assignment: ClusterAssignment) -> float:
    """Mean of 1 - cos(token, centroid of its cluster)."""
    xn = normalize_rows(np.asarray(tokens, dtype=np.float64))
    cn = _centroids(xn, assignment.assignments, assignment.k)
    return float(np.mean(1.0 - _own_similarity(xn, cn, assignment.assignments)))


def _check_tokens(tokens) -> np.ndarray:
    x = np.asarray(tokens, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise QuantizerError(f"tokens must be a non-empty (N, D) array, got shape {x.shape}")
    if not np.isfinite(x).all():
        raise QuantizerError("tokens contain non-finite values")
    return x


def _seed_centroids(xn: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """K-means++ seeding with distance 1 - cos."""
    n = xn.shape[0]
    chosen = [int(rng.integers(n))]
    best = matmul(xn, xn[chosen[0]][:, None], tag="similarity")[:, 0]
    for _ in range(1, k):
        dist = np.clip(1.0 - best, 0.0, None)
        dist[chosen] = 0.0
        total = dist.sum()
        if total > 0:
            nxt = int(rng.choice(n, p=dist / total))
        else:
            free = np.setdiff1d(np.arange(n), chosen)
            nxt = int(rng.choice(free))
        chosen.append(nxt)
        best = np.maximum(best, matmul(xn, xn[nxt][:, None], tag="similarity")[:, 0])
    return xn[chosen].copy()


def _repair_empty(assign: np.ndarray, own_sim: np.ndarray, k: int) -> None:
    """Give every empty cluster the worst-fitting token of a multi-member cluster."""
    sizes = np.bincount(assign, minlength=k)
    for j in np.flatnonzero(sizes == 0):
        movable = sizes[assign] > 1
        if not movable.any():
            break
        cand = np.where(movable, own_sim, np.inf)
        i = int(np.argmin(cand))
        sizes[assign[i]] -= 1
        assign[i] = j
        sizes[j] = 1
        own_sim[i] = 1.0


def _lloyd(xn: np.ndarray, centroids: np.ndarray, max_iters: int, tol: float) -> ClusterAssignment:
    k = centroids.shape[0]
    cn = centroids
    prev: Optional[np.ndarray] = None
    history: List[float] = []
    it = 0
    for it in range(1, max_iters + 1):
        sims = matmul(xn, cn.T, tag="similarity")
        assign = np.argmax(sims, axis=1)
        own = sims[np.arange(xn.shape[0]), assign]
        _repair_empty(assign, own, k)
        cn = _centroids(xn, assign, k)
        cost = float(np.mean(1.0 - _own_similarity(xn, cn, assign)))
        history.append(cost)
        stable = prev is not None and np.array_equal(assign, prev)
        small_gain = len(history) > 1 and history[-2] - cost < tol
        prev = assign
        if stable or small_gain:
            break
    return ClusterAssignment(prev, k, it, history[-1], history)


def kmeans_fixed(tokens, cfg: QuantizerConfig, k: Optional[int] = None) -> ClusterAssignment:
    """Spherical K-means with K-means++ seeding from ``cfg.seed``."""
    x = _check_tokens(tokens)
    k = cfg.k if k is None else k
    n = x.shape[0]
    if not 1 <= k <= n:
        raise QuantizerError(f"K={k} must lie in [1, N={n}]")
    if k == n:
        xn = normalize_rows(x)
        cost = float(np.mean(1.0 - np.einsum("ij,ij->i", xn, xn)))
        return ClusterAssignment(np.arange(n), n, 0, cost, [cost])
    xn = normalize_rows(x)
    rng = np.random.default_rng(cfg.seed)
    return _lloyd(xn, _seed_centroids(xn, k, rng), cfg.max_iters, cfg.tol)


def cluster_cohesion(tokens, assignment: ClusterAssignment) -> np.ndarray:
    """Mean member/centroid cosine similarity per cluster."""
    xn = normalize_rows(np.asarray(tokens, dtype=np.float64))
    cn = _centroids(xn, assignment.assignments, assignment.k)
    own = np.einsum("ij,ij->i", xn, cn[assignment.assignments])
    sums = np.bincount(assignment.assignments, weights=own, minlength=assignment.k)
    return sums / np.maximum(assignment.sizes(), 1)


def kmeans_adaptive(tokens, cfg: QuantizerConfig) -> ClusterAssignment:
    """Split-until-cohesive K-means.

    Starts from ``kmeans_fixed`` at ``k_min``.  While K < ``k_max``, the
    splittable cluster with the lowest cohesion is split by 2-means on its
    members if that cohesion is below ``tau``; all clusters are then refined
    with Lloyd iterations.
    """
    x = _check_tokens(tokens)
    n = x.shape[0]
    if cfg.k_min > n:
        raise QuantizerError(f"k_min={cfg.k_min} exceeds N={n}")
    k_max = min(cfg.k_max, n)
    xn = normalize_rows(x)
    result = kmeans_fixed(x, cfg, k=cfg.k_min)
    history = list(result.cost_history)
    iterations = result.iterations
    unsplittable = set()
    split_round = 0
    while result.k < k_max:
        coh = cluster_cohesion(xn, result)
        sizes = result.sizes()
        cand = [j for j in range(result.k) if sizes[j] > 1 and coh[j] < cfg.tau and j not in unsplittable]
        if not cand:
            break
        j = min(cand, key=lambda c: (coh[c], c))
        members = np.flatnonzero(result.assignments == j)
        split_round += 1
        sub = kmeans_fixed(xn[members], replace(cfg, seed=cfg.seed + split_round), k=2)
        if sub.final_cost >= 1.0 - coh[j] - 1e-15:
            # members are indistinguishable; splitting cannot help
            unsplittable.add(j)
            continue
        assign = result.assignments.copy()
        assign[members[sub.assignments == 1]] = result.k
        centroids = _centroids(xn, assign, result.k + 1)
        result = _lloyd(xn, centroids, cfg.max_iters, cfg.tol)
        history.extend(result.cost_history)
        iterations += result.iterations
        unsplittable.clear()
    return ClusterAssignment(result.assignments, result.k, iterations, result.final_cost, history)


def quantize(tokens, cfg: QuantizerConfig) -> ClusterAssignment:
    if cfg.mode == "fixed":
        return kmeans_fixed(tokens, cfg)
    return kmeans_adaptive(tokens, cfg)
