"""Differentiable ranking via projection onto the permutahedron.

K importance scores are mapped to soft ranks in [1, K] by projecting
scores/epsilon onto the convex hull of all permutations of (1..K). The
projection reduces to a descending sort plus isotonic regression (pool
adjacent violators), giving O(K log K) runtime and an exact, closed-form
vector-Jacobian product (block-wise averaging).

Orientation: the largest score receives the largest rank, so rank/K can be
used directly as a keep-probability for important patches.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, _node


@dataclass
class IsotonicSolution:
    """Projection onto non-increasing vectors plus its PAV block structure."""
    projected: np.ndarray
    blocks: list[tuple[int, int]]  # half-open [start, end) index ranges


@dataclass
class SoftRanks:
    values: np.ndarray
    regularization: float


def isotonic_regression(v: np.ndarray) -> IsotonicSolution:
    """argmin over non-increasing u of ||u - v||^2, by pool adjacent violators."""
    v = np.asarray(v, dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise ValueError("isotonic_regression: non-finite input")
    n = v.size
    # Each active block tracks (sum, count, start index); merge while the
    # non-increasing constraint is violated.
    sums = np.empty(n)
    counts = np.empty(n, dtype=np.int64)
    starts = np.empty(n, dtype=np.int64)
    means = np.empty(n)
    top = -1
    for i in range(n):
        top += 1
        sums[top] = v[i]
        counts[top] = 1
        starts[top] = i
        means[top] = v[i]
        while top > 0 and means[top - 1] < means[top]:
            sums[top - 1] += sums[top]
            counts[top - 1] += counts[top]
            means[top - 1] = sums[top - 1] / counts[top - 1]
            top -= 1
    out = np.empty(n)
    blocks = []
    for b in range(top + 1):
        s = starts[b]
        e = s + counts[b]
        out[s:e] = means[b]
        blocks.append((int(s), int(e)))
    return IsotonicSolution(out, blocks)


def _projection_parts(scores: np.ndarray, epsilon: float):
    scores = np.asarray(scores, dtype=np.float64)
    if not np.all(np.isfinite(scores)):
        raise ValueError("soft_rank: non-finite scores")
    if epsilon <= 0:
        raise ValueError(f"soft_rank: epsilon must be positive, got {epsilon}")
    k = scores.size
    z = scores / epsilon
    perm = np.argsort(-z, kind="stable")
    rho = np.arange(k, 0, -1, dtype=np.float64)
    iso = isotonic_regression(z[perm] - rho)
    primal = z[perm] - iso.projected
    inv = np.empty(k, dtype=np.int64)
    inv[perm] = np.arange(k)
    return primal[inv], perm, inv, iso


def soft_rank(scores: np.ndarray, epsilon: float) -> SoftRanks:
    """Epsilon-regularized soft ranks of `scores`.

    Small epsilon approaches hard ranks; large epsilon approaches the
    constant vector (K+1)/2. The result always lies inside the
    permutahedron: values in [1, K], summing to K(K+1)/2.
    """
    values, _, _, _ = _projection_parts(scores, epsilon)
    return SoftRanks(values, epsilon)


def soft_rank_vjp(scores: np.ndarray, epsilon: float, upstream: np.ndarray) -> np.ndarray:
    """Exact vector-Jacobian product of soft_rank at `scores`.

    The Jacobian of the isotonic step averages within each PAV block and is
    zero across blocks; the full Jacobian is that, conjugated by the sort
    permutation, times 1/epsilon.
    """
    _, perm, inv, iso = _projection_parts(scores, epsilon)
    u = np.asarray(upstream, dtype=np.float64)
    up = u[perm]
    iso_vjp = np.empty_like(up)
    for s, e in iso.blocks:
        iso_vjp[s:e] = up[s:e].sum() / (e - s)
    return (u - iso_vjp[inv]) / epsilon


def hard_rank(scores: np.ndarray) -> np.ndarray:
    """Integer ranks 1..K, largest score -> rank K; ties go to lower index."""
    scores = np.asarray(scores)
    k = scores.size
    order = np.argsort(-scores, kind="stable")  # descending, stable
    ranks = np.empty(k, dtype=np.int64)
    ranks[order] = np.arange(k, 0, -1)
    return ranks


def soft_rank_rows(scores: Tensor, epsilon: float) -> Tensor:
    """Autograd op: soft_rank applied to each row of a (B, K) tensor."""
    data = scores.data
    if data.ndim != 2:
        raise ValueError(f"soft_rank_rows expects (B, K), got {data.shape}")
    out = np.stack([soft_rank(row, epsilon).values for row in data])

    def bw(g):
        return (np.stack([soft_rank_vjp(row, epsilon, gu)
                          for row, gu in zip(data, g)]).astype(data.dtype),)

    return _node(out.astype(data.dtype), (scores,), bw)
