"""Independent brute-force oracles and the release verification report.

These deliberately avoid the code paths they check: isotonic regression is
verified against exhaustive enumeration of block partitions, and soft ranks
against a quadratic program over the convex hull of all K! permutation
vertices.
"""
from __future__ import annotations

from itertools import permutations

import numpy as np
from scipy.optimize import nnls


def isotonic_oracle(v: np.ndarray) -> np.ndarray:
    """Exact projection onto non-increasing vectors by partition enumeration.

    The optimum is constant on consecutive blocks with non-increasing block
    means; enumerate all 2^(n-1) consecutive partitions and keep the feasible
    candidate with minimal distance. Exponential; for test-sized n only.
    """
    v = np.asarray(v, dtype=np.float64)
    n = v.size
    best = None
    best_dist = np.inf
    for mask in range(1 << (n - 1)):
        # bit i set -> block boundary between positions i and i+1
        bounds = [0] + [i + 1 for i in range(n - 1) if mask >> i & 1] + [n]
        cand = np.empty(n)
        means = []
        for s, e in zip(bounds[:-1], bounds[1:]):
            m = v[s:e].mean()
            means.append(m)
            cand[s:e] = m
        if any(means[i] < means[i + 1] - 1e-12 for i in range(len(means) - 1)):
            continue
        d = float(((cand - v) ** 2).sum())
        if d < best_dist:
            best_dist = d
            best = cand
    return best


def permutahedron_projection_oracle(z: np.ndarray) -> np.ndarray:
    """Euclidean projection of z onto the permutahedron of (1..K).

    Solves min ||V lam - z||^2 over the simplex, where the columns of V are
    all K! permutations of (1..K); the simplex constraint is enforced with a
    heavily weighted sum-to-one row inside an exact NNLS solve.
    """
    z = np.asarray(z, dtype=np.float64)
    k = z.size
    verts = np.array(list(permutations(range(1, k + 1))), dtype=np.float64).T  # K x K!
    rho = 1e7
    a = np.vstack([verts, rho * np.ones((1, verts.shape[1]))])
    b = np.concatenate([z, [rho]])
    lam, _ = nnls(a, b)
    lam /= lam.sum()
    return verts @ lam


def soft_rank_oracle(scores: np.ndarray, epsilon: float) -> np.ndarray:
    """Brute-force soft ranks: projection of scores/epsilon onto the permutahedron."""
    return permutahedron_projection_oracle(np.asarray(scores, dtype=np.float64) / epsilon)


def run_report(seed: int = 0) -> list[tuple[str, bool, float]]:
    """Release gate: oracle, Monte-Carlo, closed-form and gradient checks.

    Returns (name, passed, max_error) rows; see cli.cmd_verify.
    """
    from scipy.stats import chisquare

    from . import game, relax, softrank
    from . import tensor as T

    rng = np.random.default_rng(seed)
    rows = []

    # soft_rank vs K!-vertex brute force
    err = 0.0
    for _ in range(100):
        k = int(rng.integers(2, 6))
        eps = float(rng.choice([0.1, 0.5, 1.0, 3.0]))
        s = rng.normal(size=k) * 2
        got = softrank.soft_rank(s, eps).values
        want = soft_rank_oracle(s, eps)
        err = max(err, float(np.abs(got - want).max()))
    rows.append(("soft_rank vs permutahedron brute force", err < 1e-6, err))

    # isotonic regression vs partition enumeration
    err = 0.0
    for _ in range(100):
        k = int(rng.integers(2, 7))
        v = rng.normal(size=k) * 3
        got = softrank.isotonic_regression(v).projected
        err = max(err, float(np.abs(got - isotonic_oracle(v)).max()))
    rows.append(("isotonic regression vs QP oracle", err < 1e-9, err))

    # soft_rank VJP vs finite differences
    err = 0.0
    for _ in range(20):
        s = rng.normal(size=5) * 2
        w = rng.normal(size=5)
        f = lambda x: T.tsum(softrank.soft_rank_rows(T.reshape(x, (1, 5)), 0.5) * T.Tensor(w[None]))
        err = max(err, T.grad_check(f, T.Tensor(s), step=1e-6))
    rows.append(("soft_rank gradient vs finite differences", err < 1e-5, err))

    # Gumbel-max fidelity: hard samples are exact softmax(logits) draws
    logits = T.Tensor(np.array([1.0, 0.0, -0.5, 0.7]))
    n = 100_000
    g = relax.sample_gumbel((n, 4), rng)
    counts = np.bincount((logits.data + g).argmax(axis=1), minlength=4)
    probs = np.exp(logits.data) / np.exp(logits.data).sum()
    _, pval = chisquare(counts, probs * n)
    rows.append(("gumbel-max frequency chi-squared p-value", pval > 0.001, pval))

    # relaxed Bernoulli mean
    p = 0.9
    draws = relax.bernoulli_relaxed(
        T.Tensor(np.full(n, p)), relax.GumbelConfig(tau_s=2.0, hard=True), rng)
    err = abs(float(draws.data.mean()) - p)
    rows.append(("relaxed Bernoulli mean error at p=0.9", err < 0.01, err))

    # InfoNCE closed forms
    e1 = abs(float(game.info_nce(T.Tensor(np.array([[3.7]]))).data))
    sim = T.Tensor(np.array([[1.0, 0.0], [0.0, 1.0]]))
    e2 = abs(float(game.info_nce(sim).data) - np.log(1 + np.exp(-1.0)))
    rows.append(("InfoNCE closed forms (B=1, B=2 orthonormal)", max(e1, e2) < 1e-9, max(e1, e2)))

    # core op gradients
    err = 0.0
    x = rng.normal(size=(3, 4))
    w1 = T.Tensor(rng.normal(size=(3, 4)))
    w2 = T.Tensor(rng.normal(size=(3, 4)))
    for f in (lambda t: T.tsum(T.softmax(t) * w1),
              lambda t: T.tsum(T.log_softmax(t)[np.arange(3), [0, 1, 2]]),
              lambda t: T.tsum(T.l2_normalize(t) * w2),
              lambda t: T.tsum(T.gelu(t))):
        err = max(err, T.grad_check(f, T.Tensor(x)))
    rows.append(("elementary op gradients", err < 1e-5, err))

    return rows
