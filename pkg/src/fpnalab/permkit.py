"""Permutation algebra, rank correlation, and differentiable-permutation tools.

Hard permutations are integer index arrays; the soft relaxation used by the
permutation-learning attack is a doubly-stochastic matrix produced by the
Gumbel/Sinkhorn construction and projected back to a hard permutation by
solving a linear assignment problem.
"""

from __future__ import annotations

import numpy as np
from scipy.optimize import linear_sum_assignment

DOUBLY_STOCHASTIC_TOL = 1e-6


def as_permutation(p):
    """Validate and return ``p`` as an index-array permutation."""
    arr = np.asarray(p, dtype=np.intp)
    if arr.ndim != 1:
        raise ValueError("permutation must be one-dimensional")
    n = arr.size
    seen = np.zeros(n, dtype=bool)
    if n and (arr.min() < 0 or arr.max() >= n):
        raise ValueError("permutation entries out of range")
    seen[arr] = True
    if not seen.all():
        raise ValueError("permutation entries must be distinct")
    return arr


def identity(n):
    return np.arange(n, dtype=np.intp)


def invert(p):
    p = as_permutation(p)
    inv = np.empty_like(p)
    inv[p] = np.arange(p.size, dtype=np.intp)
    return inv


def compose(p, q):
    """The permutation mapping i -> p[q[i]]."""
    p = as_permutation(p)
    q = as_permutation(q)
    if p.size != q.size:
        raise ValueError("permutations must have equal length")
    return p[q]


def random_permutation(n, rng):
    return rng.permutation(n).astype(np.intp)


def perm_matrix(p):
    """The 0/1 matrix M with M[i, p[i]] = 1."""
    p = as_permutation(p)
    m = np.zeros((p.size, p.size))
    m[np.arange(p.size), p] = 1.0
    return m


def format_permutation(p):
    return ",".join(str(int(i)) for i in as_permutation(p))


def parse_permutation(text):
    return as_permutation([int(tok) for tok in text.strip().split(",")])


def _count_inversions(a):
    """Number of pairs (i < j) with a[i] > a[j], counted via bottom-up merge.

    Runs are merged with a stable sort (timsort exploits the presorted runs),
    and cross-run inversions are counted with searchsorted, keeping the whole
    count O(n log n).
    """
    a = np.asarray(a)
    n = a.size
    count = 0
    width = 1
    work = a.copy()
    while width < n:
        for start in range(0, n, 2 * width):
            mid = start + width
            end = min(start + 2 * width, n)
            if mid >= end:
                continue
            left = work[start:mid]
            right = work[mid:end]
            # elements of left strictly greater than each right element
            count += (left.size * right.size
                      - int(np.searchsorted(left, right, side="right").sum()))
            work[start:end] = np.sort(work[start:end], kind="stable")
        width *= 2
    return count


def kendall_tau(p, q):
    """Kendall rank correlation between two permutations (no-ties formula).

    tau = (C - D) / (n(n-1)/2) over concordant/discordant index pairs of
    the relative ordering q o p^-1.
    """
    p = as_permutation(p)
    q = as_permutation(q)
    if p.size != q.size:
        raise ValueError("permutations must have equal length")
    n = p.size
    if n < 2:
        return 1.0
    rel = q[invert(p)]
    total = n * (n - 1) // 2
    discordant = _count_inversions(rel)
    return (total - 2 * discordant) / total


def hungarian(cost):
    """Optimal assignment minimizing total cost; returned as row -> column."""
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2 or cost.shape[0] != cost.shape[1]:
        raise ValueError("cost matrix must be square")
    if not np.all(np.isfinite(cost)):
        raise ValueError("cost matrix must be finite")
    rows, cols = linear_sum_assignment(cost)
    perm = np.empty(cost.shape[0], dtype=np.intp)
    perm[rows] = cols
    return perm


def sinkhorn(logits, temperature, iters):
    """Doubly-stochastic relaxation: exp(logits / T) followed by alternating
    row/column normalization.

    Computed in log space for stability; mathematically identical to the
    ratio form for positive matrices.
    """
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 2 or logits.shape[0] != logits.shape[1]:
        raise ValueError("logits must be square")
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    if iters < 1:
        raise ValueError("iters must be >= 1")
    log_alpha = logits / temperature
    for _ in range(iters):
        log_alpha = log_alpha - _logsumexp(log_alpha, axis=1)[:, None]
        log_alpha = log_alpha - _logsumexp(log_alpha, axis=0)[None, :]
    return np.exp(log_alpha)


def _logsumexp(a, axis):
    m = np.max(a, axis=axis, keepdims=True)
    return (m + np.log(np.sum(np.exp(a - m), axis=axis, keepdims=True))).squeeze(axis)


def is_doubly_stochastic(matrix, tol=DOUBLY_STOCHASTIC_TOL):
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
        return False
    if np.any(matrix < -tol):
        return False
    return (np.allclose(matrix.sum(axis=0), 1.0, atol=tol)
            and np.allclose(matrix.sum(axis=1), 1.0, atol=tol))


def gumbel_perturb(logits, noise_scale, rng):
    """logits + noise_scale * G with i.i.d. standard Gumbel entries from ``rng``."""
    logits = np.asarray(logits, dtype=np.float64)
    if noise_scale < 0:
        raise ValueError("noise_scale must be non-negative")
    if noise_scale == 0:
        return logits.copy()
    u = rng.random(logits.shape)
    tiny = np.finfo(np.float64).tiny
    g = -np.log(-np.log(np.maximum(u, tiny)))
    return logits + noise_scale * g


def harden(soft):
    """Project a doubly-stochastic matrix to the hard permutation maximizing
    the inner product <P, soft>."""
    soft = np.asarray(soft, dtype=np.float64)
    return hungarian(-soft)
