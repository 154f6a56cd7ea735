"""Slow, independent reference computations used to check the library."""

import math

import numpy as np


def jacobi_eigh(A, tol=1e-15, max_sweeps=100):
    """Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.

    Pure-Python rotations; no LAPACK involved.  Returns eigenvalues in
    descending order and the matching eigenvectors as columns.
    """
    A = np.array(A, dtype=float)
    n = A.shape[0]
    V = np.eye(n)
    for _ in range(max_sweeps):
        off = math.sqrt(sum(A[i, j] ** 2 for i in range(n) for j in range(n) if i != j))
        if off <= tol * max(1.0, math.sqrt((A ** 2).sum())):
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = A[p, q]
                if abs(apq) < 1e-300:
                    continue
                tau = (A[q, q] - A[p, p]) / (2.0 * apq)
                t = math.copysign(1.0, tau) / (abs(tau) + math.sqrt(1.0 + tau * tau))
                c = 1.0 / math.sqrt(1.0 + t * t)
                s = t * c
                # rotate rows/columns p and q
                ap, aq = A[:, p].copy(), A[:, q].copy()
                A[:, p], A[:, q] = c * ap - s * aq, s * ap + c * aq
                ap, aq = A[p, :].copy(), A[q, :].copy()
                A[p, :], A[q, :] = c * ap - s * aq, s * ap + c * aq
                vp, vq = V[:, p].copy(), V[:, q].copy()
                V[:, p], V[:, q] = c * vp - s * vq, s * vp + c * vq
    w = np.diag(A).copy()
    order = np.argsort(-w)
    return w[order], V[:, order]


def optimal_rank_k_error(A, k):
    """Frobenius error of the best rank-k approximation, from the eigenvalues of A^T A."""
    A = np.asarray(A, dtype=float)
    G = A.T @ A if A.shape[1] <= A.shape[0] else A @ A.T
    w, _ = jacobi_eigh(G)
    tail = np.clip(w[k:], 0.0, None)
    return math.sqrt(tail.sum())


def bubble_sort_swaps(perm):
    a = list(perm)
    swaps = 0
    changed = True
    while changed:
        changed = False
        for i in range(len(a) - 1):
            if a[i] > a[i + 1]:
                a[i], a[i + 1] = a[i + 1], a[i]
                swaps += 1
                changed = True
    return swaps
