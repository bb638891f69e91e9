"""Householder QR factorisation.

Classic column-by-column triangularisation by Householder reflectors,
written out directly rather than taken from a library so the analysis code
has no hidden dependencies for this step.  For a square or tall matrix A
(m >= n) it produces Q (m, m) orthogonal and R (m, n) upper triangular with
A = Q @ R.
"""

from __future__ import annotations

import numpy as np


def householder_qr(a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Factor ``a = q @ r`` with orthogonal q and upper-triangular r.

    Each step reflects the current column onto +-e1, choosing the sign that
    avoids cancellation (alpha = -sign(x0) * ||x||).  Reflectors are applied
    as rank-1 updates and accumulated into q at the end.
    """
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError("householder_qr expects a matrix")
    m, n = a.shape
    if m < n:
        raise ValueError("householder_qr expects m >= n")
    r = a.copy()
    q = np.eye(m)
    for k in range(min(n, m - 1)):
        x = r[k:, k]
        norm_x = np.sqrt((x * x).sum())
        if norm_x == 0.0:
            continue
        alpha = -np.sign(x[0]) * norm_x if x[0] != 0.0 else -norm_x
        v = x.copy()
        v[0] -= alpha
        v_norm2 = (v * v).sum()
        if v_norm2 == 0.0:
            continue
        # H = I - 2 v v^T / (v^T v), applied to the trailing block of r
        # and accumulated into q via q <- q H (H symmetric).
        r[k:, k:] -= np.outer(v, (2.0 / v_norm2) * (v @ r[k:, k:]))
        q[:, k:] -= np.outer(q[:, k:] @ v, (2.0 / v_norm2) * v)
        r[k + 1:, k] = 0.0
    return q, r


def mean_abs_diag(r: np.ndarray) -> float:
    """Mean absolute value of the leading diagonal of a factor matrix."""
    d = min(r.shape)
    return float(np.abs(np.diagonal(r)[:d]).mean())
