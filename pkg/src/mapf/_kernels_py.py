"""Pure-numpy implementations of the numerical kernels.

Every function here has a compiled twin in ``_ckernels.pyx`` with the same
signature and semantics. The two are interchangeable up to floating-point
summation order.
"""

import numpy as np


def logsumexp(a):
    a = np.asarray(a, dtype=np.float64)
    if a.size == 0:
        return -np.inf
    amax = a.max()
    if not np.isfinite(amax):
        return float(amax)
    return float(amax + np.log(np.sum(np.exp(a - amax))))


def normalize_log(a):
    """Return ``(w, lse)`` with ``w = exp(a - lse)`` summing to one."""
    a = np.asarray(a, dtype=np.float64)
    lse = logsumexp(a)
    if lse == -np.inf:
        return np.full(a.shape, np.nan), lse
    return np.exp(a - lse), lse


def weight_update(log_xi, log_lambda):
    """Fused ``new = log_xi + log_lambda`` with both log-sums.

    Returns ``(new, lse_new, lse_old)``.
    """
    log_xi = np.asarray(log_xi, dtype=np.float64)
    new = log_xi + np.asarray(log_lambda, dtype=np.float64)
    return new, logsumexp(new), logsumexp(log_xi)


def inverse_cdf(w, u):
    """Map sorted uniforms ``u`` in [0, 1) to indices under weights ``w``.

    Index ``j`` is returned for ``u`` in ``[c_{j-1}, c_j)`` where ``c`` is
    the running sum of ``w``. The last index absorbs round-off so the result
    always lies in ``[0, len(w))``.
    """
    w = np.asarray(w, dtype=np.float64)
    cw = np.cumsum(w)
    idx = np.searchsorted(cw, np.asarray(u, dtype=np.float64), side="right")
    # zero-weight tails must never be selected through round-off
    last = int(np.flatnonzero(w > 0)[-1]) if np.any(w > 0) else len(w) - 1
    np.minimum(idx, last, out=idx)
    return idx.astype(np.int64)


def nearest_segment(points, waypoints):
    """Batch point-to-polyline projection.

    Returns ``(seg, proj, dist)``: zero-based segment index minimizing the
    point-to-segment distance (lowest index on ties), the clamped projection
    onto that segment, and the distance.
    """
    p = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    wp = np.asarray(waypoints, dtype=np.float64)
    a = wp[:-1]
    d = wp[1:] - a
    seglen2 = np.einsum("ij,ij->i", d, d)
    rel = p[:, None, :] - a[None, :, :]
    s = np.einsum("msj,sj->ms", rel, d) / seglen2
    np.clip(s, 0.0, 1.0, out=s)
    proj = a[None, :, :] + s[:, :, None] * d[None, :, :]
    diff = p[:, None, :] - proj
    dist2 = np.einsum("msj,msj->ms", diff, diff)
    seg = np.argmin(dist2, axis=1)
    rows = np.arange(p.shape[0])
    return seg.astype(np.int64), proj[rows, seg], np.sqrt(dist2[rows, seg])
