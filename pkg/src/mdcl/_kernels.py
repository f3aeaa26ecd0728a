"""Hot numeric kernels with a numba path and a pure-numpy fallback.

The backend is picked once at import time. Set ``MDCL_NUMBA=0`` to force the
numpy path (useful for debugging and for the benchmark comparison); numba is
also skipped automatically when it cannot be imported.
"""
from __future__ import annotations

import math
import os

import numpy as np

_FLAG = os.environ.get("MDCL_NUMBA", "1").strip().lower()
_WANT_NUMBA = _FLAG not in ("0", "false", "no", "off")

try:
    if not _WANT_NUMBA:
        raise ImportError("numba disabled by MDCL_NUMBA")
    from numba import njit
    HAVE_NUMBA = True
except ImportError:
    HAVE_NUMBA = False

BACKEND = "numba" if HAVE_NUMBA else "numpy"


# ---------------------------------------------------------------------------
# numpy implementations
# ---------------------------------------------------------------------------

def contrastive_np(u, pos, tau):
    """NT-Xent loss over unit rows ``u`` with boolean positive mask ``pos``.

    Returns ``(loss, grad_u)``. Anchors without positives contribute zero and
    the sum is divided by the total anchor count.
    """
    m = u.shape[0]
    s = (u @ u.T) / tau
    np.fill_diagonal(s, -np.inf)
    smax = s.max(axis=1, keepdims=True)
    e = np.exp(s - smax)
    denom = e.sum(axis=1, keepdims=True)
    lse = smax + np.log(denom)
    logp = s - lse
    np.fill_diagonal(logp, 0.0)
    posf = pos.astype(np.float64)
    cnt = posf.sum(axis=1)
    has = cnt > 0
    safe = np.where(has, cnt, 1.0)
    per_anchor = np.where(has, -(posf * logp).sum(axis=1) / safe, 0.0)
    loss = per_anchor.sum() / m

    soft = e / denom
    g = (soft - posf / safe[:, None]) * has[:, None] / m
    grad = (g + g.T) @ u / tau
    return float(loss), grad


def margins_np(p):
    """Best minus second-best value per row."""
    part = np.partition(p, p.shape[1] - 2, axis=1)
    return part[:, -1] - part[:, -2]


# ---------------------------------------------------------------------------
# numba implementations
# ---------------------------------------------------------------------------

def _contrastive_loop(u, pos, tau):
    m, d = u.shape
    s = np.empty((m, m))
    for i in range(m):
        for j in range(i, m):
            acc = 0.0
            for k in range(d):
                acc += u[i, k] * u[j, k]
            s[i, j] = acc / tau
            s[j, i] = acc / tau
    g = np.zeros((m, m))
    loss = 0.0
    for i in range(m):
        smax = -np.inf
        for a in range(m):
            if a != i and s[i, a] > smax:
                smax = s[i, a]
        denom = 0.0
        for a in range(m):
            if a != i:
                denom += math.exp(s[i, a] - smax)
        lse = smax + math.log(denom)
        cnt = 0
        acc = 0.0
        for a in range(m):
            if a != i and pos[i, a]:
                cnt += 1
                acc += s[i, a] - lse
        if cnt == 0:
            continue
        loss -= acc / cnt
        for a in range(m):
            if a != i:
                w = math.exp(s[i, a] - lse)
                if pos[i, a]:
                    w -= 1.0 / cnt
                g[i, a] = w / m
    grad = np.zeros((m, d))
    for i in range(m):
        for a in range(m):
            c = (g[i, a] + g[a, i]) / tau
            if c != 0.0:
                for k in range(d):
                    grad[i, k] += c * u[a, k]
    return loss / m, grad


def _margins_loop(p):
    n, c = p.shape
    out = np.empty(n)
    for i in range(n):
        best = -np.inf
        second = -np.inf
        for j in range(c):
            v = p[i, j]
            if v > best:
                second = best
                best = v
            elif v > second:
                second = v
        out[i] = best - second
    return out


if HAVE_NUMBA:
    _contrastive_nb = njit(cache=True)(_contrastive_loop)
    _margins_nb = njit(cache=True)(_margins_loop)

    def contrastive_nb(u, pos, tau):
        loss, grad = _contrastive_nb(
            np.ascontiguousarray(u, dtype=np.float64),
            np.ascontiguousarray(pos, dtype=np.bool_),
            float(tau),
        )
        return float(loss), grad

    def margins_nb(p):
        return _margins_nb(np.ascontiguousarray(p, dtype=np.float64))

    contrastive = contrastive_nb
    margins = margins_nb
else:
    contrastive = contrastive_np
    margins = margins_np
