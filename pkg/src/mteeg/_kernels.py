"""Hot inner loops: sliding-window conv1d and row normalization.

Each kernel exists twice, a numba ``@njit`` version and a pure-numpy version.
The active pair is chosen once at import time from ``MTEEG_KERNELS``
(``numba`` default, ``numpy`` forces the fallback). Both are always importable
under explicit names so benchmarks and tests can compare them.
"""

import os

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        def dec(f):
            return f

        return dec if not args or not callable(args[0]) else args[0]


# -----------------------------------------------------------------------------
# numpy path
# -----------------------------------------------------------------------------


def conv1d_fwd_numpy(xp, w, stride):
    """xp (N, Cin, Lp) already padded, w (Cout, Cin, k) -> (N, Cout, Lout)."""
    k = w.shape[2]
    cols = sliding_window_view(xp, k, axis=2)[:, :, ::stride, :]  # N, Cin, Lout, k
    out = np.tensordot(cols, w, axes=([1, 3], [1, 2]))  # N, Lout, Cout
    return np.ascontiguousarray(out.transpose(0, 2, 1))


def conv1d_bwd_input_numpy(g, w, stride, lp):
    n, _, lout = g.shape
    cin, k = w.shape[1], w.shape[2]
    dcols = np.tensordot(g, w, axes=([1], [0]))  # N, Lout, Cin, k
    dxp = np.zeros((n, cin, lp))
    stop = stride * (lout - 1) + 1
    for t in range(k):
        dxp[:, :, t : t + stop : stride] += dcols[:, :, :, t].transpose(0, 2, 1)
    return dxp


def conv1d_bwd_weight_numpy(g, xp, k, stride):
    cols = sliding_window_view(xp, k, axis=2)[:, :, ::stride, :]
    return np.tensordot(g, cols, axes=([0, 2], [0, 2]))  # Cout, Cin, k


def rownorm_fwd_numpy(x, eps):
    """Standardize each row of a 2-D array. Returns (xhat, rstd)."""
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    return xc * rstd, rstd[:, 0]


def rownorm_bwd_numpy(g, xhat, rstd):
    gm = g.mean(axis=1, keepdims=True)
    gxm = (g * xhat).mean(axis=1, keepdims=True)
    return rstd[:, None] * (g - gm - xhat * gxm)


# -----------------------------------------------------------------------------
# numba path
# -----------------------------------------------------------------------------


@njit(cache=True, fastmath=True)
def conv1d_fwd_numba(xp, w, stride):
    n, cin, lp = xp.shape
    cout, _, k = w.shape
    lout = (lp - k) // stride + 1
    out = np.zeros((n, cout, lout))
    # output position innermost so the loop body is a contiguous axpy
    for b in range(n):
        for o in range(cout):
            for c in range(cin):
                for t in range(k):
                    wv = w[o, c, t]
                    for l in range(lout):
                        out[b, o, l] += wv * xp[b, c, l * stride + t]
    return out


@njit(cache=True, fastmath=True)
def conv1d_bwd_input_numba(g, w, stride, lp):
    n, cout, lout = g.shape
    cin, k = w.shape[1], w.shape[2]
    dxp = np.zeros((n, cin, lp))
    for b in range(n):
        for c in range(cin):
            for o in range(cout):
                for t in range(k):
                    wv = w[o, c, t]
                    for l in range(lout):
                        dxp[b, c, l * stride + t] += wv * g[b, o, l]
    return dxp


@njit(cache=True, fastmath=True)
def conv1d_bwd_weight_numba(g, xp, k, stride):
    n, cout, lout = g.shape
    cin = xp.shape[1]
    dw = np.zeros((cout, cin, k))
    for b in range(n):
        for o in range(cout):
            for l in range(lout):
                gv = g[b, o, l]
                s0 = l * stride
                for c in range(cin):
                    for t in range(k):
                        dw[o, c, t] += gv * xp[b, c, s0 + t]
    return dw


@njit(cache=True)
def rownorm_fwd_numba(x, eps):
    r, m = x.shape
    xhat = np.empty_like(x)
    rstd = np.empty(r)
    for i in range(r):
        mu = 0.0
        for j in range(m):
            mu += x[i, j]
        mu /= m
        var = 0.0
        for j in range(m):
            d = x[i, j] - mu
            var += d * d
        var /= m
        s = 1.0 / np.sqrt(var + eps)
        rstd[i] = s
        for j in range(m):
            xhat[i, j] = (x[i, j] - mu) * s
    return xhat, rstd


@njit(cache=True)
def rownorm_bwd_numba(g, xhat, rstd):
    r, m = g.shape
    dx = np.empty_like(g)
    for i in range(r):
        gm = 0.0
        gxm = 0.0
        for j in range(m):
            gm += g[i, j]
            gxm += g[i, j] * xhat[i, j]
        gm /= m
        gxm /= m
        s = rstd[i]
        for j in range(m):
            dx[i, j] = s * (g[i, j] - gm - xhat[i, j] * gxm)
    return dx


# -----------------------------------------------------------------------------
# dispatch
# -----------------------------------------------------------------------------


def _select_backend():
    requested = os.environ.get("MTEEG_KERNELS", "numba").strip().lower()
    if requested not in ("numba", "numpy"):
        raise ValueError(f"MTEEG_KERNELS must be 'numba' or 'numpy', got {requested!r}")
    if requested == "numba" and not HAVE_NUMBA:
        return "numpy"
    return requested


BACKEND = _select_backend()

if BACKEND == "numba":
    conv1d_fwd = conv1d_fwd_numba
    conv1d_bwd_input = conv1d_bwd_input_numba
    conv1d_bwd_weight = conv1d_bwd_weight_numba
    rownorm_fwd = rownorm_fwd_numba
    rownorm_bwd = rownorm_bwd_numba
else:
    conv1d_fwd = conv1d_fwd_numpy
    conv1d_bwd_input = conv1d_bwd_input_numpy
    conv1d_bwd_weight = conv1d_bwd_weight_numpy
    rownorm_fwd = rownorm_fwd_numpy
    rownorm_bwd = rownorm_bwd_numpy
