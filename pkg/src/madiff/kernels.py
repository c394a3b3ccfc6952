"""Hot numeric kernels: 1-D convolution forward/backward.

Two interchangeable implementations are provided:

* a pure-numpy im2col / col2im version riding the BLAS sgemm, and
* a numba ``@njit(parallel=True)`` version.

``MADIFF_NUMBA=1`` selects the numba path; the default is the numpy path,
which benchmarks faster wherever a tuned BLAS is present (see
``madiff bench-kernels`` for the comparison on this machine).
"""

from __future__ import annotations

import os

import numpy as np

_FLAG = os.environ.get("MADIFF_NUMBA", "0").strip().lower()
NUMBA_REQUESTED = _FLAG in ("1", "true", "on", "yes", "numba")

# the TBB probe on this image emits a warning; omp behaves identically here
os.environ.setdefault("NUMBA_THREADING_LAYER", "omp")

try:
    from numba import njit, prange

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a hard dep, but stay usable
    HAVE_NUMBA = False


def _out_len(t_in: int, k: int, stride: int, pad: int) -> int:
    return (t_in + 2 * pad - k) // stride + 1


# ---------------------------------------------------------------------------
# numpy path (im2col + BLAS)
# ---------------------------------------------------------------------------

def _im2col(x: np.ndarray, k: int, stride: int, pad: int) -> np.ndarray:
    """(B, C, T) -> (B, T_out, C*k) patch matrix, zero padded."""
    b, c, t = x.shape
    if pad:
        xp = np.zeros((b, c, t + 2 * pad), dtype=x.dtype)
        xp[:, :, pad : pad + t] = x
    else:
        xp = x
    t_out = _out_len(t, k, stride, pad)
    s0, s1, s2 = xp.strides
    cols = np.lib.stride_tricks.as_strided(
        xp, shape=(b, t_out, c, k), strides=(s0, s2 * stride, s1, s2)
    )
    return cols.reshape(b, t_out, c * k)


def conv1d_forward_numpy(x, w, stride=1, pad=0):
    b = x.shape[0]
    c_out, c_in, k = w.shape
    cols = _im2col(np.ascontiguousarray(x), k, stride, pad)
    t_out = cols.shape[1]
    out = cols.reshape(b * t_out, c_in * k) @ w.reshape(c_out, c_in * k).T
    return np.ascontiguousarray(out.reshape(b, t_out, c_out).transpose(0, 2, 1))


def conv1d_backward_w_numpy(x, gout, k, stride=1, pad=0):
    b, c_out, t_out = gout.shape
    cols = _im2col(np.ascontiguousarray(x), k, stride, pad)
    gmat = gout.transpose(0, 2, 1).reshape(b * t_out, c_out)
    gw = gmat.T @ cols.reshape(b * t_out, -1)
    return gw.reshape(c_out, x.shape[1], k)


def conv1d_backward_x_numpy(gout, w, t_in, stride=1, pad=0):
    b, c_out, t_out = gout.shape
    c_out2, c_in, k = w.shape
    gcols = gout.transpose(0, 2, 1).reshape(b * t_out, c_out) @ w.reshape(c_out, -1)
    gcols = gcols.reshape(b, t_out, c_in, k)
    gxp = np.zeros((b, c_in, t_in + 2 * pad), dtype=gout.dtype)
    # scatter-add each tap; windows overlap so accumulate per offset
    for j in range(k):
        gxp[:, :, j : j + t_out * stride : stride] += gcols[:, :, :, j].transpose(0, 2, 1)
    return gxp[:, :, pad : pad + t_in] if pad else gxp


# ---------------------------------------------------------------------------
# numba path (direct loops, parallel over independent output slices)
# ---------------------------------------------------------------------------

if HAVE_NUMBA:

    @njit(parallel=True, cache=True, fastmath=True)
    def _conv1d_forward_nb(xp, w, stride, out):
        # xp is pre-padded: (B, C_in, T + 2*pad)
        b, c_in, _ = xp.shape
        c_out, _, k = w.shape
        t_out = out.shape[2]
        for idx in prange(b * c_out):
            i = idx // c_out
            co = idx % c_out
            acc = np.zeros(t_out, dtype=xp.dtype)
            for ci in range(c_in):
                row = xp[i, ci]
                for j in range(k):
                    wv = w[co, ci, j]
                    if stride == 1:
                        for t in range(t_out):
                            acc[t] += wv * row[t + j]
                    else:
                        for t in range(t_out):
                            acc[t] += wv * row[t * stride + j]
            out[i, co] = acc

    @njit(parallel=True, cache=True, fastmath=True)
    def _conv1d_backward_x_nb(gout, w, stride, pad, gx):
        b, c_out, t_out = gout.shape
        _, c_in, k = w.shape
        t_in = gx.shape[2]
        for idx in prange(b * c_in):
            i = idx // c_in
            ci = idx % c_in
            acc = np.zeros(t_in + 2 * pad, dtype=gout.dtype)
            for co in range(c_out):
                grow = gout[i, co]
                for j in range(k):
                    wv = w[co, ci, j]
                    if stride == 1:
                        for t in range(t_out):
                            acc[t + j] += wv * grow[t]
                    else:
                        for t in range(t_out):
                            acc[t * stride + j] += wv * grow[t]
            gx[i, ci] = acc[pad : pad + t_in]

    @njit(parallel=True, cache=True, fastmath=True)
    def _conv1d_backward_w_nb(xp, gout, stride, gw):
        b, c_in, _ = xp.shape
        c_out, _, k = gw.shape
        t_out = gout.shape[2]
        for idx in prange(c_out * c_in):
            co = idx // c_in
            ci = idx % c_in
            for j in range(k):
                acc = 0.0
                for i in range(b):
                    row = xp[i, ci]
                    grow = gout[i, co]
                    if stride == 1:
                        for t in range(t_out):
                            acc += row[t + j] * grow[t]
                    else:
                        for t in range(t_out):
                            acc += row[t * stride + j] * grow[t]
                gw[co, ci, j] = acc

    def _padded(x, pad):
        if pad == 0:
            return np.ascontiguousarray(x)
        b, c, t = x.shape
        xp = np.zeros((b, c, t + 2 * pad), dtype=x.dtype)
        xp[:, :, pad : pad + t] = x
        return xp

    def conv1d_forward_numba(x, w, stride=1, pad=0):
        w = np.ascontiguousarray(w)
        b = x.shape[0]
        c_out, _, k = w.shape
        out = np.empty((b, c_out, _out_len(x.shape[2], k, stride, pad)), dtype=x.dtype)
        _conv1d_forward_nb(_padded(x, pad), w, stride, out)
        return out

    def conv1d_backward_x_numba(gout, w, t_in, stride=1, pad=0):
        gout = np.ascontiguousarray(gout)
        w = np.ascontiguousarray(w)
        gx = np.empty((gout.shape[0], w.shape[1], t_in), dtype=gout.dtype)
        _conv1d_backward_x_nb(gout, w, stride, pad, gx)
        return gx

    def conv1d_backward_w_numba(x, gout, k, stride=1, pad=0):
        gout = np.ascontiguousarray(gout)
        gw = np.empty((gout.shape[1], x.shape[1], k), dtype=x.dtype)
        _conv1d_backward_w_nb(_padded(x, pad), gout, stride, gw)
        return gw


if NUMBA_REQUESTED and HAVE_NUMBA:
    conv1d_forward = conv1d_forward_numba
    conv1d_backward_x = conv1d_backward_x_numba
    conv1d_backward_w = conv1d_backward_w_numba
    ACTIVE_BACKEND = "numba"
else:
    conv1d_forward = conv1d_forward_numpy
    conv1d_backward_x = conv1d_backward_x_numpy
    conv1d_backward_w = conv1d_backward_w_numpy
    ACTIVE_BACKEND = "numpy"
