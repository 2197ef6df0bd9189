"""Stride-1 dilated convolution kernels.

Two interchangeable backends compute the same three reductions:

* ``numba``  -- ``@njit`` im2col / col2im loops around a BLAS matrix product
* ``numpy``  -- shifted-slice gather followed by a single ``tensordot``

The numba path is used when numba imports cleanly and the environment variable
``SDANET_PURE_NUMPY`` is unset (or ``0``).  Both accumulate in float64.
"""

import os

import numpy as np

_FORCE_NUMPY = os.environ.get("SDANET_PURE_NUMPY", "0") not in ("", "0", "false", "False")

try:
    if _FORCE_NUMPY:
        raise ImportError("pure-numpy path requested")
    from numba import njit

    HAVE_NUMBA = True
except ImportError:
    HAVE_NUMBA = False


def _pad(x, padding):
    if padding == 0:
        return np.ascontiguousarray(x)
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


# ---------------------------------------------------------------------------
# numpy backend
# ---------------------------------------------------------------------------

def _gather(xp, k, dilation, H, W):
    # (N, C, k, k, H, W) view of every tap, built from k*k shifted slices
    N, C = xp.shape[:2]
    cols = np.empty((N, C, k, k, H, W), dtype=np.float64)
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = xp[:, :, i * dilation:i * dilation + H, j * dilation:j * dilation + W]
    return cols


def conv_forward_numpy(x, w, b, dilation, padding):
    N, C, H, W = x.shape
    k = w.shape[2]
    Ho = H + 2 * padding - dilation * (k - 1)
    Wo = W + 2 * padding - dilation * (k - 1)
    if k == 1 and padding == 0:
        out = np.tensordot(w[:, :, 0, 0], x, axes=([1], [1]))  # (O, N, H, W)
    else:
        cols = _gather(_pad(x, padding), k, dilation, Ho, Wo)
        out = np.tensordot(w, cols, axes=([1, 2, 3], [1, 2, 3]))  # (O, N, Ho, Wo)
    out = out.transpose(1, 0, 2, 3) + b[None, :, None, None]
    return np.ascontiguousarray(out)


def conv_backward_numpy(x, w, g, dilation, padding):
    """Return ``(grad_x, grad_w, grad_b)`` for upstream gradient ``g``."""
    N, C, H, W = x.shape
    k = w.shape[2]
    Ho, Wo = g.shape[2:]
    grad_b = g.sum(axis=(0, 2, 3))
    if k == 1 and padding == 0:
        grad_w = np.tensordot(g, x, axes=([0, 2, 3], [0, 2, 3]))[:, :, None, None]
        grad_x = np.tensordot(w[:, :, 0, 0], g, axes=([0], [1])).transpose(1, 0, 2, 3)
        return np.ascontiguousarray(grad_x), grad_w, grad_b
    xp = _pad(x, padding)
    cols = _gather(xp, k, dilation, Ho, Wo)
    grad_w = np.tensordot(g, cols, axes=([0, 2, 3], [0, 4, 5]))  # (O, C, k, k)
    gcols = np.tensordot(w, g, axes=([0], [1]))  # (C, k, k, N, Ho, Wo)
    gxp = np.zeros_like(xp)
    for i in range(k):
        for j in range(k):
            gxp[:, :, i * dilation:i * dilation + Ho, j * dilation:j * dilation + Wo] += (
                gcols[:, i, j].transpose(1, 0, 2, 3)
            )
    grad_x = gxp[:, :, padding:padding + H, padding:padding + W]
    return np.ascontiguousarray(grad_x), grad_w, grad_b


# ---------------------------------------------------------------------------
# numba backend
# ---------------------------------------------------------------------------

if HAVE_NUMBA:

    @njit(cache=True, nogil=True)
    def _im2col(xp, k, dilation, Ho, Wo):
        # rows are (c, i, j) taps, columns are (n, y, x) output positions
        N, C = xp.shape[0], xp.shape[1]
        cols = np.empty((C * k * k, N * Ho * Wo), dtype=np.float64)
        for c in range(C):
            for i in range(k):
                for j in range(k):
                    row = (c * k + i) * k + j
                    r0 = i * dilation
                    c0 = j * dilation
                    for n in range(N):
                        base = n * Ho * Wo
                        for y in range(Ho):
                            for x in range(Wo):
                                cols[row, base + y * Wo + x] = xp[n, c, r0 + y, c0 + x]
        return cols

    @njit(cache=True, nogil=True)
    def _col2im(gcols, N, C, Hp, Wp, k, dilation, Ho, Wo):
        gxp = np.zeros((N, C, Hp, Wp), dtype=np.float64)
        for c in range(C):
            for i in range(k):
                for j in range(k):
                    row = (c * k + i) * k + j
                    r0 = i * dilation
                    c0 = j * dilation
                    for n in range(N):
                        base = n * Ho * Wo
                        for y in range(Ho):
                            for x in range(Wo):
                                gxp[n, c, r0 + y, c0 + x] += gcols[row, base + y * Wo + x]
        return gxp

    def _out_size(x, k, dilation, padding):
        H, W = x.shape[2:]
        return H + 2 * padding - dilation * (k - 1), W + 2 * padding - dilation * (k - 1)

    def conv_forward_numba(x, w, b, dilation, padding):
        N = x.shape[0]
        O, k = w.shape[0], w.shape[2]
        if k == 1 and padding == 0:
            # nothing to gather; a plain matrix product
            return conv_forward_numpy(x, w, b, dilation, padding)
        Ho, Wo = _out_size(x, k, dilation, padding)
        cols = _im2col(_pad(x, padding), k, dilation, Ho, Wo)
        out = w.reshape(O, -1) @ cols  # (O, N*Ho*Wo)
        out = out.reshape(O, N, Ho, Wo).transpose(1, 0, 2, 3) + b[None, :, None, None]
        return np.ascontiguousarray(out)

    def conv_backward_numba(x, w, g, dilation, padding):
        N, C, H, W = x.shape
        O, k = w.shape[0], w.shape[2]
        if k == 1 and padding == 0:
            return conv_backward_numpy(x, w, g, dilation, padding)
        Ho, Wo = g.shape[2:]
        xp = _pad(x, padding)
        g2 = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(O, -1)
        cols = _im2col(xp, k, dilation, Ho, Wo)
        grad_w = (g2 @ cols.T).reshape(w.shape)
        gcols = np.ascontiguousarray(w.reshape(O, -1).T @ g2)
        gxp = _col2im(gcols, N, C, xp.shape[2], xp.shape[3], k, dilation, Ho, Wo)
        grad_x = gxp[:, :, padding:padding + H, padding:padding + W]
        return np.ascontiguousarray(grad_x), grad_w, g2.sum(axis=1)


BACKENDS = {"numpy": (conv_forward_numpy, conv_backward_numpy)}
if HAVE_NUMBA:
    BACKENDS["numba"] = (conv_forward_numba, conv_backward_numba)

DEFAULT_BACKEND = "numba" if HAVE_NUMBA else "numpy"
_active = DEFAULT_BACKEND


def set_backend(name):
    """Select the convolution backend for subsequent calls; returns the previous one."""
    global _active
    if name not in BACKENDS:
        raise ValueError(f"unknown or unavailable backend {name!r}; have {sorted(BACKENDS)}")
    prev, _active = _active, name
    return prev


def get_backend():
    return _active


def conv_forward(x, w, b, dilation, padding):
    return BACKENDS[_active][0](x, w, b, dilation, padding)


def conv_backward(x, w, g, dilation, padding):
    return BACKENDS[_active][1](x, w, g, dilation, padding)
