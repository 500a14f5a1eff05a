"""Pure-Python (numpy) convolution kernels.

Same contract as the compiled ``_ckernels`` module. Every kernel works on
zero-padded planes in a "padded-width" layout: an output pixel (i, j) lives
at flat offset ``i * Wp + j`` where ``Wp = W + 2p``. In that layout the input
window for tap (kh, kw) is a plain strided matrix starting at
``kh * Wp + kw``, so each tap is one GEMM over ``N = (H - 1) * Wp + W``
columns with no im2col copy. Columns with ``j >= W`` are scratch and are
discarded by the caller (or are zero, for gradients).
"""
import numpy as np
from numpy.lib.stride_tricks import as_strided

NAME = "python"


def _tap_view(flat, off, rows, n, row_stride):
    it = flat.itemsize
    return as_strided(flat[off:], shape=(rows, n), strides=(row_stride * it, it))


def forward(xpad, taps, H, W, out):
    """out[b, o, :N] += sum_taps taps[kh, kw] @ window(xpad[b], kh, kw).

    xpad: [B, C, Hp, Wp]; taps: [r, r, O, C]; out: [B, O, H * Wp] (zeroed).
    Returns the number of (sample, tap) GEMM blocks executed.
    """
    B, C, Hp, Wp = xpad.shape
    r = taps.shape[0]
    n = (H - 1) * Wp + W
    plane = Hp * Wp
    for b in range(B):
        flat = xpad[b].reshape(-1)
        acc = out[b, :, :n]
        for kh in range(r):
            for kw in range(r):
                acc += taps[kh, kw] @ _tap_view(flat, kh * Wp + kw, C, n, plane)
    return B * r * r


def wgrad(xpad, gpad, H, W, r, out):
    """Per-sample kernel gradients: out[b, kh, kw] = gpad[b] @ window^T.

    gpad: [B, O, H * Wp] with scratch columns zeroed; out: [B, r, r, O, C].
    """
    B, C, Hp, Wp = xpad.shape
    n = (H - 1) * Wp + W
    plane = Hp * Wp
    for b in range(B):
        flat = xpad[b].reshape(-1)
        g = gpad[b, :, :n]
        for kh in range(r):
            for kw in range(r):
                np.matmul(g, _tap_view(flat, kh * Wp + kw, C, n, plane).T, out=out[b, kh, kw])
    return B * r * r


def igrad(gpad, taps, H, W, gxpad):
    """Transposed convolution: scatter taps^T @ gpad[b] into gxpad[b].

    gxpad: [B, C, Hp, Wp] (zeroed); the caller crops the interior.
    """
    B, C, Hp, Wp = gxpad.shape
    r = taps.shape[0]
    n = (H - 1) * Wp + W
    plane = Hp * Wp
    for b in range(B):
        flat = gxpad[b].reshape(-1)
        g = gpad[b, :, :n]
        for kh in range(r):
            for kw in range(r):
                view = _tap_view(flat, kh * Wp + kw, C, n, plane)
                view += taps[kh, kw].T @ g
    return B * r * r
