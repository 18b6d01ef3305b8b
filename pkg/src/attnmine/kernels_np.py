"""Pure-numpy convolution kernels.

Fallback implementations of the hot loops in ``_convkern``. Both backends
share the same call signatures and operate on pre-padded inputs; padding
and argument validation live in :mod:`attnmine.autodiff`.
"""

import numpy as np

BACKEND = "numpy"


def conv2d_forward(xp, w, bias, stride):
    """Cross-correlate ``xp`` [B,Cin,Hp,Wp] with ``w`` [Cout,Cin,k,k].

    ``xp`` is already padded; output spatial size is
    ``(Hp - k) // stride + 1`` per axis.
    """
    k = w.shape[2]
    windows = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride]
    out = np.einsum("bchwij,ocij->bohw", windows, w, optimize=True)
    out += bias[None, :, None, None]
    return np.ascontiguousarray(out)


def conv2d_backward_input(g, w, stride, hp, wp):
    """Gradient of the padded input given output gradient ``g``."""
    b, _, ho, wo = g.shape
    cin = w.shape[1]
    k = w.shape[2]
    gx = np.zeros((b, cin, hp, wp), dtype=g.dtype)
    for i in range(k):
        for j in range(k):
            patch = np.einsum("bohw,oc->bchw", g, w[:, :, i, j], optimize=True)
            gx[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += patch
    return gx


def conv2d_backward_kernel(g, xp, k, stride):
    """Gradient of the kernel given output gradient ``g`` and padded input."""
    _, _, ho, wo = g.shape
    cout = g.shape[1]
    cin = xp.shape[1]
    gw = np.empty((cout, cin, k, k), dtype=g.dtype)
    for i in range(k):
        for j in range(k):
            patch = xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
            gw[:, :, i, j] = np.einsum("bohw,bchw->oc", g, patch, optimize=True)
    return gw
