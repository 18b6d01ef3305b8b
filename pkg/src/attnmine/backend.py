"""Kernel backend selection.

Prefers the compiled Cython kernels and falls back to the numpy
implementations when the extension is unavailable. Set the environment
variable ``ATTNMINE_FORCE_NUMPY=1`` to force the fallback (used by the
benchmark and by backend-equivalence tests).
"""

import os

from . import kernels_np

_force_numpy = os.environ.get("ATTNMINE_FORCE_NUMPY", "") not in ("", "0")

if not _force_numpy:
    try:
        from . import _convkern as _impl
    except ImportError:
        _impl = kernels_np
else:
    _impl = kernels_np

NATIVE = _impl is not kernels_np
BACKEND = _impl.BACKEND

conv2d_forward = _impl.conv2d_forward
conv2d_backward_input = _impl.conv2d_backward_input
conv2d_backward_kernel = _impl.conv2d_backward_kernel
