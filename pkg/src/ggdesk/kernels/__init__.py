"""Hot convolution kernels with two interchangeable backends.

The numba backend fuses patch extraction with a BLAS matmul inside
``@njit`` functions; the numpy backend is a plain im2col implementation.
Select with ``GG_KERNELS=numba`` or ``GG_KERNELS=numpy`` (default: numba
when importable).  ``benchmarks/kernel_bench.py`` compares the two.

All functions take and return contiguous float32/float64 ndarrays and are
shape-checked by the calling tensor ops, not here.
"""

import os

_requested = os.environ.get("GG_KERNELS", "").strip().lower()

if _requested not in ("numpy", "numba", ""):
    raise ValueError(f"GG_KERNELS must be 'numba' or 'numpy', got {_requested!r}")

if _requested == "numpy":
    BACKEND = "numpy"
else:
    try:
        import numba  # noqa: F401
        BACKEND = "numba"
    except ImportError:
        if _requested == "numba":
            raise
        BACKEND = "numpy"

if BACKEND == "numba":
    from . import _numba_impl as _impl
else:
    from . import _numpy_impl as _impl

conv2d = _impl.conv2d
conv2d_dx = _impl.conv2d_dx
conv2d_dw = _impl.conv2d_dw
psconv2d = _impl.psconv2d
psconv2d_dx = _impl.psconv2d_dx
psconv2d_dw = _impl.psconv2d_dw


def conv_out_size(size, k, stride, pad):
    """Output spatial extent of a cross-correlation."""
    return (size + 2 * pad - k) // stride + 1
