"""Backend dispatch for the hot kernels.

OVSEG_BACKEND=numba (default) uses the jitted kernels; OVSEG_BACKEND=numpy
forces the pure-numpy fallback. If numba is missing the fallback is used
silently. `benchmarks/bench_kernels.py` times the two paths side by side.
"""

import os

_requested = os.environ.get("OVSEG_BACKEND", "numba").strip().lower()

if _requested == "numpy":
    from . import numpy_impl as _impl
elif _requested == "numba":
    try:
        from . import numba_impl as _impl
    except ImportError:
        from . import numpy_impl as _impl
else:
    raise ValueError(
        f"OVSEG_BACKEND must be 'numba' or 'numpy', got {_requested!r}"
    )

BACKEND = _impl.NAME

im2col = _impl.im2col
col2im = _impl.col2im
bilinear_resize = _impl.bilinear_resize
bilinear_resize_grad = _impl.bilinear_resize_grad
confusion_accumulate = _impl.confusion_accumulate
