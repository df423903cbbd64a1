"""Kernel backend selection.

The compiled extension is used when it was built; otherwise the numpy
reference implementation is loaded.  Set ``TROJSCOPE_KERNELS=python`` to
force the fallback (used by the benchmark and the cross-check tests).
"""
import os

from . import _kernels_py

if os.environ.get("TROJSCOPE_KERNELS", "").lower() == "python":
    _impl = _kernels_py
else:
    try:
        from . import _ckernels as _impl
    except ImportError:  # extension not built
        _impl = _kernels_py

BACKEND = "cython" if _impl is not _kernels_py else "python"

im2col = _impl.im2col
col2im = _impl.col2im
maxpool2 = _impl.maxpool2
maxpool2_backward = _impl.maxpool2_backward
masked_ssd = _impl.masked_ssd
