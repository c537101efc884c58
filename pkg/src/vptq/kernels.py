"""Hot-kernel dispatch.

The compiled extension ``_ckernels`` is used when it was built; otherwise the
numpy fallback in ``_pykernels`` is selected. Setting ``VPTQ_PURE_PYTHON=1``
forces the fallback. Both backends give bit-identical results.
"""

import os

from vptq import _pykernels

try:
    from vptq import _ckernels
except ImportError:  # extension not built
    _ckernels = None

if _ckernels is not None and not os.environ.get("VPTQ_PURE_PYTHON"):
    _impl = _ckernels
    BACKEND = "cython"
else:
    _impl = _pykernels
    BACKEND = "python"

nearest = _impl.nearest
pack_bits = _impl.pack
unpack_bits = _impl.unpack

__all__ = ["BACKEND", "nearest", "pack_bits", "unpack_bits"]
