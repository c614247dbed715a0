"""Kernel backend selection.

The compiled ``_ckernels`` extension is used when it has been built;
otherwise the numpy fallback in ``_pykernels`` is loaded. Setting
``EDGEDETECT_PURE_PYTHON=1`` forces the fallback.

``sign_pack`` always uses the numpy version: ``np.packbits`` is SIMD
vectorized and beats the compiled loop (see benchmarks/bench_kernels.py).
"""
from __future__ import annotations

import os

from . import _pykernels

if os.environ.get("EDGEDETECT_PURE_PYTHON", "") not in ("", "0"):
    _impl = _pykernels
else:
    try:
        from . import _ckernels as _impl
    except ImportError:  # extension not built
        _impl = _pykernels

BACKEND = _impl.NAME
softmax_sgd_epoch = _impl.softmax_sgd_epoch
sign_pack = _pykernels.sign_pack
unpack_signs = _impl.unpack_signs
sum_packed_signs = _impl.sum_packed_signs


def available_backends():
    """Map of backend name to kernel module for every importable backend."""
    out = {"python": _pykernels}
    try:
        from . import _ckernels
    except ImportError:
        pass
    else:
        out["cython"] = _ckernels
    return out
