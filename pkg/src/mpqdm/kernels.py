"""Kernel backend selection.

The compiled extension ``_ckernels`` is used when it imports; otherwise (or
when ``MPQDM_PURE_PYTHON=1`` is set) the numpy implementation is used. Every
entry point takes float64 C-contiguous 2-D data with one parameter per row.
"""
import os

import numpy as np

from . import _pykernels

if os.environ.get("MPQDM_PURE_PYTHON", "") not in ("", "0"):
    _impl = _pykernels
    BACKEND = "python"
else:
    try:
        from . import _ckernels as _impl

        BACKEND = "cython"
    except ImportError:
        _impl = _pykernels
        BACKEND = "python"


def _rows(x):
    return np.ascontiguousarray(x, dtype=np.float64)


def _vec(v):
    return np.ascontiguousarray(v, dtype=np.float64).reshape(-1)


def round_half_away(x):
    x = np.asarray(x, dtype=np.float64)
    return _impl.round_half_away(_rows(x.reshape(1, -1))).reshape(x.shape)


def quantize_rows(x, scale, zero, qmax):
    return _impl.quantize_rows(_rows(x), _vec(scale), _vec(zero), _vec(qmax))


def fake_quant_rows(x, scale, zero, qmax):
    return _impl.fake_quant_rows(_rows(x), _vec(scale), _vec(zero), _vec(qmax))


def fake_quant_rows_ste(x, scale, zero, qmax):
    return _impl.fake_quant_rows_ste(_rows(x), _vec(scale), _vec(zero), _vec(qmax))


def kurtosis_rows(x):
    return _impl.kurtosis_rows(_rows(x))


def backends():
    """Map of backend name to implementation module, for benchmarks and tests."""
    out = {"python": _pykernels}
    try:
        from . import _ckernels

        out["cython"] = _ckernels
    except ImportError:
        pass
    return out
