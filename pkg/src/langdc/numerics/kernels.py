"""Kernel backend selection.

The compiled extension ``_ckernels`` is used when it imports; otherwise the numpy
fallback in ``_pykernels`` is used. Setting ``LANGDC_KERNELS=python`` forces the
fallback. Results agree to rounding error, not bitwise; training runs are
deterministic within one backend.
"""

import os

import numpy as np

from . import _pykernels

try:
    from . import _ckernels
except ImportError:  # extension not built
    _ckernels = None

_BACKENDS = {"python": _pykernels}
if _ckernels is not None:
    _BACKENDS["cython"] = _ckernels

_active = None


def available_backends():
    return sorted(_BACKENDS)


def set_backend(name):
    global _active
    if name not in _BACKENDS:
        raise ValueError(f"kernel backend {name!r} unavailable; have {available_backends()}")
    _active = name


def get_backend():
    return _active


def _default():
    forced = os.environ.get("LANGDC_KERNELS", "").strip().lower()
    if forced:
        return forced
    return "cython" if "cython" in _BACKENDS else "python"


set_backend(_default())


def _c(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def softmax_fwd(x2d, rows, causal=False, offset=0):
    return _BACKENDS[_active].softmax_fwd(_c(x2d), int(rows), bool(causal), int(offset))


def softmax_bwd(y2d, gy2d, rows, causal=False, offset=0):
    return _BACKENDS[_active].softmax_bwd(_c(y2d), _c(gy2d), int(rows), bool(causal), int(offset))


def layer_norm_fwd(x2d, gain, bias, eps):
    return _BACKENDS[_active].layer_norm_fwd(_c(x2d), _c(gain), _c(bias), float(eps))


def layer_norm_bwd(gy2d, xhat, rstd, gain):
    return _BACKENDS[_active].layer_norm_bwd(_c(gy2d), _c(xhat), _c(rstd), _c(gain))


def gelu_fwd(x):
    shape = x.shape
    return _BACKENDS[_active].gelu_fwd(_c(x).reshape(-1)).reshape(shape)


def gelu_bwd(x, gy):
    shape = x.shape
    return _BACKENDS[_active].gelu_bwd(_c(x).reshape(-1), _c(gy).reshape(-1)).reshape(shape)


def xent_fwd(logits2d, targets, ignore_index):
    t = np.ascontiguousarray(targets, dtype=np.int64)
    return _BACKENDS[_active].xent_fwd(_c(logits2d), t, int(ignore_index))
