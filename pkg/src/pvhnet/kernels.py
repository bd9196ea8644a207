"""Kernel backend selection.

The compiled extension is used when importable; set ``PVHNET_BACKEND=python``
to force the numpy fallback. :func:`use_backend` switches at runtime (tests
and the benchmark compare both).
"""

from __future__ import annotations

import contextlib
import os

from pvhnet import _pykernels

try:
    from pvhnet import _ckernels
except ImportError:  # extension not built
    _ckernels = None

MODE_PRODUCT = _pykernels.MODE_PRODUCT
MODE_INVERSE_LOGISTIC = _pykernels.MODE_INVERSE_LOGISTIC

_BACKENDS = {"python": _pykernels}
if _ckernels is not None:
    _BACKENDS["cython"] = _ckernels

_impl = _pykernels
_threads = 1


def available_backends() -> list[str]:
    return sorted(_BACKENDS)


def backend() -> str:
    return "cython" if _impl is _ckernels else "python"


def set_backend(name: str) -> None:
    global _impl
    if name not in _BACKENDS:
        raise ValueError(f"backend {name!r} unavailable; have {available_backends()}")
    _impl = _BACKENDS[name]


@contextlib.contextmanager
def use_backend(name: str):
    previous = backend()
    set_backend(name)
    try:
        yield
    finally:
        set_backend(previous)


def set_num_threads(n: int) -> None:
    global _threads
    _threads = max(1, int(n))


def num_threads() -> int:
    return _threads


def conv3d_forward(xp, w, stride):
    return _impl.conv3d_forward(xp, w, tuple(stride), num_threads=_threads)


def conv3d_backward_input(g, w, stride, padded_shape):
    return _impl.conv3d_backward_input(g, w, tuple(stride), tuple(padded_shape),
                                       num_threads=_threads)


def conv3d_backward_weight(xp, g, ksize, stride):
    return _impl.conv3d_backward_weight(xp, g, tuple(ksize), tuple(stride), num_threads=_threads)


def maxpool3d_forward(x, window, stride):
    return _impl.maxpool3d_forward(x, tuple(window), tuple(stride))


def maxpool3d_backward(g, argmax, input_shape):
    return _impl.maxpool3d_backward(g, argmax, tuple(input_shape))


def pvh_occupancy(centers, proj, mattes, sizes, mode):
    return _impl.pvh_occupancy(centers, proj, mattes, sizes, int(mode), num_threads=_threads)


_requested = os.environ.get("PVHNET_BACKEND", "").strip().lower()
if _requested:
    set_backend(_requested)
elif _ckernels is not None:
    set_backend("cython")
