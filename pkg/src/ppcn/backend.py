"""Kernel backend selection.

Two interchangeable implementations of the convolution kernels exist: a
compiled Cython core (ppcn._core, built at install time) and a pure numpy
fallback (ppcn._kernels_np). The compiled core is preferred when it
imported cleanly; PPCN_BACKEND=python or PPCN_BACKEND=compiled overrides
the choice, and PPCN_BACKEND=auto is the default behaviour.

Both backends are deterministic on a given machine: rerunning the same
call yields bit-identical output. Across the two backends results agree
to rounding only, since summation orders differ.
"""

from __future__ import annotations

import os

import numpy as np

from . import _kernels_np
from .errors import ConfigError, ShapeError

try:
    from . import _core
except ImportError:
    _core = None


class _CompiledAdapter:
    """Shape handling around the raw _core entry points."""

    NAME = "compiled"

    @staticmethod
    def conv1x1_forward(x, w, b):
        n, ci, h, wd = x.shape
        y = np.empty((n, w.shape[0], h, wd), dtype=x.dtype)
        _core.conv1x1_forward(x.reshape(n, ci, h * wd), w, b, y.reshape(n, -1, h * wd))
        return y

    @staticmethod
    def conv1x1_backward(x, w, gy):
        n, ci, h, wd = x.shape
        co = w.shape[0]
        gx = np.empty_like(x)
        gw = np.empty_like(w)
        gb = b_like(w)
        _core.conv1x1_backward(
            x.reshape(n, ci, h * wd), w, gy.reshape(n, co, h * wd),
            gx.reshape(n, ci, h * wd), gw, gb,
        )
        return gx, gw, gb

    @staticmethod
    def conv3x3_forward(x, w, b):
        y = np.empty((x.shape[0], w.shape[0], x.shape[2], x.shape[3]), dtype=x.dtype)
        _core.conv3x3_forward(x, w, b, y)
        return y

    @staticmethod
    def conv3x3_backward(x, w, gy):
        gx = np.empty_like(x)
        gw = np.empty_like(w)
        gb = b_like(w)
        _core.conv3x3_backward(x, w, gy, gx, gw, gb)
        return gx, gw, gb


def b_like(w):
    return np.empty(w.shape[0], dtype=w.dtype)


_BACKENDS = {"python": _kernels_np}
if _core is not None:
    _BACKENDS["compiled"] = _CompiledAdapter

_impl = None


def _select_initial():
    global _impl
    choice = os.environ.get("PPCN_BACKEND", "auto").strip().lower()
    if choice in ("", "auto"):
        _impl = _BACKENDS.get("compiled", _kernels_np)
    elif choice in _BACKENDS:
        _impl = _BACKENDS[choice]
    elif choice == "compiled":
        raise ConfigError("PPCN_BACKEND=compiled but the compiled core is not built")
    else:
        raise ConfigError(f"unknown PPCN_BACKEND value {choice!r} (auto, compiled or python)")


_select_initial()


def backend_name() -> str:
    return _impl.NAME


def available_backends() -> tuple[str, ...]:
    return tuple(sorted(_BACKENDS))


def set_backend(name: str) -> None:
    """Switch backends at runtime (used by tests and the benchmark)."""
    global _impl
    if name not in _BACKENDS:
        raise ConfigError(f"backend {name!r} not available; have {available_backends()}")
    _impl = _BACKENDS[name]


def _check4(x, name):
    if x.ndim != 4:
        raise ShapeError(f"{name} must be 4-d (N,C,H,W), got shape {x.shape}")
    return np.ascontiguousarray(x)


def conv1x1_forward(x, w, b):
    x = _check4(x, "x")
    if w.ndim != 2 or w.shape[1] != x.shape[1]:
        raise ShapeError(f"weight shape {w.shape} does not match input channels {x.shape[1]}")
    return _impl.conv1x1_forward(x, np.ascontiguousarray(w), np.ascontiguousarray(b))


def conv1x1_backward(x, w, gy):
    x = _check4(x, "x")
    gy = _check4(gy, "gy")
    if gy.shape != (x.shape[0], w.shape[0], x.shape[2], x.shape[3]):
        raise ShapeError(f"gradient shape {gy.shape} does not match output shape")
    return _impl.conv1x1_backward(x, np.ascontiguousarray(w), gy)


def conv3x3_forward(x, w, b):
    x = _check4(x, "x")
    if w.ndim != 4 or w.shape[1:] != (x.shape[1], 3, 3):
        raise ShapeError(f"weight shape {w.shape} does not match (Co,{x.shape[1]},3,3)")
    return _impl.conv3x3_forward(x, np.ascontiguousarray(w), np.ascontiguousarray(b))


def conv3x3_backward(x, w, gy):
    x = _check4(x, "x")
    gy = _check4(gy, "gy")
    if gy.shape != (x.shape[0], w.shape[0], x.shape[2], x.shape[3]):
        raise ShapeError(f"gradient shape {gy.shape} does not match output shape")
    return _impl.conv3x3_backward(x, np.ascontiguousarray(w), gy)
