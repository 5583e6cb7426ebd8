"""Pixel-fusion network built from 1x1 convolutions.

The network applies the same small fully connected map at every pixel:
a chain of fusion units (1x1 conv, ReLU, batch norm) followed by a bare
1x1 conv output layer. Structure strings like "4-8-16-8-3" give the
channel widths from input to output. Because every operation is 1x1,
the receptive field is exactly one pixel.

Layers follow the usual from-scratch pattern: forward(x, train=) caches
what backward needs, backward(gy) returns the input gradient and leaves
parameter gradients on the layer (.gw/.gb). Calling backward without a
preceding train-mode forward is a state error. Inputs are never written
to in place.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from . import backend
from .errors import ConfigError, NumericsError, ShapeError, StateError
from .rand import STREAM_INIT, rng_for

DEFAULT_DTYPE = np.float32

BN_EPS = 1e-5
BN_MOMENTUM = 0.1

_debug_finite = os.environ.get("PPCN_DEBUG_FINITE", "") not in ("", "0")


def set_debug_finite(enabled: bool) -> None:
    """When enabled, every layer output is checked for NaN/Inf."""
    global _debug_finite
    _debug_finite = bool(enabled)


def _maybe_check(arr, what):
    if _debug_finite and not np.isfinite(arr).all():
        raise NumericsError(f"non-finite values in {what}")
    return arr


@dataclass(frozen=True)
class StructureSpec:
    """Channel widths of a fusion network, input first, output last."""

    sizes: tuple[int, ...]

    def __post_init__(self):
        if len(self.sizes) < 2:
            raise ConfigError(f"structure needs at least input and output widths, got {self.sizes}")
        for s in self.sizes:
            if not isinstance(s, int) or s < 1:
                raise ConfigError(f"structure widths must be positive integers, got {s!r}")

    @property
    def input_channels(self) -> int:
        return self.sizes[0]

    @property
    def output_channels(self) -> int:
        return self.sizes[-1]

    def __str__(self) -> str:
        return "-".join(str(s) for s in self.sizes)


def parse_structure(text: str) -> StructureSpec:
    """Parse a dash-separated width list, e.g. "4-8-16-8-3"."""
    tokens = str(text).strip().split("-")
    sizes = []
    for tok in tokens:
        try:
            v = int(tok)
        except ValueError:
            raise ConfigError(f"bad structure token {tok!r} in {text!r}") from None
        if v < 1:
            raise ConfigError(f"structure widths must be >= 1, got {tok!r} in {text!r}")
        sizes.append(v)
    return StructureSpec(tuple(sizes))


def parameter_count(spec: StructureSpec) -> int:
    """Learnable parameter total: each layer holds c_in*c_out weights plus c_out biases."""
    sizes = spec.sizes
    return sum(sizes[i] * sizes[i + 1] + sizes[i + 1] for i in range(len(sizes) - 1))


class Conv1x1:
    """Per-pixel linear map across channels: y[n,:,h,w] = w @ x[n,:,h,w] + b."""

    def __init__(self, c_in: int, c_out: int, dtype=DEFAULT_DTYPE):
        self.c_in = int(c_in)
        self.c_out = int(c_out)
        self.dtype = np.dtype(dtype)
        self.w = np.zeros((self.c_out, self.c_in), dtype=self.dtype)
        self.b = np.zeros(self.c_out, dtype=self.dtype)
        self.gw = np.zeros_like(self.w)
        self.gb = np.zeros_like(self.b)
        self._x = None

    def forward(self, x, train=True):
        if x.shape[1] != self.c_in:
            raise ShapeError(f"conv1x1 expects {self.c_in} input channels, got {x.shape[1]}")
        self._x = x if train else None
        return _maybe_check(backend.conv1x1_forward(x, self.w, self.b), "conv1x1 output")

    def backward(self, gy):
        if self._x is None:
            raise StateError("conv1x1 backward called without a train-mode forward")
        gx, self.gw, self.gb = backend.conv1x1_backward(self._x, self.w, gy)
        return gx

    def param_items(self):
        return [("w", self.w.shape), ("b", self.b.shape)]


class Conv3x3:
    """3x3 convolution, stride 1, zero padding 1 (shape preserving)."""

    def __init__(self, c_in: int, c_out: int, dtype=DEFAULT_DTYPE):
        self.c_in = int(c_in)
        self.c_out = int(c_out)
        self.dtype = np.dtype(dtype)
        self.w = np.zeros((self.c_out, self.c_in, 3, 3), dtype=self.dtype)
        self.b = np.zeros(self.c_out, dtype=self.dtype)
        self.gw = np.zeros_like(self.w)
        self.gb = np.zeros_like(self.b)
        self._x = None

    def forward(self, x, train=True):
        if x.shape[1] != self.c_in:
            raise ShapeError(f"conv3x3 expects {self.c_in} input channels, got {x.shape[1]}")
        self._x = x if train else None
        return _maybe_check(backend.conv3x3_forward(x, self.w, self.b), "conv3x3 output")

    def backward(self, gy):
        if self._x is None:
            raise StateError("conv3x3 backward called without a train-mode forward")
        gx, self.gw, self.gb = backend.conv3x3_backward(self._x, self.w, gy)
        return gx

    def param_items(self):
        return [("w", self.w.shape), ("b", self.b.shape)]


class ReLU:
    def __init__(self):
        self._mask = None

    def forward(self, x, train=True):
        y = np.maximum(x, 0)
        # subgradient at exactly 0 is taken as 0
        self._mask = (x > 0) if train else None
        return y

    def backward(self, gy):
        if self._mask is None:
            raise StateError("relu backward called without a train-mode forward")
        return gy * self._mask


class BatchNorm:
    """Per-channel batch normalization without learnable affine terms.

    Train mode normalizes with biased batch statistics over (N, H, W) and
    folds them into the running estimates with momentum 0.1; infer mode
    uses the running estimates only and never mutates state. Reductions
    are accumulated in float64 regardless of the working dtype.
    """

    def __init__(self, channels: int, dtype=DEFAULT_DTYPE):
        self.channels = int(channels)
        self.dtype = np.dtype(dtype)
        self.eps = BN_EPS
        self.momentum = BN_MOMENTUM
        self.running_mean = np.zeros(self.channels, dtype=self.dtype)
        self.running_var = np.ones(self.channels, dtype=self.dtype)
        self._xhat = None
        self._inv_std = None

    def forward(self, x, train=True):
        if x.shape[1] != self.channels:
            raise ShapeError(f"batchnorm expects {self.channels} channels, got {x.shape[1]}")
        if train:
            n, _, h, w = x.shape
            if n * h * w < 2:
                raise ConfigError(
                    "batchnorm train mode needs at least 2 values per channel "
                    f"(got batch {n} of {h}x{w})"
                )
            mean = x.mean(axis=(0, 2, 3), dtype=np.float64)
            diff = x - mean.astype(x.dtype)[:, None, None]
            var = np.square(diff).mean(axis=(0, 2, 3), dtype=np.float64)
            inv_std = 1.0 / np.sqrt(var + self.eps)
            xhat = diff * inv_std.astype(x.dtype)[:, None, None]
            self.running_mean = ((1 - self.momentum) * self.running_mean
                                 + self.momentum * mean.astype(self.dtype))
            self.running_var = ((1 - self.momentum) * self.running_var
                                + self.momentum * var.astype(self.dtype))
            self._xhat = xhat
            self._inv_std = inv_std
            return _maybe_check(xhat, "batchnorm output")
        self._xhat = None
        self._inv_std = None
        inv_std = 1.0 / np.sqrt(self.running_var.astype(np.float64) + self.eps)
        y = (x - self.running_mean[:, None, None]) * inv_std.astype(x.dtype)[:, None, None]
        return _maybe_check(y.astype(x.dtype), "batchnorm output")

    def backward(self, gy):
        if self._xhat is None:
            raise StateError("batchnorm backward called without a train-mode forward")
        xhat = self._xhat
        mean_gy = gy.mean(axis=(0, 2, 3), dtype=np.float64)
        mean_gy_xhat = (gy * xhat).mean(axis=(0, 2, 3), dtype=np.float64)
        gx = (gy - mean_gy.astype(gy.dtype)[:, None, None]
              - xhat * mean_gy_xhat.astype(gy.dtype)[:, None, None])
        gx *= self._inv_std.astype(gy.dtype)[:, None, None]
        return gx

    def state_items(self):
        return [("running_mean", self.running_mean), ("running_var", self.running_var)]


class PpcnModel:
    """Fusion-unit chain plus bare linear output conv.

    Each fusion unit is conv1x1 -> ReLU -> batch norm by default;
    bn_before_relu=True swaps the last two (the conventional ordering).
    """

    def __init__(self, spec: StructureSpec, bn_before_relu: bool = False, dtype=DEFAULT_DTYPE):
        if isinstance(spec, str):
            spec = parse_structure(spec)
        self.spec = spec
        self.bn_before_relu = bool(bn_before_relu)
        self.dtype = np.dtype(dtype)
        self._chain: list[tuple[str, object]] = []
        sizes = spec.sizes
        for k in range(len(sizes) - 2):
            conv = Conv1x1(sizes[k], sizes[k + 1], dtype)
            bn = BatchNorm(sizes[k + 1], dtype)
            relu = ReLU()
            self._chain.append((f"fusion{k}.conv", conv))
            if self.bn_before_relu:
                self._chain.append((f"fusion{k}.bn", bn))
                self._chain.append((f"fusion{k}.relu", relu))
            else:
                self._chain.append((f"fusion{k}.relu", relu))
                self._chain.append((f"fusion{k}.bn", bn))
        self._chain.append(("out", Conv1x1(sizes[-2], sizes[-1], dtype)))

    @property
    def input_channels(self) -> int:
        return self.spec.input_channels

    @property
    def output_channels(self) -> int:
        return self.spec.output_channels

    def forward(self, x, train=True):
        x = np.ascontiguousarray(x, dtype=self.dtype)
        for _, layer in self._chain:
            x = layer.forward(x, train=train)
        return x

    def backward(self, gy):
        g = np.ascontiguousarray(gy, dtype=self.dtype)
        for _, layer in reversed(self._chain):
            g = layer.backward(g)
        return g

    def parameters(self):
        """(name, layer, attr) triples in a fixed order; grads live at 'g'+attr."""
        out = []
        for name, layer in self._chain:
            if isinstance(layer, (Conv1x1, Conv3x3)):
                out.append((f"{name}.w", layer, "w"))
                out.append((f"{name}.b", layer, "b"))
        return out

    def state_arrays(self):
        """(name, array) pairs of non-learnable state (batch norm statistics)."""
        out = []
        for name, layer in self._chain:
            if isinstance(layer, BatchNorm):
                for attr, arr in layer.state_items():
                    out.append((f"{name}.{attr}", arr))
        return out

    def load_state_array(self, name: str, value: np.ndarray) -> None:
        for name_, layer in self._chain:
            if isinstance(layer, BatchNorm) and name.startswith(name_ + "."):
                attr = name[len(name_) + 1 :]
                current = getattr(layer, attr)
                if current.shape != value.shape:
                    raise ShapeError(f"state {name}: shape {value.shape} != {current.shape}")
                setattr(layer, attr, value.astype(current.dtype))
                return
        raise ConfigError(f"unknown state array {name!r}")

    def parameter_count(self) -> int:
        return parameter_count(self.spec)


def init_params(model, seed: int) -> None:
    """He-normal weight init, zero biases; deterministic for a given seed.

    Weights draw from N(0, 2 / fan_in) where fan_in counts input channels
    times kernel taps. Works for any model exposing parameters().
    """
    rng = rng_for(seed, STREAM_INIT)
    for name, layer, attr in model.parameters():
        arr = getattr(layer, attr)
        if attr == "w":
            fan_in = arr.shape[1] if arr.ndim == 2 else arr.shape[1] * arr.shape[2] * arr.shape[3]
            vals = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=arr.shape)
            setattr(layer, attr, vals.astype(arr.dtype))
        else:
            setattr(layer, attr, np.zeros_like(arr))
