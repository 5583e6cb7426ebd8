"""Small segmentation head consumed by the joint-training experiments.

Two 3x3 conv + ReLU stages followed by a 1x1 conv producing per-pixel
class logits (background plus K target classes). The head is intentionally
shallow; its role is to measure how useful different input encodings are,
not to win segmentation benchmarks.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError, InputError, ShapeError, StateError
from .nn import DEFAULT_DTYPE, Conv1x1, Conv3x3, ReLU

DEFAULT_HEAD_CHANNELS = (16, 16)


class HeadModel:
    """conv3x3 -> ReLU -> conv3x3 -> ReLU -> conv1x1 logits."""

    def __init__(self, c_in: int, num_classes: int, channels=DEFAULT_HEAD_CHANNELS,
                 dtype=DEFAULT_DTYPE):
        if num_classes < 1:
            raise ConfigError(f"num_classes must be >= 1, got {num_classes}")
        channels = tuple(int(c) for c in channels)
        if len(channels) != 2:
            raise ConfigError(f"head takes exactly two hidden widths, got {channels}")
        self.c_in = int(c_in)
        self.num_classes = int(num_classes)
        self.dtype = np.dtype(dtype)
        self._chain = [
            ("conv_a", Conv3x3(c_in, channels[0], dtype)),
            ("relu_a", ReLU()),
            ("conv_b", Conv3x3(channels[0], channels[1], dtype)),
            ("relu_b", ReLU()),
            ("logits", Conv1x1(channels[1], num_classes + 1, dtype)),
        ]

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
        out = []
        for name, layer in self._chain:
            if isinstance(layer, (Conv1x1, Conv3x3)):
                out.append((f"{name}.w", layer, "w"))
                out.append((f"{name}.b", layer, "b"))
        return out

    def state_arrays(self):
        return []

    def parameter_count(self) -> int:
        total = 0
        for _, layer, attr in self.parameters():
            total += getattr(layer, attr).size
        return total


class SoftmaxCrossEntropy:
    """Mean per-pixel cross entropy between logits and integer labels.

    forward caches the softmax for the matching backward; labels outside
    [0, num_classes] (the logit channel count minus one) are rejected.
    """

    def __init__(self):
        self._softmax = None
        self._labels = None

    def forward(self, logits: np.ndarray, labels: np.ndarray) -> float:
        if logits.ndim != 4:
            raise ShapeError(f"logits must be (N, K+1, H, W), got shape {logits.shape}")
        n, c, h, w = logits.shape
        labels = np.asarray(labels)
        if labels.shape != (n, h, w):
            raise ShapeError(f"labels shape {labels.shape} does not match logits {logits.shape}")
        if not np.issubdtype(labels.dtype, np.integer):
            raise InputError(f"labels must be integer typed, got {labels.dtype}")
        if labels.size and (labels.min() < 0 or labels.max() >= c):
            raise InputError(f"label values must lie in [0, {c - 1}]")

        z = logits.astype(np.float64)
        z = z - z.max(axis=1, keepdims=True)
        ez = np.exp(z)
        sm = ez / ez.sum(axis=1, keepdims=True)
        self._softmax = sm
        self._labels = labels
        picked = np.take_along_axis(sm, labels[:, None], axis=1)[:, 0]
        return float(-np.log(np.maximum(picked, 1e-300)).mean())

    def backward(self) -> np.ndarray:
        """Gradient of the mean loss w.r.t. the logits: (softmax - onehot) / (N*H*W)."""
        if self._softmax is None:
            raise StateError("cross entropy backward called before forward")
        sm = self._softmax
        n, c, h, w = sm.shape
        grad = sm.copy()
        idx = self._labels[:, None]
        np.put_along_axis(grad, idx, np.take_along_axis(grad, idx, axis=1) - 1.0, axis=1)
        grad /= n * h * w
        return grad
