"""Training objectives and evaluation metrics.

The fitting loss measures how well a three-channel prediction matches the
normalized polarization parameter planes (s0, dolp, aop). Per sample and
per plane it takes the plain (un-squared) euclidean norm of the error
image, divides by the pixel count, and averages over the batch:

    L = (1/N) * sum_n (1/(W*H)) * sum_k || pred[n,k] - target[n,k] ||_2

The norm is deliberately not squared, which makes the loss positively
homogeneous of degree one in the error. A squared variant is available
behind a flag for comparison but is never the default. The gradient of
the default form is e_k / (N*W*H*||e_k||) per plane, with a zero
subgradient for an exactly-zero error plane.
"""

from __future__ import annotations

import numpy as np

from .errors import NumericsError, ShapeError

EXPECTED_PLANES = 3


def _check_pair(pred, target):
    pred = np.asarray(pred)
    target = np.asarray(target)
    if pred.ndim != 4 or pred.shape[1] != EXPECTED_PLANES:
        raise ShapeError(f"prediction must be (N, 3, H, W), got shape {pred.shape}")
    if pred.shape != target.shape:
        raise ShapeError(f"prediction shape {pred.shape} != target shape {target.shape}")
    return pred, target


def _plane_norms(err):
    n, k = err.shape[:2]
    return np.sqrt(np.square(err.astype(np.float64)).reshape(n, k, -1).sum(axis=2))


def fitting_loss(pred: np.ndarray, target: np.ndarray, squared: bool = False) -> float:
    pred, target = _check_pair(pred, target)
    n, _, h, w = pred.shape
    err = pred - target
    norms = _plane_norms(err)
    if squared:
        norms = np.square(norms)
    return float(norms.sum(axis=1).mean() / (w * h))


def fitting_loss_backward(pred: np.ndarray, target: np.ndarray,
                          squared: bool = False) -> np.ndarray:
    pred, target = _check_pair(pred, target)
    n, _, h, w = pred.shape
    err = (pred - target).astype(np.float64)
    if squared:
        grad = 2.0 * err / (n * w * h)
        return grad.astype(pred.dtype)
    norms = _plane_norms(err)
    scale = np.divide(1.0, n * w * h * norms, out=np.zeros_like(norms), where=norms > 0)
    grad = err * scale[:, :, None, None]
    return grad.astype(pred.dtype)


def pixel_accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    """Fraction of pixels whose argmax class matches; ties pick the lower index."""
    if logits.ndim != 4:
        raise ShapeError(f"logits must be (N, K+1, H, W), got shape {logits.shape}")
    pred = np.argmax(logits, axis=1)
    if pred.shape != np.asarray(labels).shape:
        raise ShapeError(f"labels shape {np.shape(labels)} does not match logits")
    return float((pred == labels).mean())


def class_iou(logits: np.ndarray, labels: np.ndarray, cls: int) -> float:
    """Intersection over union of one class; 1.0 when the class is absent everywhere."""
    pred = np.argmax(logits, axis=1) == cls
    gt = np.asarray(labels) == cls
    union = np.logical_or(pred, gt).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(pred, gt).sum() / union)


def grad_check(loss_and_grads, params, step: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    loss_and_grads() must return (loss, grads) where grads aligns with
    params, recomputing both from the current parameter values. Parameters
    are perturbed in place, element by element, and restored afterwards.
    Use float64 parameters; float32 cannot support the difference step.
    """
    _, grads = loss_and_grads()
    if len(grads) != len(params):
        raise ShapeError(f"got {len(grads)} gradients for {len(params)} parameters")
    worst = 0.0
    for p, g in zip(params, grads):
        g = np.asarray(g)
        if g.shape != p.shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        flat = p.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            plus, _ = loss_and_grads()
            flat[i] = orig - step
            minus, _ = loss_and_grads()
            flat[i] = orig
            numeric = (plus - minus) / (2 * step)
            if not np.isfinite(numeric):
                raise NumericsError(f"non-finite finite-difference at parameter element {i}")
            denom = max(abs(numeric), abs(gflat[i]), 1e-8)
            worst = max(worst, abs(numeric - gflat[i]) / denom)
    return worst
