"""Deterministic SGD training loops, evaluation and sweeps.

Two experiments are supported. Parameter fitting trains a fusion network
to reproduce the normalized analytic parameter planes (s0, dolp, aop)
computed from the raw stacks themselves. Joint training chains the
fusion network into a small segmentation head and backpropagates the
per-pixel cross entropy through both; hand-picked input strategies
(raw channels, normalized parameter subsets) run the same loop with the
fusion network bypassed, as baselines.

Reproducibility contract: every logged number and every checkpoint byte
is a pure function of (config, dataset). Epoch e shuffles with the
stream (seed, SHUFFLE, e) and nothing carries RNG state across epochs,
so resuming from a checkpoint at epoch k replays epochs k+1..E exactly
as an uninterrupted run would.

The metrics CSV has one train-split row and one val-split row per epoch
(the val rows are omitted for datasets too small to hold out a split).
Both are infer-mode evaluations of the epoch-end model state, so
re-evaluating a final checkpoint reproduces the last logged rows. The
seconds column is written as 0.000 unless timing was explicitly
requested, keeping the default output byte-deterministic.
"""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .errors import ConfigError, NumericsError, ShapeError
from .losses import class_iou, fitting_loss, fitting_loss_backward, pixel_accuracy
from .nn import PpcnModel, init_params, parse_structure
from .polarimetry import (AopConvention, DEFAULT_CONVENTION, InputStrategy, ParamKind,
                          compute_aop, compute_dolp, PolarParams, normalize_param,
                          strategy_channels)
from .ptns import write_bytes_atomic
from .rand import STREAM_SHUFFLE, rng_for
from .scenegen import PolarDataset, read_dataset
from .taskhead import DEFAULT_HEAD_CHANNELS, HeadModel, SoftmaxCrossEntropy

_LOG = logging.getLogger(__name__)

VAL_FRACTION = 10        # one sample in ten, by index, from the tail
EVAL_BATCH = 16
RNG_SCHEME = "per-epoch-derived-v1"

PPCN_ROUTE = "ppcn"      # strategy value meaning "learned fusion network route"


@dataclass(frozen=True)
class TrainConfig:
    mode: str                    # "fit" or "joint"
    dataset: str                 # dataset directory
    structure: str | None = None
    epochs: int = 1
    batch_size: int = 2
    learning_rate: float = 0.003
    momentum: float = 0.9
    seed: int = 0
    strategy: str = PPCN_ROUTE   # joint mode: ppcn or an input-strategy name
    output_count: int | None = None
    aop_convention: str = DEFAULT_CONVENTION.value
    bn_before_relu: bool = False
    head_channels: tuple[int, int] = DEFAULT_HEAD_CHANNELS
    checkpoint_every: int = 0
    record_timing: bool = False

    def validate(self) -> "TrainConfig":
        if self.mode not in ("fit", "joint"):
            raise ConfigError(f"mode must be 'fit' or 'joint', got {self.mode!r}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.learning_rate < 0:
            raise ConfigError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if not (0 <= self.momentum < 1):
            raise ConfigError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.seed < 0:
            raise ConfigError(f"seed must be >= 0, got {self.seed}")
        if self.checkpoint_every < 0:
            raise ConfigError(f"checkpoint_every must be >= 0, got {self.checkpoint_every}")
        AopConvention.coerce(self.aop_convention)
        uses_ppcn = self.mode == "fit" or self.strategy == PPCN_ROUTE
        if uses_ppcn:
            if self.structure is None:
                raise ConfigError("a structure string is required for the fusion-network route")
            spec = parse_structure(self.structure)
            if len(spec.sizes) > 2 and self.batch_size < 2:
                raise ConfigError("batch_size must be >= 2 when batch norm layers train")
            if self.mode == "fit" and spec.output_channels != 3:
                raise ConfigError(
                    f"fit mode needs 3 output channels (s0, dolp, aop), structure ends in "
                    f"{spec.output_channels}"
                )
            if self.output_count is not None and self.output_count != spec.output_channels:
                raise ConfigError(
                    f"output_count {self.output_count} contradicts structure "
                    f"{self.structure!r} (ends in {spec.output_channels})"
                )
        else:
            InputStrategy.coerce(self.strategy)
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["head_channels"] = list(self.head_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        d = dict(d)
        if "head_channels" in d:
            d["head_channels"] = tuple(d["head_channels"])
        return cls(**d)


@dataclass(frozen=True)
class MetricsRow:
    epoch: int
    split: str
    loss: float
    accuracy: float | None = None
    ious: tuple[float, ...] = ()
    seconds: float = 0.0


@dataclass
class TrainResult:
    config: TrainConfig
    history: list[MetricsRow]
    checkpoint: Checkpoint
    num_classes: int = 0
    out_dir: Path | None = None
    metrics_path: Path | None = None
    checkpoint_dir: Path | None = None


def sgd_step(params, grads, velocities, lr: float, momentum: float) -> None:
    """One momentum-SGD update, in place: v <- momentum*v + g; p <- p - lr*v."""
    if not (len(params) == len(grads) == len(velocities)):
        raise ShapeError("params, grads and velocities must align")
    for i, (p, g, v) in enumerate(zip(params, grads, velocities)):
        if not np.isfinite(g).all():
            raise NumericsError(f"non-finite gradient in parameter {i}")
        v *= momentum
        v += g
        p -= lr * v


def split_indices(count: int) -> tuple[np.ndarray, np.ndarray]:
    """90/10 split by sample index; datasets under 10 samples keep no val split."""
    n_val = count // VAL_FRACTION
    idx = np.arange(count)
    return idx[: count - n_val], idx[count - n_val :]


def fit_targets(raws: np.ndarray, convention, dtype=np.float32) -> np.ndarray:
    """Normalized analytic (s0, dolp, aop) planes computed from raw stacks.

    Targets come from the rendered intensities themselves, not from stored
    ground truth, so with sensor noise the network fits what a pixel-wise
    analytic pipeline would output.
    """
    convention = AopConvention.coerce(convention)
    r = raws.astype(np.float64)
    p = PolarParams(s0=r[:, 0] + r[:, 2], s1=r[:, 0] - r[:, 2], s2=r[:, 1] - r[:, 3])
    y = np.stack([
        normalize_param(p.s0, ParamKind.S0),
        normalize_param(compute_dolp(p), ParamKind.DOLP),
        normalize_param(compute_aop(p, convention), ParamKind.AOP),
    ], axis=1)
    return y.astype(dtype)


def _batches(n: int, batch_size: int):
    for start in range(0, n, batch_size):
        yield np.arange(start, min(start + batch_size, n))


class _Trainable:
    """Uniform wrapper over the two model routes used by the shared loop."""

    def __init__(self, config: TrainConfig, num_classes: int):
        self.config = config
        self.ppcn = None
        self.head = None
        self._ce = SoftmaxCrossEntropy()
        if config.mode == "fit" or config.strategy == PPCN_ROUTE:
            self.ppcn = PpcnModel(parse_structure(config.structure),
                                  bn_before_relu=config.bn_before_relu)
        if config.mode == "joint":
            if self.ppcn is not None:
                c_in = self.ppcn.output_channels
            else:
                c_in = InputStrategy.coerce(config.strategy).channel_count
            self.head = HeadModel(c_in, num_classes, channels=config.head_channels)

    def init(self, seed: int) -> None:
        for model in self._models():
            init_params(model, seed)

    def _models(self):
        return [m for m in (self.ppcn, self.head) if m is not None]

    def _prefixes(self):
        out = []
        if self.ppcn is not None:
            out.append(("ppcn", self.ppcn))
        if self.head is not None:
            out.append(("head", self.head))
        return out

    def named_parameters(self):
        out = []
        for prefix, model in self._prefixes():
            for name, layer, attr in model.parameters():
                out.append((f"{prefix}.{name}", layer, attr))
        return out

    def forward(self, x, train: bool):
        if self.ppcn is not None:
            x = self.ppcn.forward(x, train=train)
        if self.head is not None:
            x = self.head.forward(x, train=train)
        return x

    def train_step_loss(self, x, target):
        """Forward in train mode and return (loss, grads ready on layers)."""
        out = self.forward(x, train=True)
        if self.config.mode == "fit":
            loss = fitting_loss(out, target)
            grad = fitting_loss_backward(out, target)
        else:
            loss = self._ce.forward(out, target)
            grad = self._ce.backward()
        if self.head is not None:
            grad = self.head.backward(grad)
            if self.ppcn is not None:
                self.ppcn.backward(grad)
        else:
            self.ppcn.backward(grad)
        return loss

    def state_arrays(self):
        out = {}
        for prefix, model in self._prefixes():
            for name, arr in model.state_arrays():
                out[f"{prefix}.state.{name}"] = arr
        return out

    def param_arrays(self):
        return {name: getattr(layer, attr) for name, layer, attr in self.named_parameters()}

    def load_arrays(self, arrays: dict) -> None:
        for name, layer, attr in self.named_parameters():
            if name not in arrays:
                raise ConfigError(f"checkpoint is missing parameter {name!r}")
            stored = arrays[name]
            current = getattr(layer, attr)
            if stored.shape != current.shape:
                raise ShapeError(f"checkpoint {name}: shape {stored.shape} != {current.shape}")
            setattr(layer, attr, stored.astype(current.dtype).copy())
        for prefix, model in self._prefixes():
            for name, arr in model.state_arrays():
                key = f"{prefix}.state.{name}"
                if key in arrays:
                    model.load_state_array(name, arrays[key].copy())


def _evaluate_fit(trainable: _Trainable, raws, targets, indices) -> float | None:
    if len(indices) == 0:
        return None
    total = 0.0
    for batch in _batches(len(indices), EVAL_BATCH):
        idx = indices[batch]
        out = trainable.forward(raws[idx], train=False)
        err = (out - targets[idx]).astype(np.float64)
        n, k, h, w = err.shape
        norms = np.sqrt(np.square(err).reshape(n, k, -1).sum(axis=2))
        total += float(norms.sum() / (h * w))
    return total / len(indices)


def _evaluate_joint(trainable: _Trainable, inputs, labels, indices, num_classes):
    if len(indices) == 0:
        return None
    ce = SoftmaxCrossEntropy()
    loss_sum = 0.0
    correct = 0
    inter = np.zeros(num_classes, dtype=np.int64)
    union = np.zeros(num_classes, dtype=np.int64)
    total_px = 0
    for batch in _batches(len(indices), EVAL_BATCH):
        idx = indices[batch]
        logits = trainable.forward(inputs[idx], train=False)
        lab = labels[idx]
        n, _, h, w = logits.shape
        loss_sum += ce.forward(logits, lab) * (n * h * w)
        pred = np.argmax(logits, axis=1)
        correct += int((pred == lab).sum())
        total_px += n * h * w
        for c in range(1, num_classes + 1):
            p = pred == c
            g = lab == c
            inter[c - 1] += int(np.logical_and(p, g).sum())
            union[c - 1] += int(np.logical_or(p, g).sum())
    ious = tuple(1.0 if u == 0 else float(i) / float(u) for i, u in zip(inter, union))
    return loss_sum / total_px, correct / total_px, ious


def _prepare_inputs(config: TrainConfig, ds: PolarDataset):
    if config.mode == "fit" or config.strategy == PPCN_ROUTE:
        if ds.raws.shape[1] != 4:
            raise ConfigError(f"dataset has {ds.raws.shape[1]} channels, expected 4")
        spec = parse_structure(config.structure)
        if spec.input_channels != 4:
            raise ConfigError(
                f"structure {config.structure!r} expects {spec.input_channels} input "
                "channels but raw stacks have 4"
            )
        return ds.raws
    return strategy_channels(ds.raws, config.strategy,
                             AopConvention.coerce(config.aop_convention))


def _run(config: TrainConfig, out_dir=None, resume: Checkpoint | None = None) -> TrainResult:
    config = config.validate()
    ds = read_dataset(config.dataset)
    num_classes = ds.num_classes if config.mode == "joint" else 0
    inputs = _prepare_inputs(config, ds)
    if config.mode == "fit":
        targets = fit_targets(ds.raws, config.aop_convention)
        labels = None
    else:
        targets = None
        labels = ds.masks.astype(np.int64)
        if num_classes < 1:
            raise ConfigError("joint mode needs a dataset with at least one target class")

    trainable = _Trainable(config, num_classes)
    trainable.init(config.seed)
    velocities = {name: np.zeros_like(getattr(layer, attr))
                  for name, layer, attr in trainable.named_parameters()}

    start_epoch = 0
    if resume is not None:
        start_epoch = _restore(trainable, velocities, config, resume)

    train_idx, val_idx = split_indices(ds.count)
    if len(train_idx) == 0:
        raise ConfigError("dataset too small to train on")

    out_dir = Path(out_dir) if out_dir is not None else None
    metrics_path = out_dir / "metrics.csv" if out_dir else None
    history: list[MetricsRow] = []
    param_refs = trainable.named_parameters()
    vel_list = [velocities[name] for name, _, _ in param_refs]

    for epoch in range(start_epoch + 1, config.epochs + 1):
        t0 = time.perf_counter()
        order = rng_for(config.seed, STREAM_SHUFFLE, epoch).permutation(len(train_idx))
        shuffled = train_idx[order]
        for bi, batch in enumerate(_batches(len(shuffled), config.batch_size)):
            idx = shuffled[batch]
            target = targets[idx] if targets is not None else labels[idx]
            loss = trainable.train_step_loss(inputs[idx], target)
            if not np.isfinite(loss):
                raise NumericsError(f"non-finite loss at epoch {epoch}, batch {bi}")
            grads = [getattr(layer, "g" + attr) for _, layer, attr in param_refs]
            params = [getattr(layer, attr) for _, layer, attr in param_refs]
            sgd_step(params, grads, vel_list, config.learning_rate, config.momentum)
        seconds = time.perf_counter() - t0
        history.extend(_epoch_rows(trainable, config, inputs, targets, labels,
                                   train_idx, val_idx, num_classes, epoch, seconds))
        _LOG.debug("epoch %d/%d %s loss=%.6g (%.2fs)", epoch, config.epochs,
                   history[-1].split, history[-1].loss, seconds)
        if metrics_path is not None:
            _write_metrics(metrics_path, history, num_classes, config.record_timing)
        if out_dir is not None and config.checkpoint_every and epoch % config.checkpoint_every == 0:
            save_checkpoint(out_dir / "checkpoints" / f"epoch_{epoch:04d}",
                            _snapshot(trainable, velocities, config, epoch))

    final = _snapshot(trainable, velocities, config, config.epochs)
    ckpt_dir = None
    if out_dir is not None:
        ckpt_dir = out_dir / "checkpoints" / "final"
        save_checkpoint(ckpt_dir, final)
        _write_metrics(metrics_path, history, num_classes, config.record_timing)
    return TrainResult(config=config, history=history, checkpoint=final,
                       num_classes=num_classes, out_dir=out_dir,
                       metrics_path=metrics_path, checkpoint_dir=ckpt_dir)


def _epoch_rows(trainable, config, inputs, targets, labels, train_idx, val_idx,
                num_classes, epoch, seconds):
    rows = []
    for split, indices in (("train", train_idx), ("val", val_idx)):
        if len(indices) == 0:
            continue
        if config.mode == "fit":
            loss = _evaluate_fit(trainable, inputs, targets, indices)
            rows.append(MetricsRow(epoch=epoch, split=split, loss=loss, seconds=seconds))
        else:
            loss, acc, ious = _evaluate_joint(trainable, inputs, labels, indices, num_classes)
            rows.append(MetricsRow(epoch=epoch, split=split, loss=loss,
                                   accuracy=acc, ious=ious, seconds=seconds))
    return rows


def _snapshot(trainable, velocities, config: TrainConfig, epoch: int) -> Checkpoint:
    arrays = {}
    for name, arr in trainable.param_arrays().items():
        arrays[name] = arr.copy()
    for name, arr in trainable.state_arrays().items():
        arrays[name] = arr.copy()
    for name, vel in velocities.items():
        arrays[f"vel.{name}"] = vel.copy()
    return Checkpoint(
        kind=config.mode,
        config=config.to_dict(),
        epoch=epoch,
        arrays=arrays,
        rng_state={"scheme": RNG_SCHEME, "seed": config.seed, "epochs_completed": epoch},
    )


def _restore(trainable, velocities, config: TrainConfig, ckpt: Checkpoint) -> int:
    if ckpt.kind != config.mode:
        raise ConfigError(f"checkpoint is for mode {ckpt.kind!r}, config says {config.mode!r}")
    stored = dict(ckpt.config)
    current = config.to_dict()
    for key in ("epochs", "checkpoint_every", "record_timing"):
        stored.pop(key, None)
        current.pop(key, None)
    if stored != current:
        diff = {k for k in set(stored) | set(current) if stored.get(k) != current.get(k)}
        raise ConfigError(f"checkpoint config does not match (differs in {sorted(diff)})")
    if ckpt.rng_state.get("scheme") != RNG_SCHEME:
        raise ConfigError(f"checkpoint uses RNG scheme {ckpt.rng_state.get('scheme')!r}")
    if ckpt.epoch > config.epochs:
        raise ConfigError(f"checkpoint is at epoch {ckpt.epoch}, beyond target {config.epochs}")
    trainable.load_arrays(ckpt.arrays)
    for name in velocities:
        key = f"vel.{name}"
        if key not in ckpt.arrays:
            raise ConfigError(f"checkpoint is missing velocity buffer {key!r}")
        velocities[name][...] = ckpt.arrays[key]
    return ckpt.epoch


def train_fit_params(config: TrainConfig, out_dir=None, resume=None) -> TrainResult:
    """Parameter-fitting experiment; see module docstring for logging semantics."""
    if config.mode != "fit":
        raise ConfigError(f"train_fit_params needs mode='fit', got {config.mode!r}")
    return _run(config, out_dir=out_dir, resume=resume)


def train_joint(config: TrainConfig, out_dir=None, resume=None) -> TrainResult:
    """End-to-end joint training (or an input-strategy baseline)."""
    if config.mode != "joint":
        raise ConfigError(f"train_joint needs mode='joint', got {config.mode!r}")
    return _run(config, out_dir=out_dir, resume=resume)


def resume_training(checkpoint_dir, epochs: int | None = None, out_dir=None) -> TrainResult:
    """Continue a checkpointed run to its configured epoch count (or a later one)."""
    ckpt = load_checkpoint(checkpoint_dir)
    config = TrainConfig.from_dict(ckpt.config)
    if epochs is not None:
        if epochs < ckpt.epoch:
            raise ConfigError(f"cannot resume to epoch {epochs}, checkpoint is at {ckpt.epoch}")
        config = TrainConfig.from_dict({**ckpt.config, "epochs": epochs})
    return _run(config, out_dir=out_dir, resume=ckpt)


def evaluate(checkpoint, dataset, split: str = "val") -> MetricsRow:
    """Side-effect-free evaluation of a checkpoint on a dataset split."""
    if not isinstance(checkpoint, Checkpoint):
        checkpoint = load_checkpoint(checkpoint)
    config = TrainConfig.from_dict(checkpoint.config)
    if isinstance(dataset, (str, Path)):
        ds = read_dataset(dataset)
    else:
        ds = dataset
    num_classes = ds.num_classes if config.mode == "joint" else 0
    trainable = _Trainable(config, num_classes)
    trainable.load_arrays(checkpoint.arrays)
    inputs = _prepare_inputs(config, ds)
    train_idx, val_idx = split_indices(ds.count)
    indices = {"train": train_idx, "val": val_idx,
               "all": np.arange(ds.count)}.get(split)
    if indices is None:
        raise ConfigError(f"split must be train, val or all, got {split!r}")
    if len(indices) == 0:
        raise ConfigError(f"split {split!r} is empty for this dataset")
    if config.mode == "fit":
        targets = fit_targets(ds.raws, config.aop_convention)
        loss = _evaluate_fit(trainable, inputs, targets, indices)
        return MetricsRow(epoch=checkpoint.epoch, split=split, loss=loss)
    labels = ds.masks.astype(np.int64)
    loss, acc, ious = _evaluate_joint(trainable, inputs, labels, indices, num_classes)
    return MetricsRow(epoch=checkpoint.epoch, split=split, loss=loss,
                      accuracy=acc, ious=ious)


def sweep(base: TrainConfig, outputs=None, strategies=None, seeds=None,
          out_dir=None) -> list[dict]:
    """Grid runs over output counts or input strategies (one axis at a time).

    Returns one result row per (grid point, seed): the final-epoch
    evaluation on the val split (train split when no val exists).
    """
    if (outputs is None) == (strategies is None):
        raise ConfigError("sweep needs exactly one axis: outputs or strategies")
    seeds = [base.seed] if seeds is None else [int(s) for s in seeds]
    out_dir = Path(out_dir) if out_dir is not None else None

    points = []
    if outputs is not None:
        if base.structure is None:
            raise ConfigError("an outputs sweep needs a base structure string")
        spec = parse_structure(base.structure)
        for x in outputs:
            x = int(x)
            if x < 1:
                raise ConfigError(f"output count must be >= 1, got {x}")
            structure = "-".join([str(s) for s in spec.sizes[:-1]] + [str(x)])
            cfg = TrainConfig.from_dict({**base.to_dict(), "structure": structure,
                                         "output_count": x})
            points.append((f"x{x}", {"outputs": x}, cfg))
    else:
        for strat in strategies:
            strat = str(strat)
            if strat != PPCN_ROUTE:
                InputStrategy.coerce(strat)
            cfg = TrainConfig.from_dict({**base.to_dict(), "strategy": strat})
            points.append((strat, {"strategy": strat}, cfg))

    rows = []
    for label, keys, cfg in points:
        for seed in seeds:
            cfg_s = TrainConfig.from_dict({**cfg.to_dict(), "seed": seed})
            run_dir = out_dir / f"run_{label}_seed{seed}" if out_dir else None
            result = _run(cfg_s.validate(), out_dir=run_dir)
            final = _final_row(result)
            row = {"label": label, "seed": seed, **keys,
                   "split": final.split, "loss": final.loss,
                   "accuracy": final.accuracy, "ious": final.ious}
            rows.append(row)
    if out_dir is not None:
        _write_sweep(out_dir / "sweep.csv", rows)
    return rows


def _final_row(result: TrainResult) -> MetricsRow:
    vals = [r for r in result.history if r.split == "val"]
    if vals:
        return vals[-1]
    return [r for r in result.history if r.split == "train"][-1]


def _fmt(x) -> str:
    if x is None:
        return ""
    return repr(float(x))


def _write_metrics(path: Path, history, num_classes: int, record_timing: bool) -> None:
    cols = ["epoch", "split", "loss", "accuracy"]
    cols += [f"iou_class{c}" for c in range(1, num_classes + 1)]
    cols += ["seconds"]
    lines = [",".join(cols)]
    for row in history:
        cells = [str(row.epoch), row.split, _fmt(row.loss), _fmt(row.accuracy)]
        for c in range(num_classes):
            cells.append(_fmt(row.ious[c]) if c < len(row.ious) else "")
        cells.append(f"{row.seconds:.3f}" if record_timing else "0.000")
        lines.append(",".join(cells))
    path.parent.mkdir(parents=True, exist_ok=True)
    write_bytes_atomic(path, ("\n".join(lines) + "\n").encode())


def _write_sweep(path: Path, rows) -> None:
    k = max((len(r["ious"]) for r in rows if r["ious"]), default=0)
    cols = ["label", "seed", "split", "loss", "accuracy"]
    cols += [f"iou_class{c}" for c in range(1, k + 1)]
    lines = [",".join(cols)]
    for r in rows:
        cells = [r["label"], str(r["seed"]), r["split"], _fmt(r["loss"]), _fmt(r["accuracy"])]
        for c in range(k):
            cells.append(_fmt(r["ious"][c]) if r["ious"] and c < len(r["ious"]) else "")
        lines.append(",".join(cells))
    path.parent.mkdir(parents=True, exist_ok=True)
    write_bytes_atomic(path, ("\n".join(lines) + "\n").encode())
