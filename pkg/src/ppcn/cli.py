"""Command line front end.

Subcommands
    gen-data      write a synthetic polarimetric dataset
    count-params  print the parameter count of a structure string
    fit           train the fusion network against analytic targets
    train-joint   end-to-end training with the segmentation head
    eval          evaluate a checkpoint on a dataset split
    sweep         grid runs over output counts or input strategies
    export        run a checkpointed fusion network and write its output
                  channels as grayscale images plus lossless tensors

Exit codes: 0 success, 2 configuration/usage, 3 storage/format,
4 numerical abort.  Commands that produce a directory also write a
run_manifest.json listing the config echo and every output file, so a
successful exit implies the inventory is complete.  All outputs are
deterministic for a given flag set: rerunning a command reproduces its
directory byte for byte.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import re
import sys
from pathlib import Path

import numpy as np

from . import __version__
from ._threads import thread_request
from .checkpoint import CHECKPOINT_FORMAT_VERSION, Checkpoint, load_checkpoint
from .errors import ConfigError, PpcnError, StorageError
from .nn import PpcnModel, parameter_count, parse_structure
from .polarimetry import AopConvention, InputStrategy
from .ptns import VERSION as PTNS_FORMAT_VERSION
from .ptns import read_ptns, write_bytes_atomic, write_ptns
from .scenegen import (DATASET_FORMAT_VERSION, SCENE_FAMILIES, generate_dataset,
                       make_scene_spec, read_dataset, write_dataset)
from .training import (PPCN_ROUTE, TrainConfig, evaluate, resume_training,
                       sweep, train_fit_params, train_joint)

_LOG = logging.getLogger("ppcn.cli")

_STRATEGY_CHOICES = (PPCN_ROUTE,) + tuple(s.value for s in InputStrategy)
_CONVENTION_CHOICES = tuple(c.value for c in AopConvention)


# ---------------------------------------------------------------------------
# small parsing helpers

def _parse_size(text: str) -> tuple[int, int]:
    m = re.fullmatch(r"(\d+)x(\d+)", text.strip())
    if m is None:
        raise ConfigError(f"--size must look like WxH (e.g. 64x64), got {text!r}")
    return int(m.group(1)), int(m.group(2))


def _parse_int_list(text: str, flag: str) -> list[int]:
    try:
        values = [int(tok) for tok in text.split(",") if tok.strip() != ""]
    except ValueError:
        raise ConfigError(f"{flag} must be a comma separated integer list, got {text!r}") from None
    if not values:
        raise ConfigError(f"{flag} must name at least one value")
    return values


def _parse_head_channels(text: str) -> tuple[int, int]:
    values = _parse_int_list(text, "--head-channels")
    if len(values) != 2 or any(v < 1 for v in values):
        raise ConfigError(f"--head-channels must be two positive integers, got {text!r}")
    return values[0], values[1]


def _canonical_json(doc) -> str:
    return json.dumps(doc, sort_keys=True, separators=(",", ": "), indent=1) + "\n"


def _write_run_manifest(out_dir: Path, command: str, config: dict) -> None:
    """Inventory of every file under out_dir, written last and atomically."""
    entries = sorted(
        p.relative_to(out_dir).as_posix()
        for p in out_dir.rglob("*")
        if p.is_file() and p.name != "run_manifest.json"
    )
    doc = {
        "command": command,
        "config": config,
        "format_versions": {
            "checkpoint": CHECKPOINT_FORMAT_VERSION,
            "dataset": DATASET_FORMAT_VERSION,
            "ptns": PTNS_FORMAT_VERSION,
        },
        "outputs": entries,
        "tool_version": __version__,
    }
    write_bytes_atomic(out_dir / "run_manifest.json", _canonical_json(doc).encode())


def _check_thread_env() -> None:
    raw = os.environ.get("PPCN_THREADS")
    if raw is None:
        return
    n = thread_request()
    if n is None or n < 0:
        raise ConfigError(f"PPCN_THREADS must be a non-negative integer, got {raw!r}")


# ---------------------------------------------------------------------------
# train-config plumbing shared by fit / train-joint / sweep

def _add_train_flags(p: argparse.ArgumentParser, mode: str) -> None:
    p.add_argument("--data", help="dataset directory")
    p.add_argument("--out", required=True, help="output directory for metrics and checkpoints")
    p.add_argument("--structure", help="dash separated widths, e.g. 4-8-16-8-3")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch", type=int, default=None, help="mini-batch size (default 2)")
    p.add_argument("--lr", type=float, default=None, help="learning rate (default 0.003)")
    p.add_argument("--momentum", type=float, default=None, help="SGD momentum (default 0.9)")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--aop-convention", choices=_CONVENTION_CHOICES, default=None)
    p.add_argument("--bn-before-relu", action="store_true", default=None,
                   help="order fusion units conv-bn-relu instead of conv-relu-bn")
    p.add_argument("--checkpoint-every", type=int, default=None, metavar="E",
                   help="write a checkpoint every E epochs (0 = final only)")
    p.add_argument("--timing", action="store_true", default=None,
                   help="record wall-clock epoch times in the metrics CSV "
                        "(off by default so reruns are byte-identical)")
    if mode == "joint":
        p.add_argument("--strategy", choices=_STRATEGY_CHOICES, default=None,
                       help="input route: the fusion network or a fixed-channel baseline")
        p.add_argument("--head-channels", default=None, metavar="A,B",
                       help="widths of the two 3x3 head stages (default 16,16)")
    p.add_argument("--resume", metavar="CKPT", default=None,
                   help="checkpoint directory to continue from; only --epochs "
                        "may be combined with it")


def _config_overrides(args, mode: str) -> dict:
    """Flag values the user actually supplied, as TrainConfig fields."""
    pairs = [
        ("dataset", args.data),
        ("structure", args.structure),
        ("epochs", args.epochs),
        ("batch_size", args.batch),
        ("learning_rate", args.lr),
        ("momentum", args.momentum),
        ("seed", args.seed),
        ("aop_convention", args.aop_convention),
        ("bn_before_relu", args.bn_before_relu),
        ("checkpoint_every", args.checkpoint_every),
        ("record_timing", args.timing),
    ]
    if mode == "joint":
        pairs.append(("strategy", args.strategy))
        if args.head_channels is not None:
            pairs.append(("head_channels", _parse_head_channels(args.head_channels)))
    return {k: v for k, v in pairs if v is not None}


def _run_training(args, mode: str):
    overrides = _config_overrides(args, mode)
    if args.resume is not None:
        extra = sorted(set(overrides) - {"epochs"})
        if extra:
            raise ConfigError(
                f"--resume accepts only --epochs as an override, also got {extra}"
            )
        return resume_training(args.resume, epochs=overrides.get("epochs"),
                               out_dir=args.out)
    if "dataset" not in overrides:
        raise ConfigError("--data is required when not resuming")
    config = TrainConfig(mode=mode, **overrides).validate()
    runner = train_fit_params if mode == "fit" else train_joint
    return runner(config, out_dir=args.out)


# ---------------------------------------------------------------------------
# subcommand implementations

def cmd_gen_data(args) -> int:
    if args.count < 1:
        raise ConfigError(f"count must be >= 1, got {args.count}")
    if args.seed < 0:
        raise ConfigError(f"seed must be >= 0, got {args.seed}")
    if args.noise < 0:
        raise ConfigError(f"noise must be >= 0, got {args.noise}")
    width, height = _parse_size(args.size)
    spec = make_scene_spec(args.scene_family, width, height, args.seed,
                           noise_sigma=args.noise, num_regions=args.regions)
    ds = generate_dataset(spec, args.count)
    out = Path(args.out)
    write_dataset(out, ds)
    _write_run_manifest(out, "gen-data", {
        "count": args.count, "size": args.size, "seed": args.seed,
        "noise": args.noise, "scene_family": args.scene_family,
        "regions": args.regions,
    })
    _LOG.info("wrote %d samples (%dx%d, family %s) to %s",
              ds.count, width, height, args.scene_family, out)
    return 0


def cmd_count_params(args) -> int:
    print(parameter_count(parse_structure(args.structure)))
    return 0


def _report_final(result) -> None:
    last_epoch = result.history[-1].epoch
    for row in result.history:
        if row.epoch != last_epoch:
            continue
        parts = [f"epoch={row.epoch}", f"split={row.split}", f"loss={row.loss!r}"]
        if row.accuracy is not None:
            parts.append(f"accuracy={row.accuracy!r}")
        for k, iou in enumerate(row.ious, start=1):
            parts.append(f"iou_class{k}={iou!r}")
        print(" ".join(parts))


def cmd_fit(args) -> int:
    result = _run_training(args, "fit")
    _write_run_manifest(Path(args.out), "fit", result.config.to_dict())
    _report_final(result)
    return 0


def cmd_train_joint(args) -> int:
    result = _run_training(args, "joint")
    _write_run_manifest(Path(args.out), "train-joint", result.config.to_dict())
    _report_final(result)
    return 0


def cmd_eval(args) -> int:
    row = evaluate(args.checkpoint, args.data, split=args.split)
    parts = [f"epoch={row.epoch}", f"split={row.split}", f"loss={row.loss!r}"]
    if row.accuracy is not None:
        parts.append(f"accuracy={row.accuracy!r}")
    for k, iou in enumerate(row.ious, start=1):
        parts.append(f"iou_class{k}={iou!r}")
    print(" ".join(parts))
    return 0


def cmd_sweep(args) -> int:
    if args.resume is not None:
        raise ConfigError("sweep does not support --resume")
    mode = args.mode
    overrides = _config_overrides(args, mode)
    if "dataset" not in overrides:
        raise ConfigError("--data is required")
    base = TrainConfig(mode=mode, **overrides)
    outputs = strategies = None
    if args.outputs is not None:
        outputs = _parse_int_list(args.outputs, "--outputs")
    if args.strategies is not None:
        strategies = [s.strip() for s in args.strategies.split(",") if s.strip()]
        if not strategies:
            raise ConfigError("--strategies must name at least one strategy")
    seeds = _parse_int_list(args.seeds, "--seeds") if args.seeds else None
    rows = sweep(base, outputs=outputs, strategies=strategies, seeds=seeds,
                 out_dir=args.out)
    _write_run_manifest(Path(args.out), "sweep", {
        **base.to_dict(), "outputs": outputs, "strategies": strategies,
        "seeds": seeds,
    })
    for row in rows:
        parts = [f"label={row['label']}", f"seed={row['seed']}",
                 f"split={row['split']}", f"loss={row['loss']!r}"]
        if row["accuracy"] is not None:
            parts.append(f"accuracy={row['accuracy']!r}")
        print(" ".join(parts))
    return 0


# ---------------------------------------------------------------------------
# export

def _load_fusion_model(ckpt: Checkpoint) -> PpcnModel:
    config = TrainConfig.from_dict(ckpt.config)
    if config.mode == "joint" and config.strategy != PPCN_ROUTE:
        raise ConfigError(
            f"checkpoint was trained with strategy {config.strategy!r} and has "
            "no fusion network to export"
        )
    model = PpcnModel(parse_structure(config.structure),
                      bn_before_relu=config.bn_before_relu)
    for name, layer, attr in model.parameters():
        key = f"ppcn.{name}"
        if key not in ckpt.arrays:
            raise ConfigError(f"checkpoint is missing parameter {key!r}")
        current = getattr(layer, attr)
        setattr(layer, attr, ckpt.arrays[key].astype(current.dtype))
    for name, _ in model.state_arrays():
        key = f"ppcn.state.{name}"
        if key not in ckpt.arrays:
            raise ConfigError(f"checkpoint is missing state {key!r}")
        model.load_state_array(name, ckpt.arrays[key])
    return model


def _load_export_input(path: Path, index: int) -> np.ndarray:
    """A single (4, H, W) raw stack from a PTNS file or a dataset directory."""
    if path.is_dir():
        ds = read_dataset(path)
        if not (0 <= index < ds.count):
            raise ConfigError(f"--index {index} out of range for {ds.count} samples")
        return ds.raws[index]
    arr = read_ptns(path)
    if arr.ndim == 4 and arr.shape[1] == 4:
        if not (0 <= index < arr.shape[0]):
            raise ConfigError(f"--index {index} out of range for {arr.shape[0]} samples")
        arr = arr[index]
    if arr.ndim != 3 or arr.shape[0] != 4:
        raise ConfigError(
            f"export input must be a (4, H, W) raw stack, got shape {arr.shape}"
        )
    return arr


def _to_gray(plane: np.ndarray, bits: int) -> np.ndarray:
    """Min-max normalize one channel; a constant channel maps to mid-gray."""
    lo = float(plane.min())
    hi = float(plane.max())
    if hi > lo:
        norm = (plane.astype(np.float64) - lo) / (hi - lo)
    else:
        norm = np.full(plane.shape, 0.5)
    top = (1 << bits) - 1
    levels = np.rint(norm * top)
    return levels.astype(np.uint8 if bits == 8 else np.uint16)


def cmd_export(args) -> int:
    try:
        from PIL import Image
    except ImportError:
        raise ConfigError("image export needs the Pillow package") from None

    ckpt = load_checkpoint(args.checkpoint)
    model = _load_fusion_model(ckpt)
    raw = _load_export_input(Path(args.input), args.index)
    x = raw[np.newaxis].astype(np.float32)
    out = model.forward(x, train=False)[0]

    bits = 8 if args.format == "png8" else 16
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    for k in range(out.shape[0]):
        plane = np.ascontiguousarray(out[k])
        write_ptns(out_dir / f"out_ch{k}.ptns", plane)
        gray = _to_gray(plane, bits)
        if bits == 8:
            img = Image.fromarray(gray, mode="L")
        else:
            img = Image.fromarray(gray.astype(np.int32), mode="I").convert("I;16")
        img.save(out_dir / f"out_ch{k}.png", format="PNG", compress_level=6)
    _write_run_manifest(out_dir, "export", {
        "checkpoint": str(args.checkpoint), "input": str(args.input),
        "index": args.index, "format": args.format,
    })
    _LOG.info("exported %d channels to %s", out.shape[0], out_dir)
    return 0


# ---------------------------------------------------------------------------
# parser and entry point

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ppcn",
        description="Polarimetric fusion network toolkit",
    )
    parser.add_argument("--version", action="version", version=f"ppcn {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true",
                        help="debug logging to stderr")
    parser.add_argument("-q", "--quiet", action="store_true",
                        help="warnings and errors only")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, required=True, help="number of samples")
    p.add_argument("--size", default="64x64", metavar="WxH")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--noise", type=float, default=0.0,
                   help="Gaussian sensor noise sigma (0 = noiseless)")
    p.add_argument("--scene-family", default="mixed",
                   choices=sorted(SCENE_FAMILIES))
    p.add_argument("--regions", type=int, default=None,
                   help="override the family's region count")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("count-params", help="print a structure's parameter count")
    p.add_argument("--structure", required=True)
    p.set_defaults(func=cmd_count_params)

    p = sub.add_parser("fit", help="fit fusion outputs to analytic targets")
    _add_train_flags(p, "fit")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("train-joint", help="joint training with the segmentation head")
    _add_train_flags(p, "joint")
    p.set_defaults(func=cmd_train_joint)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=("train", "val", "all"), default="val")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="grid runs over output counts or strategies")
    _add_train_flags(p, "joint")
    p.add_argument("--mode", choices=("fit", "joint"), default="joint")
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--outputs", metavar="X,Y,Z",
                   help="sweep the fusion output count")
    g.add_argument("--strategies", metavar="A,B,C",
                   help="sweep input routes, e.g. ppcn,raw4,s0_only")
    p.add_argument("--seeds", default=None, metavar="S0,S1,...",
                   help="run every grid point once per seed")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("export", help="write fusion output channels as images")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True,
                   help="raw-stack PTNS file or dataset directory")
    p.add_argument("--index", type=int, default=0,
                   help="sample index when --input holds several")
    p.add_argument("--out", required=True)
    p.add_argument("--format", choices=("png8", "png16"), default="png8")
    p.set_defaults(func=cmd_export)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.DEBUG if args.verbose else (
        logging.WARNING if args.quiet else logging.INFO)
    logging.basicConfig(stream=sys.stderr, level=level, format="%(message)s")
    try:
        _check_thread_env()
        return args.func(args)
    except PpcnError as exc:
        _LOG.error("error: %s", exc)
        return exc.exit_code
    except OSError as exc:
        _LOG.error("error: %s", exc)
        return StorageError.exit_code
    except KeyboardInterrupt:
        return 130


if __name__ == "__main__":
    sys.exit(main())
