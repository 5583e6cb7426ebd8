"""Checkpoint directories: one json metadata file plus PTNS tensors.

Layout:

    <dir>/checkpoint.json   format version, kind, config echo, epoch,
                            RNG bookkeeping, array index
    <dir>/arrays/<name>.ptns

The json is written canonically (sorted keys, fixed separators), arrays
are bit-exact, and the directory is staged then renamed, which together
give the contract save -> load -> save byte-identical.
"""

from __future__ import annotations

import json
import os
import shutil
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, StorageError
from .ptns import read_ptns, write_ptns

CHECKPOINT_FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    kind: str                      # "fit" or "joint"
    config: dict                   # TrainConfig echo, json-compatible
    epoch: int                     # epochs fully completed
    arrays: dict[str, np.ndarray]  # parameters, BN stats, optimizer velocities
    rng_state: dict = field(default_factory=dict)


def save_checkpoint(directory: str | os.PathLike, ckpt: Checkpoint) -> None:
    directory = Path(directory)
    tmp = directory.with_name(directory.name + f".tmp-{os.getpid()}")
    try:
        if tmp.exists():
            shutil.rmtree(tmp)
        (tmp / "arrays").mkdir(parents=True)
        index = {}
        for name in sorted(ckpt.arrays):
            arr = ckpt.arrays[name]
            fname = f"arrays/{name}.ptns"
            write_ptns(tmp / fname, arr)
            index[name] = {"file": fname, "dtype": str(arr.dtype), "shape": list(arr.shape)}
        meta = {
            "format_version": CHECKPOINT_FORMAT_VERSION,
            "kind": ckpt.kind,
            "epoch": int(ckpt.epoch),
            "config": ckpt.config,
            "rng_state": ckpt.rng_state,
            "arrays": index,
        }
        (tmp / "checkpoint.json").write_text(
            json.dumps(meta, sort_keys=True, separators=(",", ": "), indent=1) + "\n"
        )
        if directory.exists():
            shutil.rmtree(directory)
        os.replace(tmp, directory)
    except OSError as exc:
        raise StorageError(f"cannot write checkpoint to {directory}: {exc}") from exc
    finally:
        if tmp.exists():
            shutil.rmtree(tmp, ignore_errors=True)


def load_checkpoint(directory: str | os.PathLike) -> Checkpoint:
    directory = Path(directory)
    meta_path = directory / "checkpoint.json"
    if not meta_path.is_file():
        raise StorageError(f"checkpoint metadata not found: {meta_path}")
    try:
        meta = json.loads(meta_path.read_text())
    except (OSError, ValueError) as exc:
        raise FormatError(f"{meta_path}: unreadable checkpoint metadata ({exc})") from exc
    version = meta.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise FormatError(
            f"{meta_path}: checkpoint format version {version!r}, "
            f"expected {CHECKPOINT_FORMAT_VERSION}"
        )
    arrays = {}
    for name, entry in meta.get("arrays", {}).items():
        path = directory / entry["file"]
        if not path.is_file():
            raise StorageError(f"checkpoint array missing: {path}")
        arr = read_ptns(path)
        if list(arr.shape) != entry["shape"] or str(arr.dtype) != entry["dtype"]:
            raise FormatError(f"{path}: stored array does not match its index entry")
        arrays[name] = arr
    return Checkpoint(
        kind=meta["kind"],
        config=meta["config"],
        epoch=int(meta["epoch"]),
        arrays=arrays,
        rng_state=meta.get("rng_state", {}),
    )
