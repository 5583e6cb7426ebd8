"""Synthetic polarimetric scenes with exact ground truth.

A scene is three per-pixel parameter planes (s0, dolp, aop) plus an
integer class mask. Scenes are built from a background profile and a
handful of randomly placed elliptical or rectangular regions, each
painted with values drawn from its class profile. A profile field of
None means "inherit the background value exactly", which is how
camouflaged classes are constructed: a class can match the background
in s0 to the last bit while differing strongly in aop.

Rendering inverts the analysis math through the linear intensity model

    i_theta = 1/2 * (s0 + s1*cos 2theta + s2*sin 2theta),
    s1 = s0 * dolp * cos(2*aop),   s2 = s0 * dolp * sin(2*aop),

for theta in {0, 45, 90, 135} degrees, with optional additive Gaussian
noise clipped at zero. The aop stored in scenes follows the standard
convention (s2 leading the arctangent); rendered stacks are themselves
convention-free, conventions only reappear at analysis time.

Everything is a pure function of (spec, seed): generation, rendering and
dataset assembly are bit-reproducible.
"""

from __future__ import annotations

import json
import os
import shutil
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError, InputError, ShapeError, StorageError
from .polarimetry import RawStack
from .ptns import read_ptns, write_ptns
from .rand import STREAM_NOISE, STREAM_SCENE, child_seed, rng_for

DATASET_FORMAT_VERSION = 1

_AOP_LIMIT = np.pi / 4 + 1e-6  # tolerance for float32 round trips at the range edge

_COVERAGE_ATTEMPTS = 200


@dataclass(frozen=True)
class ClassProfile:
    """Value ranges for one class; None fields inherit the background value."""

    s0: tuple[float, float] | None = None
    dolp: tuple[float, float] | None = None
    aop: tuple[float, float] | None = None
    aop_sign_flip: bool = False

    def validate(self, is_background: bool, label: str) -> None:
        if is_background:
            for name in ("s0", "dolp", "aop"):
                if getattr(self, name) is None:
                    raise ConfigError(f"{label}: background profile must fix {name}")
        for name, bounds in (("s0", (0.0, 2.0)), ("dolp", (0.0, 1.0)),
                             ("aop", (-np.pi / 4, np.pi / 4))):
            rng = getattr(self, name)
            if rng is None:
                continue
            lo, hi = float(rng[0]), float(rng[1])
            if not (bounds[0] <= lo <= hi <= bounds[1]):
                raise ConfigError(f"{label}: {name} range ({lo}, {hi}) outside {bounds}")


@dataclass(frozen=True)
class SceneSpec:
    width: int
    height: int
    seed: int
    num_regions: int
    noise_sigma: float
    class_profiles: tuple[ClassProfile, ...]  # index 0 is the background
    region_scale: tuple[float, float] = (0.15, 0.45)
    coverage: tuple[float, float] | None = None

    def validate(self) -> None:
        if self.width < 8 or self.height < 8:
            raise ConfigError(f"scene must be at least 8x8, got {self.width}x{self.height}")
        if self.noise_sigma < 0:
            raise ConfigError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if self.num_regions < 0:
            raise ConfigError(f"num_regions must be >= 0, got {self.num_regions}")
        if len(self.class_profiles) < 1:
            raise ConfigError("class_profiles must at least contain the background profile")
        if self.num_regions > 0 and len(self.class_profiles) < 2:
            raise ConfigError("regions requested but no target class profiles given")
        for k, prof in enumerate(self.class_profiles):
            prof.validate(is_background=(k == 0), label=f"class_profiles[{k}]")

    @property
    def num_classes(self) -> int:
        return len(self.class_profiles) - 1


@dataclass(frozen=True)
class GroundTruthScene:
    s0_true: np.ndarray
    dolp_true: np.ndarray
    aop_true: np.ndarray
    class_mask: np.ndarray

    def validate(self) -> None:
        shape = self.s0_true.shape
        for name in ("s0_true", "dolp_true", "aop_true", "class_mask"):
            plane = getattr(self, name)
            if plane.shape != shape or plane.ndim != 2:
                raise ShapeError(f"{name} shape {plane.shape} inconsistent with {shape}")
        for name, arr in (("s0_true", self.s0_true), ("dolp_true", self.dolp_true),
                          ("aop_true", self.aop_true)):
            if not np.isfinite(arr).all():
                raise InputError(f"{name} contains non-finite values")
        if self.s0_true.min() < 0 or self.s0_true.max() > 2:
            raise InputError("s0_true outside [0, 2]")
        if self.dolp_true.min() < 0 or self.dolp_true.max() > 1:
            raise InputError("dolp_true outside [0, 1]")
        if abs(self.aop_true).max() > _AOP_LIMIT:
            raise InputError("aop_true outside [-pi/4, pi/4]")
        if not np.issubdtype(self.class_mask.dtype, np.integer):
            raise InputError("class_mask must be integer typed")
        if self.class_mask.min() < 0:
            raise InputError("class_mask labels must be >= 0")

    @property
    def shape(self) -> tuple[int, int]:
        return self.s0_true.shape


def _draw(rng, bounds) -> float:
    return float(rng.uniform(bounds[0], bounds[1]))


def generate_scene(spec: SceneSpec) -> GroundTruthScene:
    """Deterministic scene synthesis; same spec (incl. seed) gives identical output."""
    spec.validate()
    h, w = spec.height, spec.width
    rng = rng_for(spec.seed, STREAM_SCENE)
    bg = spec.class_profiles[0]
    bg_s0 = _draw(rng, bg.s0)
    bg_dolp = _draw(rng, bg.dolp)
    bg_aop = _draw(rng, bg.aop)

    ys, xs = np.mgrid[0:h, 0:w]
    half = min(w, h) / 2.0

    for _ in range(_COVERAGE_ATTEMPTS):
        s0 = np.full((h, w), bg_s0)
        dolp = np.full((h, w), bg_dolp)
        aop = np.full((h, w), bg_aop)
        mask = np.zeros((h, w), dtype=np.uint8)

        for _ in range(spec.num_regions):
            cls = int(rng.integers(1, spec.num_classes + 1))
            prof = spec.class_profiles[cls]
            kind = int(rng.integers(0, 2))
            cx = rng.uniform(0, w)
            cy = rng.uniform(0, h)
            rx = rng.uniform(spec.region_scale[0], spec.region_scale[1]) * half
            ry = rng.uniform(spec.region_scale[0], spec.region_scale[1]) * half
            if kind == 0:
                region = ((xs - cx) / rx) ** 2 + ((ys - cy) / ry) ** 2 <= 1.0
            else:
                region = (np.abs(xs - cx) <= rx) & (np.abs(ys - cy) <= ry)

            v_s0 = _draw(rng, prof.s0) if prof.s0 is not None else bg_s0
            v_dolp = _draw(rng, prof.dolp) if prof.dolp is not None else bg_dolp
            v_aop = _draw(rng, prof.aop) if prof.aop is not None else bg_aop

            s0[region] = v_s0
            dolp[region] = v_dolp
            if prof.aop_sign_flip:
                flips = rng.integers(0, 2, size=int(region.sum())) * 2 - 1
                aop[region] = v_aop * flips
            else:
                aop[region] = v_aop
            mask[region] = cls

        if spec.coverage is None or spec.num_regions == 0:
            break
        frac = float((mask > 0).mean())
        if spec.coverage[0] <= frac <= spec.coverage[1]:
            break
    else:
        raise ConfigError(
            f"could not hit target coverage {spec.coverage} in {_COVERAGE_ATTEMPTS} attempts; "
            "loosen the band or adjust region_scale/num_regions"
        )

    scene = GroundTruthScene(s0_true=s0, dolp_true=dolp, aop_true=aop, class_mask=mask)
    scene.validate()
    return scene


def render_raw(scene: GroundTruthScene, noise_sigma: float = 0.0, seed: int = 0) -> RawStack:
    """Render a scene to the four analyzer-angle intensities.

    Noiseless rendering is the exact inverse of the analytic decomposition
    (standard aop convention); intensities stay within [0, s0] pointwise.
    Gaussian noise of the given sigma is then added independently per
    angle image and the result clipped at zero.
    """
    if noise_sigma < 0:
        raise ConfigError(f"noise_sigma must be >= 0, got {noise_sigma}")
    s0 = scene.s0_true.astype(np.float64)
    dolp = scene.dolp_true.astype(np.float64)
    aop = scene.aop_true.astype(np.float64)
    s1 = s0 * dolp * np.cos(2.0 * aop)
    s2 = s0 * dolp * np.sin(2.0 * aop)
    planes = [0.5 * (s0 + s1), 0.5 * (s0 + s2), 0.5 * (s0 - s1), 0.5 * (s0 - s2)]
    if noise_sigma > 0:
        rng = rng_for(seed, STREAM_NOISE)
        planes = [p + rng.normal(0.0, noise_sigma, size=p.shape) for p in planes]
    planes = [np.maximum(p, 0.0) for p in planes]
    return RawStack(i0=planes[0], i45=planes[1], i90=planes[2], i135=planes[3])


# ---------------------------------------------------------------------------
# Scene families
#
# Named profile sets used by the command line tool and the experiment suite.
#   mixed     two target classes against a generic background: one matching
#             the background in s0 and dolp but rotated in aop, one matching
#             in s0 and aop but differing in dolp.
#   camo      one class indistinguishable from the background in both s0 and
#             dolp; its aop magnitude is shifted and the sign alternates per
#             pixel, so only per-pixel nonlinear processing can reveal it.
#   distinct  two classes separated from the background (and each other)
#             purely by their polarization state, s0 carries no signal.

SCENE_FAMILIES: dict[str, dict] = {
    "mixed": dict(
        profiles=(
            ClassProfile(s0=(0.7, 1.2), dolp=(0.05, 0.15), aop=(-0.05, 0.05)),
            ClassProfile(aop=(0.4, 0.65)),
            ClassProfile(dolp=(0.5, 0.8)),
        ),
        num_regions=5,
        region_scale=(0.15, 0.45),
        coverage=None,
    ),
    "camo": dict(
        profiles=(
            ClassProfile(s0=(0.8, 1.2), dolp=(0.06, 0.1), aop=(-0.04, 0.04)),
            ClassProfile(aop=(0.5, 0.7), aop_sign_flip=True),
        ),
        num_regions=4,
        region_scale=(0.3, 0.55),
        coverage=(0.42, 0.58),
    ),
    "distinct": dict(
        profiles=(
            ClassProfile(s0=(0.7, 1.1), dolp=(0.02, 0.08), aop=(-0.1, 0.1)),
            ClassProfile(dolp=(0.45, 0.8), aop=(-0.08, 0.08)),
            ClassProfile(dolp=(0.45, 0.8), aop=(0.55, 0.75)),
        ),
        num_regions=5,
        region_scale=(0.15, 0.4),
        coverage=(0.25, 0.6),
    ),
}


def make_scene_spec(family: str, width: int, height: int, seed: int,
                    noise_sigma: float = 0.0, num_regions: int | None = None) -> SceneSpec:
    """SceneSpec for one of the named families."""
    try:
        fam = SCENE_FAMILIES[family]
    except KeyError:
        raise ConfigError(
            f"unknown scene family {family!r} (choose from {sorted(SCENE_FAMILIES)})"
        ) from None
    return SceneSpec(
        width=int(width),
        height=int(height),
        seed=int(seed),
        num_regions=fam["num_regions"] if num_regions is None else int(num_regions),
        noise_sigma=float(noise_sigma),
        class_profiles=fam["profiles"],
        region_scale=fam["region_scale"],
        coverage=fam["coverage"],
    )


# ---------------------------------------------------------------------------
# Datasets

@dataclass
class PolarDataset:
    """In-memory dataset: raw stacks, ground-truth planes and class masks."""

    raws: np.ndarray    # (N, 4, H, W) float32, analyzer order 0/45/90/135
    truth: np.ndarray   # (N, 3, H, W) float32, plane order s0/dolp/aop
    masks: np.ndarray   # (N, H, W) uint8
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.raws.ndim != 4 or self.raws.shape[1] != 4:
            raise ShapeError(f"raws must be (N, 4, H, W), got {self.raws.shape}")
        n, _, h, w = self.raws.shape
        if self.truth.shape != (n, 3, h, w):
            raise ShapeError(f"truth shape {self.truth.shape} != ({n}, 3, {h}, {w})")
        if self.masks.shape != (n, h, w):
            raise ShapeError(f"masks shape {self.masks.shape} != ({n}, {h}, {w})")

    @property
    def count(self) -> int:
        return self.raws.shape[0]

    @property
    def image_shape(self) -> tuple[int, int]:
        return self.raws.shape[2], self.raws.shape[3]

    @property
    def num_classes(self) -> int:
        return int(self.meta.get("num_classes", int(self.masks.max())))

    def stack(self, i: int) -> RawStack:
        return RawStack.from_channels(self.raws[i])

    def scene(self, i: int) -> GroundTruthScene:
        return GroundTruthScene(
            s0_true=self.truth[i, 0], dolp_true=self.truth[i, 1],
            aop_true=self.truth[i, 2], class_mask=self.masks[i],
        )


def generate_dataset(base: SceneSpec, count: int, scene_family: str | None = None) -> PolarDataset:
    """Generate count scenes and render them, all derived from base.seed.

    Sample i draws its scene from stream (seed, SCENE, i) and its sensor
    noise from stream (seed, NOISE, i), so samples are independent and the
    whole dataset is a pure function of (base, count).
    """
    base.validate()
    if count < 1:
        raise ConfigError(f"count must be >= 1, got {count}")
    raws = np.empty((count, 4, base.height, base.width), dtype=np.float32)
    truth = np.empty((count, 3, base.height, base.width), dtype=np.float32)
    masks = np.empty((count, base.height, base.width), dtype=np.uint8)
    for i in range(count):
        scene = generate_scene(replace(base, seed=child_seed(base.seed, STREAM_SCENE, i)))
        stack = render_raw(scene, base.noise_sigma, seed=child_seed(base.seed, STREAM_NOISE, i))
        raws[i] = stack.channels().astype(np.float32)
        truth[i, 0] = scene.s0_true.astype(np.float32)
        truth[i, 1] = scene.dolp_true.astype(np.float32)
        truth[i, 2] = scene.aop_true.astype(np.float32)
        masks[i] = scene.class_mask
    meta = {
        "format_version": DATASET_FORMAT_VERSION,
        "kind": "polar-dataset",
        "count": count,
        "width": base.width,
        "height": base.height,
        "seed": base.seed,
        "noise_sigma": base.noise_sigma,
        "num_classes": base.num_classes,
        "scene_family": scene_family,
        "spec": _spec_echo(base),
    }
    return PolarDataset(raws=raws, truth=truth, masks=masks, meta=meta)


def _spec_echo(spec: SceneSpec) -> dict:
    echo = asdict(spec)
    echo["class_profiles"] = [asdict(p) for p in spec.class_profiles]
    return echo


def write_dataset(directory: str | os.PathLike, dataset: PolarDataset) -> dict:
    """Persist a dataset; returns the manifest dict.

    The directory is staged under a temporary name and moved into place,
    so an interrupted write leaves no partial dataset behind.
    """
    directory = Path(directory)
    tmp = directory.with_name(directory.name + f".tmp-{os.getpid()}")
    try:
        if tmp.exists():
            shutil.rmtree(tmp)
        samples = tmp / "samples"
        samples.mkdir(parents=True)
        for i in range(dataset.count):
            write_ptns(samples / f"sample_{i:05d}_raw.ptns", dataset.raws[i])
            write_ptns(samples / f"sample_{i:05d}_truth.ptns", dataset.truth[i])
            write_ptns(samples / f"sample_{i:05d}_mask.ptns", dataset.masks[i])
        manifest = dict(dataset.meta)
        manifest["format_version"] = DATASET_FORMAT_VERSION
        (tmp / "manifest.json").write_text(_canonical_json(manifest) + "\n")
        if directory.exists():
            shutil.rmtree(directory)
        os.replace(tmp, directory)
    except OSError as exc:
        raise StorageError(f"cannot write dataset to {directory}: {exc}") from exc
    finally:
        if tmp.exists():
            shutil.rmtree(tmp, ignore_errors=True)
    return manifest


def read_dataset(directory: str | os.PathLike) -> PolarDataset:
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.is_file():
        raise StorageError(f"manifest not found: {manifest_path}")
    try:
        manifest = json.loads(manifest_path.read_text())
    except (OSError, ValueError) as exc:
        raise FormatError(f"{manifest_path}: unreadable manifest ({exc})") from exc
    version = manifest.get("format_version")
    if version != DATASET_FORMAT_VERSION:
        raise FormatError(
            f"{manifest_path}: dataset format version {version!r}, "
            f"expected {DATASET_FORMAT_VERSION}"
        )
    count = int(manifest["count"])
    h, w = int(manifest["height"]), int(manifest["width"])
    raws = np.empty((count, 4, h, w), dtype=np.float32)
    truth = np.empty((count, 3, h, w), dtype=np.float32)
    masks = np.empty((count, h, w), dtype=np.uint8)
    for i in range(count):
        base = directory / "samples" / f"sample_{i:05d}"
        for suffix, dest, dims in (("raw", raws, (4, h, w)), ("truth", truth, (3, h, w)),
                                   ("mask", masks, (h, w))):
            path = base.parent / f"{base.name}_{suffix}.ptns"
            if not path.is_file():
                raise StorageError(f"dataset sample missing: {path}")
            arr = read_ptns(path)
            if arr.shape != dims:
                raise FormatError(f"{path}: shape {arr.shape}, expected {dims}")
            dest[i] = arr
    return PolarDataset(raws=raws, truth=truth, masks=masks, meta=manifest)


def _canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ": "), indent=1)
