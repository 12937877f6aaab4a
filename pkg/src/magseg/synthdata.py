"""Procedural four-modality scenes, sensor corruptions and the dataset layout.

Modalities of a scene (all ``3 x H x W`` in [0, 1]):

* ``R``: class-tinted shapes shaded by a smooth illumination field over a flat
  background;
* ``D``: normalised distance to camera, class-dependent depth bands;
* ``E``: normalised spatial gradient magnitude of ``R``;
* ``L``: ``D`` with a fixed fraction of pixels dropped to zero.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.ndimage import uniform_filter1d

from . import serialization
from .errors import DataError, DomainError, FormatError, GenError, UsageError
from .mff import MODALITIES

IGNORE_INDEX = 255
LIDAR_DROP = 0.5
CONDITION_KINDS = ("clean", "motion_blur", "over_exposure", "under_exposure", "lidar_jitter", "event_lowres")
_TARGET = {
    "motion_blur": "R",
    "over_exposure": "R",
    "under_exposure": "R",
    "lidar_jitter": "L",
    "event_lowres": "E",
}


@dataclass(frozen=True)
class SceneSample:
    y: np.ndarray
    rasters: dict  # modality name -> 3 x H x W
    seed: int

    @property
    def shape(self) -> tuple:
        return self.y.shape

    def __getitem__(self, name: str) -> np.ndarray:
        return self.rasters[name]

    def equals(self, other: "SceneSample") -> bool:
        return (
            self.seed == other.seed
            and np.array_equal(self.y, other.y)
            and all(np.array_equal(self.rasters[m], other.rasters[m]) for m in MODALITIES)
        )


@dataclass(frozen=True)
class Condition:
    kind: str = "clean"
    severity: float = 0.0

    def __post_init__(self):
        if self.kind not in CONDITION_KINDS:
            raise DomainError(f"unknown condition {self.kind!r}; expected one of {CONDITION_KINDS}")
        if not 0.0 <= self.severity <= 1.0:
            raise DomainError(f"severity must lie in [0, 1], got {self.severity}")

    @property
    def modality(self) -> str | None:
        return _TARGET.get(self.kind)

    @classmethod
    def parse(cls, text: str) -> "Condition":
        kind, _, sev = text.strip().partition(":")
        try:
            severity = float(sev) if sev else (0.0 if kind == "clean" else 1.0)
        except ValueError:
            raise DomainError(f"bad severity in condition {text!r}") from None
        return cls(kind, severity)

    def __str__(self) -> str:
        return self.kind if self.kind == "clean" else f"{self.kind}:{self.severity:g}"


# -- generation -------------------------------------------------------------


def class_palette(num_classes: int) -> np.ndarray:
    """Fixed RGB tint per class; class 0 (background) is mid grey."""
    rng = np.random.default_rng(1234 + num_classes)
    pal = rng.uniform(0.15, 0.85, size=(num_classes, 3))
    pal[0] = 0.5
    return pal


def class_depth(num_classes: int) -> np.ndarray:
    """Depth band centre per foreground class; background sits at 1.0."""
    n_fg = max(num_classes - 1, 1)
    centres = 0.2 + 0.6 * np.arange(n_fg) / max(n_fg - 1, 1)
    return np.concatenate([[1.0], centres])


def edge_map(r: np.ndarray) -> np.ndarray:
    """Gradient magnitude of ``R`` summed over channels, scaled to max 1, as 3 channels."""
    gy, gx = np.gradient(r, axis=(1, 2))
    mag = np.sqrt((gx * gx + gy * gy).sum(axis=0))
    peak = mag.max()
    mag = mag / peak if peak > 0 else np.zeros_like(mag)
    return np.repeat(mag[None], 3, axis=0)


def _shape_mask(rng, h, w, min_size, max_size):
    sh = int(rng.integers(min_size, max_size + 1))
    sw = int(rng.integers(min_size, max_size + 1))
    top = int(rng.integers(0, h - sh + 1))
    left = int(rng.integers(0, w - sw + 1))
    mask = np.zeros((h, w), dtype=bool)
    if rng.random() < 0.5:
        mask[top : top + sh, left : left + sw] = True
    else:
        yy, xx = np.mgrid[0:h, 0:w]
        cy, cx = top + (sh - 1) / 2, left + (sw - 1) / 2
        mask = ((yy - cy) / (sh / 2)) ** 2 + ((xx - cx) / (sw / 2)) ** 2 <= 1.0
    return mask


def gen_scene(seed: int, num_classes: int, height: int, width: int, n_shapes: int = 6,
              require_all_classes: bool = True, patch: int = 4) -> SceneSample:
    """Deterministic scene from ``seed``.

    Shapes get classes ``1..K-1`` (each class once first when
    ``require_all_classes``), a depth drawn from the class band, and are painted
    far-to-near so that later shapes occlude earlier ones.
    """
    if num_classes < 2:
        raise GenError(f"need at least 2 classes, got {num_classes}")
    if height < 16 or width < 16 or height % patch or width % patch:
        raise GenError(f"extent {height}x{width} must be >= 16 and divisible by {patch}")
    if require_all_classes and num_classes > n_shapes + 1:
        raise GenError(f"{n_shapes} shapes cannot cover {num_classes - 1} foreground classes")
    rng = np.random.default_rng(seed)
    n_fg = num_classes - 1
    if require_all_classes:
        cls = list(rng.permutation(np.arange(1, num_classes)))
        cls += list(rng.integers(1, num_classes, size=n_shapes - n_fg))
    else:
        cls = list(rng.integers(1, num_classes, size=n_shapes))
    bands = class_depth(num_classes)
    half_band = 0.25 / max(n_fg, 1)
    depths = [bands[c] + rng.uniform(-half_band, half_band) for c in cls]
    palette = class_palette(num_classes)
    min_size, max_size = max(4, height // 6), max(6, height // 2)

    y = np.zeros((height, width), dtype=np.int64)
    depth = np.ones((height, width))
    color = np.broadcast_to(palette[0][:, None, None], (3, height, width)).copy()
    fg = np.zeros((height, width), dtype=bool)
    for idx in np.argsort(depths)[::-1]:  # far first
        c = cls[idx]
        mask = None
        for _ in range(20):
            mask = _shape_mask(rng, height, width, min_size, max_size)
            if mask.any():
                break
        tint = np.clip(palette[c] + rng.normal(0, 0.12, size=3), 0, 1)
        y[mask] = c
        depth[mask] = depths[idx]
        color[:, mask] = tint[:, None]
        fg |= mask

    if require_all_classes:
        # occlusion can hide a class; restamp a small square of it on top
        for c in range(1, num_classes):
            if not np.any(y == c):
                top = int(rng.integers(0, height - 3))
                left = int(rng.integers(0, width - 3))
                y[top : top + 4, left : left + 4] = c
                depth[top : top + 4, left : left + 4] = bands[c]
                color[:, top : top + 4, left : left + 4] = palette[c][:, None, None]
                fg[top : top + 4, left : left + 4] = True

    yy, xx = np.mgrid[0:height, 0:width] / max(height, width)
    gx, gy, base = rng.uniform(-0.4, 0.4), rng.uniform(-0.4, 0.4), rng.uniform(0.8, 1.1)
    illum = np.clip(base + gx * (xx - 0.5) + gy * (yy - 0.5), 0.3, 1.3)
    r = np.where(fg[None], np.clip(color * illum[None], 0.0, 1.0), color)

    d = np.repeat(depth[None], 3, axis=0)
    n_pix = height * width
    drop = np.zeros(n_pix, dtype=bool)
    drop[rng.permutation(n_pix)[: int(round(LIDAR_DROP * n_pix))]] = True
    l_ras = np.where(drop.reshape(height, width)[None], 0.0, d)
    rasters = {"R": r, "D": d, "E": edge_map(r), "L": l_ras}
    return SceneSample(y, rasters, int(seed))


# -- corruption -------------------------------------------------------------


def _condition_seed(sample_seed: int, cond: Condition) -> list:
    digest = hashlib.sha256(f"{cond.kind}:{cond.severity!r}".encode()).digest()
    return [int(sample_seed) & 0xFFFFFFFF, int.from_bytes(digest[:4], "little")]


def corrupt(sample: SceneSample, condition: Condition | str) -> SceneSample:
    """Apply one sensor failure to its designated modality; labels untouched."""
    cond = Condition.parse(condition) if isinstance(condition, str) else condition
    kind, s = cond.kind, cond.severity
    if kind == "clean" or s == 0.0:
        return sample
    rasters = dict(sample.rasters)
    if kind == "motion_blur":
        width = 1 + int(np.floor(s * 6))
        if width > 1:
            rasters["R"] = uniform_filter1d(sample["R"], size=width, axis=2, mode="nearest")
    elif kind == "over_exposure":
        rasters["R"] = np.clip(sample["R"] * (1 + 2 * s), 0.0, 1.0)
    elif kind == "under_exposure":
        rasters["R"] = np.clip(sample["R"] * (1 - 2 * s), 0.0, 1.0)
    elif kind == "lidar_jitter":
        rng = np.random.default_rng(_condition_seed(sample.seed, cond))
        noise = rng.normal(0.0, s * 0.2, size=sample["L"].shape[1:])
        rasters["L"] = np.clip(sample["L"] + noise[None], 0.0, 1.0)
    elif kind == "event_lowres":
        f = 2 ** int(np.ceil(s * 2))
        e = sample["E"]
        c, h, w = e.shape
        if h % f or w % f:
            raise DomainError(f"event raster {h}x{w} not divisible by {f}")
        low = e.reshape(c, h // f, f, w // f, f).mean(axis=(2, 4))
        rasters["E"] = np.repeat(np.repeat(low, f, axis=1), f, axis=2)
    return replace(sample, rasters=rasters)


# -- on-disk format ---------------------------------------------------------


def write_sample(path: str | os.PathLike, sample: SceneSample) -> None:
    sections = {"y": sample.y.astype(np.float64)}
    sections.update({m: sample.rasters[m] for m in MODALITIES})
    sections["seed"] = np.array([float(sample.seed)])
    serialization.write_tensors(path, sections)


def read_sample(path: str | os.PathLike, num_classes: int | None = None) -> SceneSample:
    sec = serialization.read_tensors(path)
    missing = [k for k in ("y", *MODALITIES, "seed") if k not in sec]
    if missing:
        raise FormatError(f"{path}: missing sections {missing}")
    y = sec["y"]
    if y.ndim != 2 or np.any(y != np.round(y)):
        raise DataError(f"{path}: label map must be a 2-D integer grid")
    y = y.astype(np.int64)
    if num_classes is not None:
        bad = (y != IGNORE_INDEX) & ((y < 0) | (y >= num_classes))
        if np.any(bad):
            raise DataError(f"{path}: label value outside 0..{num_classes - 1} and not {IGNORE_INDEX}")
    rasters = {}
    for m in MODALITIES:
        r = sec[m]
        if r.shape != (3,) + y.shape:
            raise FormatError(f"{path}: raster {m} has shape {r.shape}, labels {y.shape}")
        rasters[m] = r
    return SceneSample(y, rasters, int(sec["seed"][0]))


def sample_seed(dataset_seed: int, split: str, index: int) -> int:
    split_id = {"train": 0, "val": 1}.get(split, 2)
    ss = np.random.SeedSequence([int(dataset_seed), split_id, int(index)])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


@dataclass
class DatasetSpec:
    seed: int = 0
    num_classes: int = 4
    height: int = 32
    width: int = 32
    train: int = 256
    val: int = 64
    n_shapes: int = 6
    conditions: list = field(default_factory=lambda: [str(Condition(k, 1.0)) for k in CONDITION_KINDS[1:]])

    def manifest(self) -> dict:
        return {
            "seed": self.seed,
            "K": self.num_classes,
            "H": self.height,
            "W": self.width,
            "counts": {"train": self.train, "val": self.val},
            "n_shapes": self.n_shapes,
            "conditions": list(self.conditions),
            "ignore_index": IGNORE_INDEX,
            "format_version": serialization.VERSION,
        }


def generate_split(spec: DatasetSpec, split: str) -> list[SceneSample]:
    n = spec.train if split == "train" else spec.val
    return [
        gen_scene(sample_seed(spec.seed, split, i), spec.num_classes, spec.height, spec.width, spec.n_shapes)
        for i in range(n)
    ]


def write_dataset(root: str | os.PathLike, spec: DatasetSpec, force: bool = False, threads: int = 1) -> Path:
    root = Path(root)
    if root.exists() and any(root.iterdir()) and not force:
        raise UsageError(f"{root} exists and is not empty (use --force)")
    for split in ("train", "val"):
        (root / split).mkdir(parents=True, exist_ok=True)
        for old in (root / split).glob("*.a2s"):
            old.unlink()

    jobs = [(split, i) for split in ("train", "val") for i in range(spec.train if split == "train" else spec.val)]

    def work(job):
        split, i = job
        s = gen_scene(sample_seed(spec.seed, split, i), spec.num_classes, spec.height, spec.width, spec.n_shapes)
        write_sample(root / split / f"{i:05d}.a2s", s)

    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(threads) as pool:
            list(pool.map(work, jobs))
    else:
        for job in jobs:
            work(job)
    with open(root / "manifest.json", "w") as fh:
        json.dump(spec.manifest(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return root


class Dataset:
    """Lazy view of one split of a dataset directory."""

    def __init__(self, root: str | os.PathLike, split: str = "train"):
        self.root = Path(root)
        manifest = self.root / "manifest.json"
        if not manifest.is_file():
            raise UsageError(f"{self.root} is not a dataset directory (no manifest.json)")
        with open(manifest) as fh:
            self.manifest = json.load(fh)
        self.split = split
        self.num_classes = int(self.manifest["K"])
        self.paths = sorted((self.root / split).glob("*.a2s"))
        self._cache: dict[int, SceneSample] = {}

    def __len__(self) -> int:
        return len(self.paths)

    def __getitem__(self, i: int) -> SceneSample:
        s = self._cache.get(i)
        if s is None:
            s = read_sample(self.paths[i], self.num_classes)
            self._cache[i] = s
        return s

    def __iter__(self):
        return (self[i] for i in range(len(self)))


def dataset_digest(root: str | os.PathLike) -> str:
    """SHA-256 over the manifest and every sample file, in sorted order."""
    root = Path(root)
    h = hashlib.sha256()
    for p in [root / "manifest.json", *sorted(root.glob("*/*.a2s"))]:
        h.update(p.relative_to(root).as_posix().encode())
        h.update(p.read_bytes())
    return h.hexdigest()
