"""Preprocessing, the synthetic two-domain dataset, manifest IO, and the
weak/harsh distribution-shift modulator.

Images live in [-1, 1] as (1, H, W) float tensors; masks as (2, H, W) one-hot
maps with channel 0 = background.  Manifests are delimited text, one record
per line: image path, mask path or "-", domain, split.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path
from typing import Iterator, Optional

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from scipy.ndimage import gaussian_filter

from .codespace import Domain
from .errors import ConfigError, DataError, ShapeError

SUPPORTED_DEPTHS = (8, 10, 12, 16)


class ShiftLevel(Enum):
    """Perturbation severity: scale range r for intensity/contrast, noise std s."""

    NONE = ("none", 0.0, 0.0)
    WEAK = ("weak", 0.30, 0.5)
    HARSH = ("harsh", 0.60, 1.0)

    def __init__(self, label: str, scale_range: float, noise_std: float):
        self.label = label
        self.scale_range = scale_range
        self.noise_std = noise_std

    @classmethod
    def from_str(cls, name: str) -> "ShiftLevel":
        for lvl in cls:
            if lvl.label == name.lower():
                return lvl
        raise ConfigError(f"unknown shift level {name!r}")


def bilinear_resize(x: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    """Resize a (C, H, W) float tensor bilinearly (half-pixel convention)."""
    if x.shape[-2:] == tuple(size):
        return x
    return F.interpolate(x.unsqueeze(0), size=size, mode="bilinear",
                         align_corners=False).squeeze(0)


def nearest_resize(x: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    if x.shape[-2:] == tuple(size):
        return x
    return F.interpolate(x.unsqueeze(0), size=size, mode="nearest").squeeze(0)


def preprocess(raw: np.ndarray, depth: int, size: int | tuple[int, int] = 256) -> torch.Tensor:
    """Resize a 2-D integer raster and map [0, 2^depth - 1] onto [-1, 1].

    No other normalization or augmentation is applied.
    """
    if depth not in SUPPORTED_DEPTHS:
        raise ConfigError(f"unsupported bit depth {depth}; expected one of {SUPPORTED_DEPTHS}")
    arr = np.asarray(raw)
    if arr.ndim != 2 or arr.size == 0:
        raise ShapeError(f"expected a nonempty 2-D array, got shape {arr.shape}")
    if isinstance(size, int):
        size = (size, size)
    x = torch.from_numpy(arr.astype(np.float32)).unsqueeze(0)
    x = bilinear_resize(x, size)
    return x * (2.0 / (2 ** depth - 1)) - 1.0


def render_raster(image: torch.Tensor, depth: int = 8) -> np.ndarray:
    """Inverse of the preprocess intensity map: [-1, 1] back to integer levels."""
    if depth not in SUPPORTED_DEPTHS:
        raise ConfigError(f"unsupported bit depth {depth}")
    levels = 2 ** depth - 1
    arr = ((image.squeeze(0).clamp(-1, 1) + 1.0) * (levels / 2.0)).round()
    dtype = np.uint8 if depth == 8 else np.uint16
    return arr.numpy().astype(dtype)


def apply_shift(image: torch.Tensor, level: ShiftLevel, rng: torch.Generator,
                noise: bool = True, clamp: bool = True) -> torch.Tensor:
    """Modulate contrast/intensity and add Gaussian noise, then clamp to [-1, 1].

    Contrast scales the deviation from the image mean by beta and intensity
    scales the mean by alpha, both uniform in [1 - r, 1 + r]; noise is added
    after modulation in normalized units.  NONE is the identity.  ``noise``
    and ``clamp`` exist so tests can inspect the intermediate stages.
    """
    if level is ShiftLevel.NONE:
        return image
    r = level.scale_range
    alpha, beta = (1 - r) + 2 * r * torch.rand(2, generator=rng, dtype=image.dtype)
    mean = image.mean()
    out = beta * (image - mean) + alpha * mean
    if noise:
        out = out + level.noise_std * torch.randn(image.shape, generator=rng,
                                                  dtype=image.dtype)
    if clamp:
        out = out.clamp(-1.0, 1.0)
    return out


# ---------------------------------------------------------------------------
# manifests


@dataclass(frozen=True)
class ManifestRecord:
    image_path: Path
    mask_path: Optional[Path]
    domain: Domain
    split: str


@dataclass
class DatasetManifest:
    records: list[ManifestRecord]
    depth: int = 8

    def select(self, domain: Optional[Domain] = None,
               split: Optional[str] = None) -> "DatasetManifest":
        recs = [r for r in self.records
                if (domain is None or r.domain is domain)
                and (split is None or r.split == split)]
        return DatasetManifest(recs, self.depth)


def write_manifest(manifest: DatasetManifest, path: Path):
    lines = [f"#depth={manifest.depth}"]
    for r in manifest.records:
        mask = str(r.mask_path) if r.mask_path is not None else "-"
        lines.append(f"{r.image_path}\t{mask}\t{r.domain.value}\t{r.split}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path: Path) -> DatasetManifest:
    path = Path(path)
    if not path.exists():
        raise DataError(f"manifest not found: {path}")
    depth = 8
    records = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        line = line.strip()
        if not line:
            continue
        if line.startswith("#"):
            if line.startswith("#depth="):
                depth = int(line.split("=", 1)[1])
            continue
        parts = line.split("\t")
        if len(parts) != 4:
            raise DataError(f"{path}:{lineno}: expected 4 tab-separated fields")
        img, mask, dom, split = parts
        records.append(ManifestRecord(
            Path(img), None if mask == "-" else Path(mask), Domain(dom), split))
    return DatasetManifest(records, depth)


def _load_raster(path: Path) -> np.ndarray:
    if not path.exists():
        raise DataError(f"missing file: {path}")
    with Image.open(path) as im:
        arr = np.asarray(im)
    if arr.ndim == 3:
        arr = arr[..., 0]
    return arr


def load_record(record: ManifestRecord, depth: int,
                size: int) -> tuple[torch.Tensor, Optional[torch.Tensor]]:
    """One preprocessed (image, one-hot mask or None) pair."""
    try:
        image = preprocess(_load_raster(record.image_path), depth, size)
    except DataError as e:
        raise DataError(f"record {record.image_path.name}: {e}") from e
    mask = None
    if record.mask_path is not None:
        raw = _load_raster(record.mask_path)
        m = torch.from_numpy((raw > 0).astype(np.float32)).unsqueeze(0)
        m = nearest_resize(m, (size, size))
        if m.shape[-2:] != image.shape[-2:]:
            raise DataError(
                f"record {record.image_path.name}: mask and image sizes disagree "
                f"after resize"
            )
        fg = (m > 0.5).float()
        mask = torch.cat([1.0 - fg, fg], dim=0)
    return image, mask


def load_dataset(manifest: DatasetManifest, size: int, seed: int = 0,
                 shuffle: bool = True) -> Iterator[tuple[torch.Tensor, Optional[torch.Tensor]]]:
    """Yield preprocessed pairs in a seed-deterministic shuffled order."""
    order = list(range(len(manifest.records)))
    if shuffle:
        g = torch.Generator().manual_seed(seed)
        order = torch.randperm(len(order), generator=g).tolist()
    for i in order:
        yield load_record(manifest.records[i], manifest.depth, size)


# ---------------------------------------------------------------------------
# training-facing sets: the unlabeled set has no mask field at all


@dataclass
class LabeledSet:
    ids: list[str]
    images: list[torch.Tensor]
    masks: list[torch.Tensor]

    def __len__(self):
        return len(self.images)


@dataclass
class UnlabeledSet:
    ids: list[str]
    images: list[torch.Tensor]

    def __len__(self):
        return len(self.images)


@dataclass
class DataRegistry:
    """Everything the training loop sees: labeled source, unlabeled target,
    plus labeled validation splits used only for scoring."""

    intra_train: LabeledSet
    inter_train: UnlabeledSet
    intra_val: LabeledSet
    inter_val: LabeledSet


def _labeled(manifest: DatasetManifest, size: int) -> LabeledSet:
    ids, images, masks = [], [], []
    for rec in manifest.records:
        img, mask = load_record(rec, manifest.depth, size)
        if mask is None:
            raise DataError(f"record {rec.image_path.name} is missing a mask")
        ids.append(rec.image_path.stem)
        images.append(img)
        masks.append(mask)
    return LabeledSet(ids, images, masks)


def _unlabeled(manifest: DatasetManifest, size: int) -> UnlabeledSet:
    ids, images = [], []
    for rec in manifest.records:
        img, _ = load_record(replace(rec, mask_path=None), manifest.depth, size)
        ids.append(rec.image_path.stem)
        images.append(img)
    return UnlabeledSet(ids, images)


def build_registry(train_manifest: DatasetManifest, eval_manifest: DatasetManifest,
                   size: int) -> DataRegistry:
    """Assemble the training registry from a training-facing manifest and the
    evaluation manifest that carries held-out masks."""
    intra_train = _labeled(train_manifest.select(Domain.INTRA, "train"), size)
    inter_train = _unlabeled(train_manifest.select(Domain.INTER, "train"), size)
    intra_val = _labeled(eval_manifest.select(Domain.INTRA, "val"), size)
    inter_val = _labeled(eval_manifest.select(Domain.INTER, "val"), size)
    if not len(intra_train) or not len(inter_train):
        raise ConfigError("both INTRA and INTER training sets must be nonempty")
    return DataRegistry(intra_train, inter_train, intra_val, inter_val)


# ---------------------------------------------------------------------------
# synthetic two-domain dataset


@dataclass
class SynthSpec:
    """Geometry and corruption parameters of the synthetic desk-scale dataset.

    All intensities are in [0, 1] luminance before 8-bit rendering.  The
    unlabeled domain reuses the labeled geometry but overlays bright occlusion
    blobs covering 10-50% of each lung, adds a global intensity offset and
    heavier per-image noise.
    """

    size: int = 64
    n_intra: tuple[int, int, int] = (24, 6, 8)   # train, val, test
    n_inter: tuple[int, int, int] = (24, 6, 8)
    lung_half_width: tuple[float, float] = (0.15, 0.19)
    lung_half_height: tuple[float, float] = (0.26, 0.33)
    center_x: tuple[float, float] = (0.26, 0.33)  # left lung; right is mirrored
    center_y: tuple[float, float] = (0.46, 0.54)
    tilt: tuple[float, float] = (-0.15, 0.15)
    field_intensity: tuple[float, float] = (0.60, 0.72)
    lung_intensity: tuple[float, float] = (0.18, 0.32)
    edge_softness: float = 1.2
    intra_noise: float = 0.02
    intra_texture: float = 0.02
    blob_count: tuple[int, int] = (1, 1)
    blob_cover: tuple[float, float] = (0.25, 0.50)
    blob_intensity: tuple[float, float] = (0.88, 1.0)
    inter_offset: float = 0.10
    inter_offset_jitter: float = 0.05
    inter_noise: tuple[float, float] = (0.05, 0.25)
    inter_texture: tuple[float, float] = (0.10, 0.30)
    texture_scale: float = 3.5
    seed: int = 0
    retry_cap: int = 50


def _ellipse_mask(size: int, cx: float, cy: float, a: float, b: float,
                  tilt: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    x = (xx - cx) * math.cos(tilt) + (yy - cy) * math.sin(tilt)
    y = -(xx - cx) * math.sin(tilt) + (yy - cy) * math.cos(tilt)
    return (x / a) ** 2 + (y / b) ** 2 <= 1.0


def _u(rng: np.random.Generator, lo_hi: tuple[float, float]) -> float:
    return float(rng.uniform(lo_hi[0], lo_hi[1]))


@dataclass(frozen=True)
class _Ellipse:
    cx: float
    cy: float
    a: float
    b: float
    tilt: float

    def mask(self, size: int) -> np.ndarray:
        return _ellipse_mask(size, self.cx, self.cy, self.a, self.b, self.tilt)


def _make_geometry(spec: SynthSpec, rng: np.random.Generator) -> list[_Ellipse]:
    """Two lung ellipses; retries until both sit fully on the canvas."""
    s = spec.size
    for _ in range(spec.retry_cap):
        lungs = []
        ok = True
        for side in (0, 1):
            cx_frac = _u(rng, spec.center_x)
            cx = (cx_frac if side == 0 else 1.0 - cx_frac) * s
            cy = _u(rng, spec.center_y) * s
            a = _u(rng, spec.lung_half_width) * s
            b = _u(rng, spec.lung_half_height) * s
            tilt = _u(rng, spec.tilt) * (1 if side == 0 else -1)
            if cx - a < 1 or cx + a > s - 1 or cy - b < 1 or cy + b > s - 1:
                ok = False
                break
            lungs.append(_Ellipse(cx, cy, a, b, tilt))
        if ok and not (lungs[0].mask(s) & lungs[1].mask(s)).any():
            return lungs
    raise DataError("could not place lung geometry within the retry cap")


def _blob_overlay(spec: SynthSpec, rng: np.random.Generator,
                  lung: _Ellipse, lung_mask: np.ndarray) -> np.ndarray:
    """Occlusion caps anchored on the lung boundary, spilling outside it.

    Each blob sits on a random boundary point, erasing a contiguous flank of
    the outline (the consolidation analogue); blob area inside the lung over
    lung area is redrawn until it lands in ``blob_cover``.
    """
    s = spec.size
    area = lung_mask.sum()
    target = _u(rng, spec.blob_cover)
    for _ in range(spec.retry_cap):
        count = int(rng.integers(spec.blob_count[0], spec.blob_count[1] + 1))
        blobs = np.zeros_like(lung_mask)
        for _ in range(count):
            phi = float(rng.uniform(0, 2 * math.pi))
            bx = lung.a * math.cos(phi)
            by = lung.b * math.sin(phi)
            t = float(rng.uniform(0.85, 1.25))
            cx = lung.cx + t * (bx * math.cos(lung.tilt) - by * math.sin(lung.tilt))
            cy = lung.cy + t * (bx * math.sin(lung.tilt) + by * math.cos(lung.tilt))
            scale = math.sqrt(target / max(1, count))
            ra = max(2.0, 2.2 * scale * lung.a * float(rng.uniform(0.8, 1.3)))
            rb = max(2.0, 2.2 * scale * lung.b * float(rng.uniform(0.8, 1.3)))
            blobs |= _ellipse_mask(s, cx, cy, ra, rb, float(rng.uniform(-1.5, 1.5)))
        cover = (blobs & lung_mask).sum() / area
        if spec.blob_cover[0] <= cover <= spec.blob_cover[1]:
            return blobs
    raise DataError("could not place occlusion blobs within the retry cap")


def _render_sample(spec: SynthSpec, rng: np.random.Generator,
                   domain: Domain) -> tuple[np.ndarray, np.ndarray]:
    """One (8-bit image, binary mask) pair."""
    lungs = _make_geometry(spec, rng)
    lung_masks = [lung.mask(spec.size) for lung in lungs]
    mask = lung_masks[0] | lung_masks[1]
    img = np.full((spec.size, spec.size), _u(rng, spec.field_intensity))
    for lm in lung_masks:
        img[lm] = _u(rng, spec.lung_intensity)
    if domain is Domain.INTER:
        img = img + spec.inter_offset + float(rng.uniform(0, spec.inter_offset_jitter))
        for lung, lm in zip(lungs, lung_masks):
            blobs = _blob_overlay(spec, rng, lung, lm)
            img[blobs] = _u(rng, spec.blob_intensity)
    img = gaussian_filter(img, spec.edge_softness)
    if domain is Domain.INTER:
        noise_std = _u(rng, spec.inter_noise)
        texture_amp = _u(rng, spec.inter_texture)
    else:
        noise_std = spec.intra_noise
        texture_amp = spec.intra_texture
    texture = gaussian_filter(rng.normal(0.0, 1.0, img.shape), spec.texture_scale)
    texture *= texture_amp / max(texture.std(), 1e-8)
    img = img + texture + rng.normal(0.0, noise_std, img.shape)
    img = np.clip(img, 0.0, 1.0)
    return (img * 255).round().astype(np.uint8), mask


def synthesize_dataset(spec: SynthSpec, out_dir: Path) -> tuple[DatasetManifest, DatasetManifest]:
    """Write the synthetic dataset and return (training-facing, evaluation)
    manifests.

    Every record gets a ground-truth mask on disk, but the training manifest
    lists "-" for unlabeled-domain training records; the evaluation manifest
    carries every mask path.
    """
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "masks").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)

    train_records, eval_records = [], []
    plan = [(Domain.INTRA, spec.n_intra), (Domain.INTER, spec.n_inter)]
    for domain, counts in plan:
        for split, n in zip(("train", "val", "test"), counts):
            for i in range(n):
                img, mask = _render_sample(spec, rng, domain)
                stem = f"{domain.value}_{split}_{i:03d}"
                img_path = out_dir / "images" / f"{stem}.png"
                mask_path = out_dir / "masks" / f"{stem}.png"
                Image.fromarray(img).save(img_path)
                Image.fromarray((mask * 255).astype(np.uint8)).save(mask_path)
                blind = domain is Domain.INTER and split == "train"
                train_records.append(ManifestRecord(
                    img_path, None if blind else mask_path, domain, split))
                eval_records.append(ManifestRecord(img_path, mask_path, domain, split))

    train_manifest = DatasetManifest(train_records, depth=8)
    eval_manifest = DatasetManifest(eval_records, depth=8)
    write_manifest(train_manifest, out_dir / "manifest.txt")
    write_manifest(eval_manifest, out_dir / "manifest_eval.txt")
    return train_manifest, eval_manifest
