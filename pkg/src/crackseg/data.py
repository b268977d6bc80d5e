"""Dataset ingestion (images/ + masks/ directory layout), preprocessing,
and a seeded synthetic crack generator for self-contained experiments.

Masks are 8-bit grayscale PNGs holding 0/255; loading binarizes strictly
above 127, so a save/load cycle is bit-exact.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")


@dataclass
class AnnotatedSample:
    id: str
    image: np.ndarray                 # (H, W, 3) float32 in [0, 1]
    mask: np.ndarray | None = None    # (H, W) uint8 in {0, 1}
    provenance: str = "original"      # original | rectified | synthetic


@dataclass
class DatasetManifest:
    root: Path
    pairs: list[tuple[Path, Path | None]] = field(default_factory=list)

    @property
    def count(self) -> int:
        return len(self.pairs)


def scan_dataset(root) -> DatasetManifest:
    """Pair image files with mask files by identical stems."""
    root = Path(root)
    image_dir = root / "images"
    if not image_dir.is_dir():
        raise FileNotFoundError(f"no images/ directory under {root}")
    images = sorted(p for p in image_dir.iterdir()
                    if p.suffix.lower() in IMAGE_SUFFIXES)
    if not images:
        raise ValueError(f"no image files in {image_dir}")
    stems = [p.stem for p in images]
    if len(set(stems)) != len(stems):
        dupes = sorted({s for s in stems if stems.count(s) > 1})
        raise ValueError(f"duplicate image stems: {', '.join(dupes)}")

    mask_dir = root / "masks"
    masks_by_stem = {}
    if mask_dir.is_dir():
        masks_by_stem = {p.stem: p for p in sorted(mask_dir.iterdir())
                         if p.suffix.lower() in IMAGE_SUFFIXES}
    orphans = sorted(set(masks_by_stem) - set(stems))
    if orphans:
        raise ValueError(f"masks without matching images: {', '.join(orphans)}")

    manifest = DatasetManifest(root)
    for img in images:
        manifest.pairs.append((img, masks_by_stem.get(img.stem)))
    return manifest


def _decode_image(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as img:
            rgb = np.asarray(img.convert("RGB"), dtype=np.float32)
    except (UnidentifiedImageError, OSError) as err:
        raise ValueError(f"cannot decode image file {path}: {err}") from None
    return rgb / 255.0


def _decode_mask(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as img:
            gray = np.asarray(img.convert("L"))
    except (UnidentifiedImageError, OSError) as err:
        raise ValueError(f"cannot decode mask file {path}: {err}") from None
    return (gray > 127).astype(np.uint8)


def load_dataset(root) -> list[AnnotatedSample]:
    """Load image/mask pairs sorted by id; images without masks are legal."""
    manifest = scan_dataset(root)
    samples = []
    for img_path, mask_path in manifest.pairs:
        image = _decode_image(img_path)
        mask = None
        if mask_path is not None:
            mask = _decode_mask(mask_path)
            if mask.shape != image.shape[:2]:
                raise ValueError(
                    f"mask extents {mask.shape} do not match image extents "
                    f"{image.shape[:2]} for {img_path.stem!r}")
        samples.append(AnnotatedSample(img_path.stem, image, mask))
    return samples


def save_dataset(samples, root) -> None:
    """Write the images/ + masks/ layout (8-bit PNG, masks 0/255)."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    has_masks = any(s.mask is not None for s in samples)
    if has_masks:
        (root / "masks").mkdir(exist_ok=True)
    for s in samples:
        rgb = np.clip(np.rint(s.image * 255.0), 0, 255).astype(np.uint8)
        Image.fromarray(rgb, mode="RGB").save(root / "images" / f"{s.id}.png")
        if s.mask is not None:
            Image.fromarray((s.mask * 255).astype(np.uint8), mode="L").save(
                root / "masks" / f"{s.id}.png")


# ---------------------------------------------------------------------------
# resizing


def _bilinear(plane: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Half-pixel-center bilinear sampling with clamped edges."""
    h, w = plane.shape[:2]
    ys = np.clip((np.arange(out_h) + 0.5) * h / out_h - 0.5, 0, h - 1)
    xs = np.clip((np.arange(out_w) + 0.5) * w / out_w - 0.5, 0, w - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[:, None]
    wx = (xs - x0)[None, :]
    if plane.ndim == 3:
        wy = wy[..., None]
        wx = wx[..., None]
    top = plane[np.ix_(y0, x0)] * (1 - wx) + plane[np.ix_(y0, x1)] * wx
    bottom = plane[np.ix_(y1, x0)] * (1 - wx) + plane[np.ix_(y1, x1)] * wx
    return (top * (1 - wy) + bottom * wy).astype(plane.dtype)


def _nearest(plane: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    h, w = plane.shape
    ys = np.minimum(((np.arange(out_h) + 0.5) * h / out_h).astype(int), h - 1)
    xs = np.minimum(((np.arange(out_w) + 0.5) * w / out_w).astype(int), w - 1)
    return plane[np.ix_(ys, xs)]


def resize_bilinear(sample: AnnotatedSample, side: int) -> AnnotatedSample:
    """Square resize: image bilinear, mask nearest-neighbor (stays binary)."""
    if side < 8:
        raise ValueError(f"target side must be >= 8, got {side}")
    image = _bilinear(sample.image, side, side)
    mask = _nearest(sample.mask, side, side) if sample.mask is not None else None
    return AnnotatedSample(sample.id, image, mask, sample.provenance)


# ---------------------------------------------------------------------------
# synthetic cracks


def _draw_polyline(mask: np.ndarray, rng: np.random.Generator, side: int) -> None:
    width = int(rng.choice([1, 2, 3], p=[0.5, 0.35, 0.15]))
    length = int(rng.uniform(0.35, 0.85) * side)
    margin = max(2, side // 16)
    y = float(rng.uniform(margin, side - margin))
    x = float(rng.uniform(margin, side - margin))
    heading = float(rng.uniform(0, 2 * np.pi))
    lo = (width - 1) // 2
    hi = width // 2
    for _ in range(max(length, 4)):
        yi = int(round(y))
        xi = int(round(x))
        mask[max(0, yi - lo):min(side, yi + hi + 1),
             max(0, xi - lo):min(side, xi + hi + 1)] = 1
        heading += float(rng.normal(0.0, 0.18))
        y = float(np.clip(y + np.sin(heading), 0, side - 1))
        x = float(np.clip(x + np.cos(heading), 0, side - 1))


def generate_synthetic(n: int, side: int, seed: int) -> list[AnnotatedSample]:
    """Gray pavement-like images with 1-3 dark random-walk cracks.

    Fully deterministic per (seed, index): background 0.55 + N(0, 0.05)
    noise, crack pixels darkened to ~0.15, mask = the exact crack raster.
    """
    if n < 1:
        raise ValueError(f"need n >= 1, got {n}")
    if side not in (32, 64, 128, 256):
        raise ValueError(f"side must be one of 32/64/128/256, got {side}")
    samples = []
    for index in range(n):
        rng = np.random.default_rng(np.random.SeedSequence((seed, index)))
        background = 0.55 + 0.05 * rng.standard_normal((side, side))
        mask = np.zeros((side, side), np.uint8)
        for _ in range(int(rng.integers(1, 4))):
            _draw_polyline(mask, rng, side)
        crack_level = 0.15 + 0.04 * rng.standard_normal((side, side))
        gray = np.where(mask == 1, crack_level, background)
        image = np.clip(gray, 0.0, 1.0).astype(np.float32)[..., None].repeat(3, axis=2)
        samples.append(AnnotatedSample(f"synth_{index:04d}", image, mask, "synthetic"))
    return samples
