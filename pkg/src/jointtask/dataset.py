"""Image/mask datasets, tight boxes and the synthetic desk-scale generator."""
from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

log = logging.getLogger(__name__)

IMAGE_EXTS = (".png",)
MASK_EXTS = (".png", ".pgm")


class DatasetError(RuntimeError):
    pass


@dataclass
class Sample:
    id: str
    image: np.ndarray
    mask: np.ndarray
    tight_box: np.ndarray
    frame: float
    superpixel_ref: str = ""

    @property
    def shape(self):
        return self.mask.shape


def tight_box_pixels(mask: np.ndarray) -> np.ndarray:
    """Minimal axis-aligned pixel box ``(x1, y1, x2, y2)`` around the foreground."""
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if rows.size == 0:
        raise DatasetError("mask has no foreground pixels")
    return np.array([cols[0], rows[0], cols[-1] + 1, rows[-1] + 1], dtype=np.float64)


def tight_box(mask: np.ndarray, frame: float) -> np.ndarray:
    """Tight box mapped into the normalized ``[0, frame]`` coordinate frame."""
    h, w = mask.shape
    return tight_box_pixels(mask) * (frame / np.array([w, h, w, h], dtype=np.float64))


def make_sample(sid: str, image: np.ndarray, mask: np.ndarray, frame: float) -> Sample:
    mask = np.asarray(mask, dtype=bool)
    if image.shape[:2] != mask.shape:
        raise DatasetError(f"{sid}: image {image.shape[:2]} and mask {mask.shape} differ")
    key = hashlib.sha256(np.ascontiguousarray(image).tobytes()).hexdigest()[:16]
    return Sample(sid, image, mask, tight_box(mask, frame), float(frame), key)


def read_image(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def read_mask(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("L")) > 127


def write_image(path, image: np.ndarray):
    Image.fromarray(np.round(np.clip(image, 0, 1) * 255).astype(np.uint8), "RGB").save(path)


def write_mask(path, mask: np.ndarray):
    Image.fromarray(np.where(mask, 255, 0).astype(np.uint8), "L").save(path)


def load_dataset(path, frame: float = 64.0) -> tuple[list[Sample], list[str]]:
    """Load ``images/<id>.png`` + ``masks/<id>.png`` pairs.

    Returns ``(samples, warnings)``; unpaired files are skipped and reported.
    """
    root = Path(path)
    img_dir, mask_dir = root / "images", root / "masks"
    if not img_dir.is_dir() or not mask_dir.is_dir():
        raise DatasetError(f"{root}: expected images/ and masks/ subdirectories")
    images = {p.stem: p for p in sorted(img_dir.iterdir()) if p.suffix.lower() in IMAGE_EXTS}
    masks = {p.stem: p for p in sorted(mask_dir.iterdir()) if p.suffix.lower() in MASK_EXTS}
    warnings = [f"image without mask: {images[k]}" for k in sorted(images.keys() - masks.keys())]
    warnings += [f"mask without image: {masks[k]}" for k in sorted(masks.keys() - images.keys())]
    for w in warnings:
        log.warning(w)
    samples = []
    for sid in sorted(images.keys() & masks.keys()):
        try:
            image, mask = read_image(images[sid]), read_mask(masks[sid])
        except OSError as e:
            raise DatasetError(f"cannot read {images[sid]} / {masks[sid]}: {e}") from e
        if not mask.any():
            raise DatasetError(f"{masks[sid]}: mask has no foreground pixels")
        samples.append(make_sample(sid, image, mask, frame))
    if not samples:
        raise DatasetError(f"{root}: dataset is empty")
    return samples, warnings


def save_dataset(path, samples):
    root = Path(path)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    for s in samples:
        write_image(root / "images" / f"{s.id}.png", s.image)
        write_mask(root / "masks" / f"{s.id}.png", s.mask)


def dataset_hash(path) -> str:
    """sha256 over the relative names and bytes of every image and mask file."""
    root = Path(path)
    h = hashlib.sha256()
    for sub in ("images", "masks"):
        d = root / sub
        if not d.is_dir():
            continue
        for p in sorted(d.iterdir()):
            h.update(f"{sub}/{p.name}\0".encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def split_dataset(samples, n_test: int, seed: int = 0):
    order = np.random.default_rng(seed).permutation(len(samples))
    test = sorted(order[:n_test].tolist())
    train = sorted(order[n_test:].tolist())
    return [samples[i] for i in train], [samples[i] for i in test]


# -- synthetic generator -------------------------------------------------------

SHAPES = ("disk", "rectangle", "triangle")
COLOR_MARGIN = 0.35


@dataclass
class SyntheticSpec:
    size: int = 64
    min_extent: int = 14
    max_extent: int = 40
    distractors: tuple = (3, 7)
    noise: float = 0.03
    texture: float = 0.12
    color_margin: float = COLOR_MARGIN
    shapes: tuple = field(default=SHAPES)


def _shape_mask(kind, h, w, cx, cy, ex, ey, angle):
    yy, xx = np.mgrid[0:h, 0:w] + 0.5
    if kind == "disk":
        return ((xx - cx) / (ex / 2)) ** 2 + ((yy - cy) / (ey / 2)) ** 2 <= 1.0
    if kind == "rectangle":
        return (np.abs(xx - cx) <= ex / 2) & (np.abs(yy - cy) <= ey / 2)
    # triangle: three vertices on an ellipse, rotated by ``angle``
    t = angle + np.array([0, 2 * np.pi / 3, 4 * np.pi / 3])
    vx = cx + ex / 2 * np.cos(t)
    vy = cy + ey / 2 * np.sin(t)
    inside = np.ones((h, w), dtype=bool)
    for i in range(3):
        j = (i + 1) % 3
        cross = (vx[j] - vx[i]) * (yy - vy[i]) - (vy[j] - vy[i]) * (xx - vx[i])
        s = np.sign((vx[j] - vx[i]) * (vy[(i + 2) % 3] - vy[i])
                    - (vy[j] - vy[i]) * (vx[(i + 2) % 3] - vx[i]))
        inside &= cross * s >= 0
    return inside


def _texture(rng, h, w, amount):
    field_ = ndimage.gaussian_filter(rng.standard_normal((h, w, 3)), sigma=(4, 4, 0))
    field_ /= field_.std() + 1e-12
    return amount * field_


def render_sample(rng: np.random.Generator, spec: SyntheticSpec = SyntheticSpec()):
    """Draw one ``(image, mask)`` pair with a single salient shape."""
    h = w = spec.size
    bg = rng.uniform(0.15, 0.85, 3)
    while True:
        fg = rng.uniform(0.0, 1.0, 3)
        if np.linalg.norm(fg - bg) >= spec.color_margin + 0.1:
            break
    image = bg + _texture(rng, h, w, spec.texture)
    n_dis = rng.integers(spec.distractors[0], spec.distractors[1] + 1)
    for _ in range(n_dis):
        col = np.clip(bg + rng.normal(0, 0.25, 3), 0, 1)
        r = rng.uniform(1.5, 4.0)
        kind = SHAPES[rng.integers(2)]
        m = _shape_mask(kind, h, w, rng.uniform(0, w), rng.uniform(0, h), 2 * r, 2 * r, 0.0)
        image[m] = col
    while True:
        kind = spec.shapes[rng.integers(len(spec.shapes))]
        ex, ey = rng.uniform(spec.min_extent, spec.max_extent, 2)
        cx = rng.uniform(ex / 2 + 2, w - ex / 2 - 2)
        cy = rng.uniform(ey / 2 + 2, h - ey / 2 - 2)
        mask = _shape_mask(kind, h, w, cx, cy, ex, ey, rng.uniform(0, 2 * np.pi))
        if mask.sum() >= 20:
            break
    shade = 1.0 + 0.08 * ndimage.gaussian_filter(rng.standard_normal((h, w)), 3)[..., None]
    image[mask] = np.clip(fg * shade, 0, 1)[mask]
    image += rng.normal(0, spec.noise, image.shape)
    return np.clip(image, 0, 1), mask


def gen_synthetic(n: int, seed: int, frame: float = 64.0,
                  spec: SyntheticSpec = SyntheticSpec(), prefix: str = "s") -> list[Sample]:
    if n < 1:
        raise ValueError("n must be >= 1")
    ss = np.random.SeedSequence(seed)
    samples = []
    for i, child in enumerate(ss.spawn(n)):
        image, mask = render_sample(np.random.default_rng(child), spec)
        # quantise exactly as the PNG round trip would
        image = np.round(image * 255) / 255
        samples.append(make_sample(f"{prefix}{i:05d}", image, mask, frame))
    return samples


def write_synthetic(out_dir, n: int, seed: int, n_test: int = 0,
                    spec: SyntheticSpec = SyntheticSpec()) -> dict:
    """Render ``n`` training (and ``n_test`` test) samples to disk.

    With ``n_test > 0`` the output gets ``train/`` and ``test/`` subdirectories
    drawn from independent seed streams.
    """
    out = Path(out_dir)
    if n_test:
        train = gen_synthetic(n, seed, spec=spec, prefix="tr")
        test = gen_synthetic(n_test, seed + 1_000_003, spec=spec, prefix="te")
        save_dataset(out / "train", train)
        save_dataset(out / "test", test)
        return {"train": out / "train", "test": out / "test"}
    save_dataset(out, gen_synthetic(n, seed, spec=spec))
    return {"train": out}
