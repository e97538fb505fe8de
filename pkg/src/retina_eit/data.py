"""Dataset ingestion, preprocessing/augmentation and the synthetic fundus generator."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from ._kernels import bilinear_sample, clahe_luminance, stamp_discs
from .errors import ConfigError, ValidationError

N_CLASSES = 5


@dataclass
class ImageSample:
    id: str
    pixels: np.ndarray
    label: int


@dataclass
class Dataset:
    """Images stored as one ``(N, side, side, 3)`` uint8 array."""

    ids: list[str]
    images: np.ndarray
    labels: np.ndarray
    masks: np.ndarray | None = None

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if not (len(self.ids) == len(self.images) == len(self.labels)):
            raise ValidationError("ids, images and labels differ in length")
        if len(set(self.ids)) != len(self.ids):
            raise ValidationError("duplicate sample ids")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= N_CLASSES):
            raise ValidationError("labels must lie in 0..4")

    def __len__(self) -> int:
        return len(self.ids)

    def __getitem__(self, i: int) -> ImageSample:
        return ImageSample(self.ids[i], self.images[i], int(self.labels[i]))

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=N_CLASSES)

    def index_of(self, ids) -> np.ndarray:
        lookup = {s: i for i, s in enumerate(self.ids)}
        return np.array([lookup[s] for s in ids], dtype=np.int64)

    def subset(self, ids) -> "Dataset":
        idx = self.index_of(ids)
        masks = None if self.masks is None else self.masks[idx]
        return Dataset([self.ids[i] for i in idx], self.images[idx], self.labels[idx], masks)


# -- geometry ------------------------------------------------------------------

def resize(image: np.ndarray, out_h: int, out_w: int | None = None) -> np.ndarray:
    """Bilinear resize with pixel-centre alignment; keeps the input dtype."""
    out_w = out_h if out_w is None else out_w
    h, w = image.shape[:2]
    ys = (np.arange(out_h) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    img3 = image if image.ndim == 3 else image[..., None]
    out = bilinear_sample(img3, yy, xx, clamp=True)
    out = out if image.ndim == 3 else out[..., 0]
    return _restore_dtype(out, image.dtype)


def _restore_dtype(x: np.ndarray, dtype) -> np.ndarray:
    if np.issubdtype(dtype, np.integer):
        return np.clip(np.floor(x + 0.5), 0, 255).astype(dtype)
    return x.astype(dtype)


def rotate(image: np.ndarray, degrees: float) -> np.ndarray:
    """Rotate counter-clockwise about the centre; exposed corners are black."""
    h, w = image.shape[:2]
    th = math.radians(degrees)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    dy, dx = yy - cy, xx - cx
    # inverse map: output pixel -> source location
    src_x = math.cos(th) * dx - math.sin(th) * dy + cx
    src_y = math.sin(th) * dx + math.cos(th) * dy + cy
    out = bilinear_sample(image, src_y, src_x, clamp=False, fill=0.0)
    return _restore_dtype(out, image.dtype)


def center_crop(image: np.ndarray, fraction: float = 0.5) -> np.ndarray:
    """Keep the central ``fraction`` of each side and resize back."""
    h, w = image.shape[:2]
    ch, cw = max(1, int(round(h * fraction))), max(1, int(round(w * fraction)))
    top, left = (h - ch) // 2, (w - cw) // 2
    return resize(image[top:top + ch, left:left + cw], h, w)


def adjust_brightness(image: np.ndarray, delta: float) -> np.ndarray:
    """Add ``delta`` x 255 to every channel, clamped to [0, 255]."""
    out = image.astype(np.float64) + delta * 255.0
    return _restore_dtype(np.clip(out, 0, 255), image.dtype)


def adjust_contrast(image: np.ndarray, factor: float) -> np.ndarray:
    """Scale deviations from the per-channel mean by ``factor``."""
    x = image.astype(np.float64)
    m = x.mean(axis=(0, 1), keepdims=True)
    return _restore_dtype(np.clip((x - m) * factor + m, 0, 255), image.dtype)


AUGMENT_OPS = ("crop", "hflip", "vflip", "rotate", "brightness", "contrast")


@dataclass(frozen=True)
class AugmentConfig:
    p: float = 0.5
    crop_fraction: float = 0.5
    max_rotation: float = 45.0
    max_brightness: float = 0.95
    contrast_range: tuple[float, float] = (0.1, 0.9)
    ops: tuple[str, ...] = AUGMENT_OPS

    def __post_init__(self):
        unknown = set(self.ops) - set(AUGMENT_OPS)
        if unknown:
            raise ConfigError(f"unknown augmentation(s): {sorted(unknown)}")


def augment(image: np.ndarray, rng, config: AugmentConfig = AugmentConfig()) -> np.ndarray:
    """Random training augmentation applied in a fixed order.

    Each of crop, horizontal flip, vertical flip, rotation, brightness and
    contrast fires independently with probability ``config.p``; ops missing
    from ``config.ops`` never fire. ``rng`` needs ``random()`` and
    ``uniform(lo, hi)``.
    """
    out = image
    if rng.random() < config.p and "crop" in config.ops:
        out = center_crop(out, config.crop_fraction)
    if rng.random() < config.p and "hflip" in config.ops:
        out = out[:, ::-1]
    if rng.random() < config.p and "vflip" in config.ops:
        out = out[::-1]
    if rng.random() < config.p and "rotate" in config.ops:
        out = rotate(out, rng.uniform(0.0, config.max_rotation))
    if rng.random() < config.p and "brightness" in config.ops:
        out = adjust_brightness(out, rng.uniform(-config.max_brightness, config.max_brightness))
    if rng.random() < config.p and "contrast" in config.ops:
        out = adjust_contrast(out, rng.uniform(*config.contrast_range))
    return np.ascontiguousarray(out)


# -- CLAHE ---------------------------------------------------------------------

def _rgb_to_ycbcr(x: np.ndarray) -> np.ndarray:
    r, g, b = x[..., 0], x[..., 1], x[..., 2]
    y = 0.299 * r + 0.587 * g + 0.114 * b
    cb = 128.0 - 0.168736 * r - 0.331264 * g + 0.5 * b
    cr = 128.0 + 0.5 * r - 0.418688 * g - 0.081312 * b
    return np.stack([y, cb, cr], axis=-1)


def _ycbcr_to_rgb(x: np.ndarray) -> np.ndarray:
    y, cb, cr = x[..., 0], x[..., 1] - 128.0, x[..., 2] - 128.0
    r = y + 1.402 * cr
    g = y - 0.344136 * cb - 0.714136 * cr
    b = y + 1.772 * cb
    return np.stack([r, g, b], axis=-1)


def clahe(image: np.ndarray, tiles: int | tuple[int, int] = 8, clip_limit: float = 2.0) -> np.ndarray:
    """Contrast-limited adaptive histogram equalisation of the luminance channel.

    Histograms are clipped at ``clip_limit`` times the mean bin count and
    the excess is spread over all bins; per-pixel values interpolate
    bilinearly between the mappings of the four nearest tile centres.
    """
    grid = (tiles, tiles) if isinstance(tiles, int) else tuple(tiles)
    h, w = image.shape[:2]
    if grid[0] < 1 or grid[1] < 1 or grid[0] > h or grid[1] > w:
        raise ConfigError(f"tile grid {grid} does not fit a {h}x{w} image")
    ycc = _rgb_to_ycbcr(image.astype(np.float64))
    lum = np.clip(np.floor(ycc[..., 0] + 0.5), 0, 255).astype(np.int64)
    ycc[..., 0] = clahe_luminance(lum, grid, clip_limit)
    return np.clip(np.floor(_ycbcr_to_rgb(ycc) + 0.5), 0, 255).astype(np.uint8)


def clahe_subset(ids, seed: int, fraction: float = 0.3) -> list[str]:
    """Deterministic ``fraction`` of ``ids`` (sorted) selected by ``seed``."""
    ids = sorted(ids)
    k = int(math.floor(fraction * len(ids) + 0.5))
    rng = np.random.default_rng([seed, 0xC1A4E])
    pick = np.sort(rng.choice(len(ids), size=k, replace=False))
    return [ids[i] for i in pick]


# -- splitting -----------------------------------------------------------------

@dataclass
class SplitManifest:
    train: list[str]
    val: list[str]
    test: list[str]
    seed: int

    def to_json(self) -> str:
        return json.dumps({"seed": self.seed, "train": self.train, "val": self.val, "test": self.test}, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "SplitManifest":
        d = json.loads(text)
        return cls(list(d["train"]), list(d["val"]), list(d["test"]), int(d["seed"]))

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "SplitManifest":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


def _half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def stratified_split(dataset: Dataset, seed: int, test_fraction: float = 0.3,
                     val_fraction: float = 0.1, min_per_class: int = 10) -> SplitManifest:
    """Per-class 7:3 train/test split, then 10% of each class's train part to validation."""
    counts = dataset.class_counts()
    for c, n in enumerate(counts):
        if 0 < n < min_per_class:
            raise ConfigError(f"class {c} has {n} samples; need at least {min_per_class}")
    rng = np.random.default_rng(seed)
    train, val, test = [], [], []
    for c in range(N_CLASSES):
        members = sorted(dataset.ids[i] for i in np.flatnonzero(dataset.labels == c))
        if not members:
            continue
        order = [members[i] for i in rng.permutation(len(members))]
        n_test = _half_up(test_fraction * len(members))
        n_val = _half_up(val_fraction * (len(members) - n_test))
        test += order[:n_test]
        val += order[n_test:n_test + n_val]
        train += order[n_test + n_val:]
    return SplitManifest(sorted(train), sorted(val), sorted(test), seed)


# -- disk I/O ------------------------------------------------------------------

def ingest(manifest_csv, image_dir, side: int = 256) -> Dataset:
    """Read an ``id_code,diagnosis`` CSV and decode/resize the matching images."""
    image_dir = Path(image_dir)
    ids, labels, images = [], [], []
    with open(manifest_csv, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"id_code", "diagnosis"} <= set(reader.fieldnames):
            raise ValidationError(f"{manifest_csv}: header must contain id_code,diagnosis")
        for row_no, row in enumerate(reader, start=2):
            try:
                label = int(row["diagnosis"])
            except ValueError:
                raise ValidationError(f"row {row_no}: diagnosis '{row['diagnosis']}' is not an integer") from None
            if not 0 <= label < N_CLASSES:
                raise ValidationError(f"row {row_no}: diagnosis {label} outside 0..4")
            path = _find_image(image_dir, row["id_code"])
            if path is None:
                raise FileNotFoundError(f"row {row_no}: no image for id '{row['id_code']}' in {image_dir}")
            with Image.open(path) as im:
                px = np.asarray(im.convert("RGB"))
            if px.shape[:2] != (side, side):
                px = resize(px, side, side)
            ids.append(row["id_code"])
            labels.append(label)
            images.append(px)
    arr = np.stack(images) if images else np.zeros((0, side, side, 3), np.uint8)
    return Dataset(ids, arr, np.array(labels, dtype=np.int64))


def _find_image(image_dir: Path, id_code: str) -> Path | None:
    for ext in (".png", ".jpg", ".jpeg"):
        p = image_dir / f"{id_code}{ext}"
        if p.exists():
            return p
    return None


def save_dataset(dataset: Dataset, out_dir) -> Path:
    """Write ``labels.csv`` plus ``images/<id>.png`` (and ``masks/`` if present)."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    with open(out / "labels.csv", "w", newline="", encoding="utf-8") as fh:
        fh.write("id_code,diagnosis\n")
        for sid, label in zip(dataset.ids, dataset.labels):
            fh.write(f"{sid},{int(label)}\n")
    for sid, px in zip(dataset.ids, dataset.images):
        Image.fromarray(px).save(out / "images" / f"{sid}.png")
    if dataset.masks is not None:
        (out / "masks").mkdir(exist_ok=True)
        for sid, m in zip(dataset.ids, dataset.masks):
            Image.fromarray((m > 0).astype(np.uint8) * 255).save(out / "masks" / f"{sid}.png")
    return out


def load_dataset(data_dir, side: int | None = None) -> Dataset:
    data_dir = Path(data_dir)
    images_dir = data_dir / "images"
    if side is None:
        with open(data_dir / "labels.csv", encoding="utf-8") as fh:
            fh.readline()
            first = fh.readline().split(",")[0]
        path = _find_image(images_dir, first)
        if path is None:
            raise FileNotFoundError(f"no image for id '{first}' in {images_dir}")
        with Image.open(path) as im:
            side = im.size[0]
    ds = ingest(data_dir / "labels.csv", images_dir, side)
    mask_dir = data_dir / "masks"
    if mask_dir.is_dir():
        masks = []
        for sid in ds.ids:
            with Image.open(mask_dir / f"{sid}.png") as im:
                masks.append(np.asarray(im) > 0)
        ds.masks = np.stack(masks)
    return ds


# -- synthetic fundus images -----------------------------------------------------

FIELD_COLOR = np.array([150.0, 60.0, 25.0])
DISC_COLOR = np.array([240.0, 170.0, 120.0])
VESSEL_COLOR = np.array([95.0, 20.0, 10.0])
LESION_COLOR = np.array([250.0, 235.0, 90.0])


def lesion_count_range(label: int) -> tuple[int, int]:
    if label == 0:
        return 0, 0
    return 3 * label - 1, 3 * label + 1


def lesion_radius(label: int) -> float:
    return 1.2 + 0.35 * label


def _render(label: int, rng: np.random.Generator, side: int) -> tuple[np.ndarray, np.ndarray, int]:
    yy, xx = np.meshgrid(np.arange(side) + 0.5, np.arange(side) + 0.5, indexing="ij")
    c = side / 2.0
    radius = 0.46 * side
    inside = (yy - c) ** 2 + (xx - c) ** 2 <= radius ** 2
    shade = 1.0 - 0.35 * np.sqrt((yy - c) ** 2 + (xx - c) ** 2) / radius
    img = np.zeros((side, side, 3))
    img[inside] = (FIELD_COLOR[None, :] * shade[inside][:, None])

    side_sign = rng.choice([-1.0, 1.0])
    disc_y = c + rng.uniform(-0.08, 0.08) * side
    disc_x = c + side_sign * 0.25 * side
    disc_r = 0.07 * side
    for k in range(4):
        a0 = rng.uniform(0, 2 * np.pi)
        curve = rng.uniform(0.25, 0.6) * side
        t = np.linspace(0, 1.0, 4 * side)
        ang = a0 + 0.9 * t * rng.choice([-1.0, 1.0])
        py = disc_y + curve * t * np.sin(ang)
        px = disc_x + curve * t * np.cos(ang) * -side_sign
        near = stamp_discs(side, side, py, px, 0.012 * side + 0.4)
        img[near & inside] = VESSEL_COLOR
    disc = (yy - disc_y) ** 2 + (xx - disc_x) ** 2 <= disc_r ** 2
    img[disc] = DISC_COLOR

    mask = np.zeros((side, side), dtype=bool)
    lo, hi = lesion_count_range(label)
    n = int(rng.integers(lo, hi + 1)) if hi > 0 else 0
    r = lesion_radius(label) * side / 64.0
    placed = 0
    tries = 0
    while placed < n and tries < 1000:
        tries += 1
        ang = rng.uniform(0, 2 * np.pi)
        dist = np.sqrt(rng.uniform(0, 1)) * (radius - 2 * r - 1)
        ly, lx = c + dist * np.sin(ang), c + dist * np.cos(ang)
        if (ly - disc_y) ** 2 + (lx - disc_x) ** 2 < (disc_r + 2 * r + 1) ** 2:
            continue
        blob = (yy - ly) ** 2 + (xx - lx) ** 2 <= r ** 2
        if (blob & mask).any():
            continue
        mask |= blob
        placed += 1
    img[mask] = LESION_COLOR
    return np.clip(np.floor(img + 0.5), 0, 255).astype(np.uint8), mask, placed


def synth_generate(n_per_class: int, seed: int, side: int = 64) -> Dataset:
    """Render fundus-like images with a known number of lesion blobs per class.

    Class ``k`` carries ``3k - 1 .. 3k + 1`` bright lesion blobs (none for
    class 0) whose radius grows with ``k``. Lesion masks are returned in
    ``Dataset.masks``.
    """
    ids, images, labels, masks = [], [], [], []
    for label in range(N_CLASSES):
        for i in range(n_per_class):
            rng = np.random.default_rng([seed, label, i])
            px, m, _ = _render(label, rng, side)
            ids.append(f"syn{seed}_{label}_{i:04d}")
            images.append(px)
            labels.append(label)
            masks.append(m)
    return Dataset(ids, np.stack(images), np.array(labels), np.stack(masks))


def count_lesion_pixels(image: np.ndarray) -> int:
    """Threshold detector: pixels that look like bright yellow lesions."""
    x = image.astype(np.int64)
    return int(((x[..., 0] > 200) & (x[..., 1] > 200) & (x[..., 2] < 160)).sum())
