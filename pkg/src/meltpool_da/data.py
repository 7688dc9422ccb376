"""Image ingestion, preparation, sensor-aware augmentation, and batching."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import cv2
import numpy as np
from PIL import Image
from scipy.ndimage import median_filter

from .errors import ContractError, DataError, IngestionError

IMAGE_SIZE = 80
CLASS_DIRS = (("normal", 0), ("abnormal", 1))


@dataclass
class DomainDataset:
    """A set of 80x80 grayscale images in [0,1] tagged with domain and split.

    labels is None for the unlabeled target training set; otherwise an int
    array with 0 = normal, 1 = abnormal.
    """

    domain: str                      # source | target
    split: str                       # train | validation | test
    images: np.ndarray               # [N, 80, 80] float32
    labels: np.ndarray | None = None
    ids: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if len(self.labels) != len(self.images):
                raise ContractError("labels/images length mismatch")
        if not self.ids:
            self.ids = [f"{self.domain}-{self.split}-{i}" for i in range(len(self.images))]

    def __len__(self):
        return len(self.images)

    @property
    def labeled(self) -> bool:
        return self.labels is not None

    def validate(self) -> None:
        if self.images.ndim != 3 or self.images.shape[1:] != (IMAGE_SIZE, IMAGE_SIZE):
            raise ContractError(f"dataset images must be [N,80,80], got {self.images.shape}")
        if self.images.min() < 0 or self.images.max() > 1:
            raise ContractError("dataset pixel values must lie in [0,1]")

    def subset(self, idx) -> "DomainDataset":
        return DomainDataset(
            self.domain, self.split, self.images[idx],
            None if self.labels is None else self.labels[idx],
            [self.ids[i] for i in np.atleast_1d(idx)])


@dataclass
class AugmentationConfig:
    """Sensor-aware augmentation settings."""

    pixel_size_source: float = 8.0       # um/pixel
    pixel_size_target: float = 25.0
    zoom_factor: float = 0.0625          # half-width of the zoom interval
    zoom_override: tuple[float, float] | None = (0.3, 0.35)
    blur_prob: float = 0.5
    blur_sigma: tuple[float, float] = (0.5, 1.5)
    dihedral: bool = True
    copies: int = 10
    include_originals: bool = False
    seed: int = 0

    def __post_init__(self):
        if not (0 <= self.zoom_factor < 1):
            raise ContractError("zoom_factor must satisfy 0 <= f < 1")
        if self.pixel_size_source <= 0 or self.pixel_size_target <= 0:
            raise ContractError("pixel sizes must be positive")
        if self.copies < 1:
            raise ContractError("copies must be >= 1")

    def zoom_bounds(self) -> tuple[float, float]:
        if self.zoom_override is not None:
            return self.zoom_override
        return zoom_range(self.pixel_size_source, self.pixel_size_target, self.zoom_factor)


# --- ingestion ----------------------------------------------------------

def _read_gray(path: Path) -> np.ndarray:
    try:
        img = Image.open(path)
        img.load()
    except Exception as exc:
        raise IngestionError(f"cannot read image {path}: {exc}") from exc
    if img.mode != "L":
        raise IngestionError(f"{path}: grayscale required (8-bit), got mode {img.mode!r}")
    return np.asarray(img, dtype=np.float32) / 255.0


def load_image_dir(root, domain: str, split: str) -> DomainDataset:
    """Load `<root>/<split>/<class-or-unlabeled>/*.{pgm,png}`.

    Labeled class directories are read in label order (normal then
    abnormal), files lexicographically within each.
    """
    base = Path(root) / split
    if not base.is_dir():
        raise IngestionError(f"split directory not found: {base}")
    images, labels, ids = [], [], []
    unlabeled_dir = base / "unlabeled"
    if unlabeled_dir.is_dir():
        for p in sorted(unlabeled_dir.iterdir()):
            if p.suffix.lower() in (".pgm", ".png"):
                images.append(_read_gray(p))
                ids.append(p.name)
        return DomainDataset(domain, split, np.stack(images), None, ids)
    for cls, label in CLASS_DIRS:
        cdir = base / cls
        if not cdir.is_dir():
            continue
        files = [p for p in sorted(cdir.iterdir()) if p.suffix.lower() in (".pgm", ".png")]
        if not files:
            import warnings
            warnings.warn(f"empty class directory {cdir}")
        for p in files:
            images.append(_read_gray(p))
            labels.append(label)
            ids.append(f"{cls}/{p.name}")
    if not images:
        raise IngestionError(f"no images found under {base}")
    return DomainDataset(domain, split, np.stack(images), np.array(labels), ids)


def write_image_dir(ds: DomainDataset, root, fmt: str = "pgm") -> None:
    """Write a dataset as the `<split>/<class>/*.pgm` tree load_image_dir reads."""
    base = Path(root) / ds.split
    names = {0: "normal", 1: "abnormal"}
    for i in range(len(ds)):
        sub = "unlabeled" if ds.labels is None else names[int(ds.labels[i])]
        d = base / sub
        d.mkdir(parents=True, exist_ok=True)
        arr = np.clip(ds.images[i] * 255.0 + 0.5, 0, 255).astype(np.uint8)
        Image.fromarray(arr, mode="L").save(d / f"{i:05d}.{fmt}")


# --- preparation --------------------------------------------------------

def prepare(images: np.ndarray, target_size: int = IMAGE_SIZE,
            denoise: str = "none") -> np.ndarray:
    """Denoise then bilinearly resize square images to target_size.

    denoise: "none", "median3" (3x3 median), or "threshold(t)" (values
    below t zeroed).
    """
    images = np.asarray(images, dtype=np.float32)
    single = images.ndim == 2
    if single:
        images = images[None]
    out = np.empty((len(images), target_size, target_size), dtype=np.float32)
    for i, img in enumerate(images):
        if img.ndim != 2 or img.shape[0] != img.shape[1]:
            raise DataError(f"prepare expects square images, got {img.shape}")
        if denoise == "median3":
            img = median_filter(img, size=3)
        elif denoise.startswith("threshold(") and denoise.endswith(")"):
            t = float(denoise[len("threshold("):-1])
            img = np.where(img < t, 0.0, img).astype(np.float32)
        elif denoise != "none":
            raise ContractError(f"unknown denoise method {denoise!r}")
        if img.shape[0] == target_size:
            out[i] = img
        else:
            out[i] = cv2.resize(img, (target_size, target_size), interpolation=cv2.INTER_LINEAR)
    out = np.clip(out, 0.0, 1.0)
    return out[0] if single else out


# --- augmentation primitives --------------------------------------------

def zoom_range(s_source: float, s_target: float, f_zoom: float) -> tuple[float, float]:
    """Zooming-ratio interval from the two sensors' pixel sizes:
    [(1-f)*(s_src/s_tgt), (1+f)*(s_src/s_tgt)]."""
    if s_source <= 0 or s_target <= 0:
        raise ContractError("pixel sizes must be positive")
    if not (0 <= f_zoom < 1):
        raise ContractError("zoom factor must satisfy 0 <= f < 1")
    ratio = s_source / s_target
    return ((1 - f_zoom) * ratio, (1 + f_zoom) * ratio)


def augment_zoom(image: np.ndarray, r_zoom: float) -> np.ndarray:
    """Zoom out: shrink content to round(80*R) per side, center it on black.

    The odd leftover pixel of the padding goes to the right/bottom.
    """
    if r_zoom <= 0:
        raise ContractError("zoom ratio must be > 0")
    if r_zoom > 1:
        raise ContractError("zoom ratio > 1 (zoom-in) is not label-safe and unsupported")
    size = image.shape[0]
    s = int(round(size * r_zoom))
    if s == size:
        return image.copy()
    small = cv2.resize(image, (s, s), interpolation=cv2.INTER_LINEAR)
    out = np.zeros_like(image)
    lo = (size - s) // 2
    out[lo:lo + s, lo:lo + s] = small
    return out


def _gauss_kernel(sigma: float) -> np.ndarray:
    r = int(math.ceil(3 * sigma))
    xs = np.arange(-r, r + 1, dtype=np.float64)
    k = np.exp(-0.5 * (xs / sigma) ** 2)
    return (k / k.sum()).astype(np.float32)


def augment_blur(image: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur with reflected boundary, radius ceil(3*sigma)."""
    if sigma <= 0:
        return image.copy()
    k = _gauss_kernel(sigma)
    out = cv2.sepFilter2D(image.astype(np.float32), -1, k, k,
                          borderType=cv2.BORDER_REFLECT_101)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def augment_dihedral(image: np.ndarray, element: int) -> np.ndarray:
    """One of the 8 exact symmetries of the square: element = flip*4 + quarter-turns."""
    if not (0 <= element < 8):
        raise ContractError("dihedral element must be in 0..7")
    img = np.fliplr(image) if element >= 4 else image
    return np.ascontiguousarray(np.rot90(img, k=element % 4))


def augment_dataset(dataset: DomainDataset, config: AugmentationConfig) -> DomainDataset:
    """Emit copies x |dataset| label-preserving augmented examples.

    Each output example draws from its own seeded substream
    (seed, output-index) so results are order- and parallelism-independent.
    """
    dataset.validate()
    lo, hi = config.zoom_bounds()
    images, labels, ids = [], [], []
    if config.include_originals:
        images.extend(dataset.images)
        if dataset.labels is not None:
            labels.extend(dataset.labels)
        ids.extend(dataset.ids)
    n = len(dataset)
    for out_idx in range(config.copies * n):
        i = out_idx % n
        rng = np.random.default_rng([config.seed, out_idx])
        img = dataset.images[i]
        img = augment_zoom(img, float(rng.uniform(lo, hi)))
        if config.dihedral:
            img = augment_dihedral(img, int(rng.integers(8)))
        if rng.random() < config.blur_prob:
            img = augment_blur(img, float(rng.uniform(*config.blur_sigma)))
        images.append(img)
        if dataset.labels is not None:
            labels.append(dataset.labels[i])
        ids.append(f"{dataset.ids[i]}#aug{out_idx}")
    return DomainDataset(dataset.domain, dataset.split, np.stack(images),
                         np.array(labels) if dataset.labels is not None else None, ids)


def balance_downsample(dataset: DomainDataset, seed: int = 0) -> DomainDataset:
    """Randomly subsample the majority class to the minority-class count."""
    if dataset.labels is None:
        raise ContractError("balance_downsample needs a labeled dataset")
    counts = {c: int(np.sum(dataset.labels == c)) for c in (0, 1)}
    if min(counts.values()) == 0:
        raise DataError(f"cannot balance: class counts {counts} include an empty class")
    if counts[0] == counts[1]:
        return dataset.subset(np.arange(len(dataset)))
    minority = min(counts, key=counts.get)
    majority = 1 - minority
    rng = np.random.default_rng(seed)
    maj_idx = np.flatnonzero(dataset.labels == majority)
    keep = np.sort(rng.choice(maj_idx, size=counts[minority], replace=False))
    idx = np.sort(np.concatenate([np.flatnonzero(dataset.labels == minority), keep]))
    return dataset.subset(idx)


# --- batching -----------------------------------------------------------

def iter_batches(dataset: DomainDataset, batch_size: int, rng: np.random.Generator):
    """Seeded shuffle, then batches of indices; a trailing batch < 2 is dropped."""
    if batch_size < 2:
        raise ContractError("batch_size must be >= 2 (batchnorm constraint)")
    if len(dataset) == 0:
        raise ContractError("cannot batch an empty dataset")
    order = rng.permutation(len(dataset))
    for start in range(0, len(order), batch_size):
        batch = order[start:start + batch_size]
        if len(batch) >= 2:
            yield batch


def iter_paired_batches(source: DomainDataset, target: DomainDataset,
                        batch_size: int, rng: np.random.Generator):
    """Paired batches (source_idx, target_idx) of equal size; the target
    stream cycles with a fresh shuffle whenever it wraps."""
    if len(target) == 0:
        raise ContractError("cannot batch an empty target dataset")
    tgt_order = rng.permutation(len(target))
    pos = 0

    def take(n):
        nonlocal tgt_order, pos
        out = []
        while len(out) < n:
            if pos >= len(tgt_order):
                tgt_order = rng.permutation(len(target))
                pos = 0
            out.append(tgt_order[pos])
            pos += 1
        return np.array(out)

    for src_batch in iter_batches(source, batch_size, rng):
        yield src_batch, take(len(src_batch))


# --- binary dataset container --------------------------------------------
#
# magic "MPDS" | u32 version | u8 domain-len + domain | u8 split-len + split
# | u32 count | u8 labeled | images (count * 80*80 f4 LE)
# | labels (count * u8, if labeled) | ids (u16 len + bytes, each)

DATASET_MAGIC = b"MPDS"
DATASET_VERSION = 1


def save_dataset(ds: DomainDataset, path) -> None:
    ds.validate()
    with open(path, "wb") as f:
        f.write(DATASET_MAGIC)
        f.write(struct.pack("<I", DATASET_VERSION))
        for s in (ds.domain, ds.split):
            b = s.encode()
            f.write(struct.pack("<B", len(b)) + b)
        f.write(struct.pack("<I", len(ds)))
        f.write(struct.pack("<B", 1 if ds.labeled else 0))
        f.write(np.ascontiguousarray(ds.images, dtype="<f4").tobytes())
        if ds.labeled:
            f.write(ds.labels.astype(np.uint8).tobytes())
        for s in ds.ids:
            b = s.encode()
            f.write(struct.pack("<H", len(b)) + b)


def load_dataset(path) -> DomainDataset:
    with open(path, "rb") as f:
        blob = f.read()
    off = 0

    def take(n):
        nonlocal off
        if off + n > len(blob):
            raise DataError(f"truncated dataset container {path}")
        chunk = blob[off:off + n]
        off += n
        return chunk

    if take(4) != DATASET_MAGIC:
        raise DataError(f"{path} is not a dataset container (bad magic)")
    (version,) = struct.unpack("<I", take(4))
    if version != DATASET_VERSION:
        raise DataError(f"dataset container version {version} unsupported")
    strings = []
    for _ in range(2):
        (n,) = struct.unpack("<B", take(1))
        strings.append(take(n).decode())
    domain, split = strings
    (count,) = struct.unpack("<I", take(4))
    (labeled,) = struct.unpack("<B", take(1))
    images = np.frombuffer(take(count * IMAGE_SIZE * IMAGE_SIZE * 4), dtype="<f4")
    images = images.reshape(count, IMAGE_SIZE, IMAGE_SIZE).copy()
    labels = None
    if labeled:
        labels = np.frombuffer(take(count), dtype=np.uint8).astype(np.int64)
    ids = []
    for _ in range(count):
        (n,) = struct.unpack("<H", take(2))
        ids.append(take(n).decode())
    return DomainDataset(domain, split, images, labels, ids)
