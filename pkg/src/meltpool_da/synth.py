"""Parametric two-domain synthetic melt-pool benchmark.

Normal images are an anisotropic Gaussian ellipse with a fading tail
plume; abnormal images show a strongly elongated (unstable) pool,
optionally with spatter dots or an intensity dropout. Domain shift is
controlled through apparent scale, noise, flare, and brightness.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field, fields

import numpy as np
from scipy.ndimage import maximum_filter

from .data import IMAGE_SIZE, DomainDataset, augment_blur
from .errors import ContractError, DataError


@dataclass
class SyntheticDomainSpec:
    """Generative settings for one domain."""

    diameter_mean: float = 40.0        # apparent melt-pool diameter, pixels
    diameter_spread: float = 5.0
    tail_length: float = 18.0          # plume decay length, pixels
    tail_strength: float = 0.55
    noise_sigma: float = 0.01
    flare_prob: float = 0.0
    flare_intensity: float = 0.25
    brightness_gain: float = 1.0
    blur_sigma: float = 0.0            # optics blur applied to the clean render
    axis_ratio: tuple[float, float] = (0.55, 0.85)  # minor/major axis of normal pools
    # abnormality model
    spatter_count: tuple[int, int] = (2, 5)
    spatter_intensity: float = 0.8
    eccentricity_factor: float = 0.35  # multiplies the minor axis when drawn
    dropout_fraction: float = 0.55     # intensity retained in the dropped sector
    # split sizes (labeled normal/abnormal per split; train may be unlabeled)
    train_per_class: int = 60
    val_per_class: int = 50
    test_per_class: int = 50
    seed: int = 0

    def __post_init__(self):
        if not (4 < self.diameter_mean < 70):
            raise ContractError("diameter_mean must lie in (4, 70) pixels")
        if self.noise_sigma < 0:
            raise ContractError("noise_sigma must be >= 0")
        for n in (self.train_per_class, self.val_per_class, self.test_per_class):
            if n < 0:
                raise ContractError("split counts must be >= 0")


def default_source_spec(seed: int = 0) -> SyntheticDomainSpec:
    return SyntheticDomainSpec(seed=seed)


def default_target_spec(seed: int = 1) -> SyntheticDomainSpec:
    """Default shift: coarser-sensor scale (8/25 of the source diameter),
    extra noise, occasional flare, dimmer optics."""
    return SyntheticDomainSpec(
        diameter_mean=40.0 * 8.0 / 25.0, diameter_spread=1.8,
        tail_length=6.0, noise_sigma=0.05, flare_prob=0.3,
        brightness_gain=0.6, blur_sigma=0.8, seed=seed)


def render_melt_pool(spec: SyntheticDomainSpec, cls: str, seed: int,
                     noiseless: bool = False) -> np.ndarray:
    """Render one 80x80 image of the given class, deterministic in
    (spec.seed, cls, seed)."""
    if cls not in ("normal", "abnormal"):
        raise ContractError(f"class must be normal|abnormal, got {cls!r}")
    rng = np.random.default_rng([spec.seed, 0 if cls == "normal" else 1, seed])
    size = IMAGE_SIZE
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32)

    cy = size / 2 + rng.uniform(-4, 4)
    cx = size / 2 + rng.uniform(-4, 4)
    d = max(5.0, rng.normal(spec.diameter_mean, spec.diameter_spread))
    a = d / 2.0
    ratio = rng.uniform(*spec.axis_ratio)
    theta = rng.uniform(0, np.pi)

    abnormal_modes = []
    if cls == "abnormal":
        # every abnormal pool is strongly elongated (unstable, keyhole-like);
        # the elongation survives downscaling, blur, and brightness changes,
        # so the class signal transfers across sensor domains
        mode_bits = rng.random(2) < 0.5
        abnormal_modes = ["ecc"] + [m for m, on in
                                    zip(("spatter", "dropout"), mode_bits) if on]
        ratio *= spec.eccentricity_factor

    b = a * ratio
    ct, st = np.cos(theta), np.sin(theta)
    xr = (xx - cx) * ct + (yy - cy) * st
    yr = -(xx - cx) * st + (yy - cy) * ct
    img = np.exp(-0.5 * ((xr / (a / 1.6)) ** 2 + (yr / (b / 1.6)) ** 2))

    # tail plume trailing behind the scan direction (-x' half-plane)
    tail = spec.tail_strength * np.exp(np.minimum(xr, 0.0) / spec.tail_length) \
        * np.exp(-0.5 * (yr / (b / 1.8)) ** 2)
    img = np.maximum(img, np.where(xr < 0, tail, 0.0))

    spatter_centers = []
    if "spatter" in abnormal_modes:
        count = int(rng.integers(spec.spatter_count[0], spec.spatter_count[1] + 1))
        for _ in range(count):
            ang = rng.uniform(0, 2 * np.pi)
            dist = rng.uniform(1.3, 2.4) * a
            sy = np.clip(cy + dist * np.sin(ang), 3, size - 4)
            sx = np.clip(cx + dist * np.cos(ang), 3, size - 4)
            rad = rng.uniform(1.2, 2.2) * max(1.0, a / 8.0)
            blob = spec.spatter_intensity * np.exp(
                -0.5 * (((xx - sx) / rad) ** 2 + ((yy - sy) / rad) ** 2))
            img = np.maximum(img, blob)
            spatter_centers.append((sy, sx))
    if "dropout" in abnormal_modes:
        ang0 = rng.uniform(0, 2 * np.pi)
        width = rng.uniform(0.6, 1.3)
        ang = np.arctan2(yy - cy, xx - cx)
        diff = np.angle(np.exp(1j * (ang - ang0)))
        img = np.where(np.abs(diff) < width, img * (1 - spec.dropout_fraction), img)

    if spec.blur_sigma > 0:
        img = augment_blur(np.clip(img, 0, 1).astype(np.float32), spec.blur_sigma)
    img = img * spec.brightness_gain
    if not noiseless:
        if rng.random() < spec.flare_prob:
            fy, fx = rng.uniform(10, size - 10, size=2)
            frad = rng.uniform(8, 20)
            img = img + spec.flare_intensity * np.exp(
                -0.5 * (((xx - fx) / frad) ** 2 + ((yy - fy) / frad) ** 2))
        if spec.noise_sigma > 0:
            img = img + rng.normal(0, spec.noise_sigma, size=img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def count_local_maxima(img: np.ndarray, background: float = 0.15) -> int:
    """Local maxima above background in a 5x5 neighborhood (test oracle)."""
    peaks = (img == maximum_filter(img, size=5)) & (img > background)
    # collapse plateaus: count connected peak pixels once per 5x5 cell
    ys, xs = np.nonzero(peaks)
    kept = []
    for y, x in zip(ys, xs):
        if all((y - ky) ** 2 + (x - kx) ** 2 > 16 for ky, kx in kept):
            kept.append((y, x))
    return len(kept)


def _render_split(spec: SyntheticDomainSpec, domain: str, split: str,
                  n_normal: int, n_abnormal: int, labeled: bool, base: int):
    images, labels, ids = [], [], []
    idx = 0
    for cls, label, n in (("normal", 0, n_normal), ("abnormal", 1, n_abnormal)):
        for _ in range(n):
            images.append(render_melt_pool(spec, cls, base + idx))
            labels.append(label)
            ids.append(f"{domain}-{split}-{cls}-{base + idx}")
            idx += 1
    images = np.stack(images) if images else np.zeros((0, IMAGE_SIZE, IMAGE_SIZE), np.float32)
    labels = np.array(labels, dtype=np.int64)
    return images, labels, ids


@dataclass
class SyntheticBenchmark:
    """All splits for both domains, plus the sealed target-train labels."""

    source_train: DomainDataset
    source_val: DomainDataset
    source_test: DomainDataset
    target_train: DomainDataset       # unlabeled (labels=None)
    target_val: DomainDataset
    target_test: DomainDataset
    sealed_labels: np.ndarray = field(repr=False, default=None)

    def datasets(self) -> dict[str, DomainDataset]:
        return {"src_train": self.source_train, "src_val": self.source_val,
                "src_test": self.source_test, "tgt_train": self.target_train,
                "tgt_val": self.target_val, "tgt_test": self.target_test}


def generate_domain_pair(source_spec: SyntheticDomainSpec,
                         target_spec: SyntheticDomainSpec,
                         table2_counts: bool = False) -> SyntheticBenchmark:
    """Generate both domains. With table2_counts, sizes follow the bundled
    benchmark layout: source train 323/323 labeled, target train 5819
    unlabeled, and 50/50 validation/test per domain."""
    if table2_counts:
        src_train_n = (323, 323)
        tgt_train_total = 5819
        val_n = test_n = (50, 50)
    else:
        src_train_n = (source_spec.train_per_class,) * 2
        tgt_train_total = 2 * target_spec.train_per_class
        val_n = (source_spec.val_per_class,) * 2
        test_n = (source_spec.test_per_class,) * 2
        tval_n = (target_spec.val_per_class,) * 2
        ttest_n = (target_spec.test_per_class,) * 2
    if table2_counts:
        tval_n, ttest_n = val_n, test_n

    def mk(spec, domain, split, counts, base):
        imgs, labels, ids = _render_split(spec, domain, split, counts[0], counts[1],
                                          True, base)
        return DomainDataset(domain, split, imgs, labels, ids)

    source_train = mk(source_spec, "source", "train", src_train_n, 0)
    source_val = mk(source_spec, "source", "validation", val_n, 10_000)
    source_test = mk(source_spec, "source", "test", test_n, 20_000)

    # target train: balanced classes generated, labels withheld
    half = tgt_train_total // 2
    imgs, labels, ids = _render_split(target_spec, "target", "train",
                                      tgt_train_total - half, half, False, 0)
    rng = np.random.default_rng([source_spec.seed, target_spec.seed, 7])
    order = rng.permutation(len(imgs))
    # opaque ids: the class name must not leak into the unlabeled set
    opaque = [f"target-train-{i:05d}" for i in range(len(imgs))]
    target_train = DomainDataset("target", "train", imgs[order], None, opaque)
    sealed = labels[order]
    target_val = mk(target_spec, "target", "validation", tval_n, 10_000)
    target_test = mk(target_spec, "target", "test", ttest_n, 20_000)
    return SyntheticBenchmark(source_train, source_val, source_test,
                              target_train, target_val, target_test, sealed)


# --- sealed answer file ---------------------------------------------------

SEALED_MAGIC = b"MPSL"


def save_sealed_labels(labels: np.ndarray, ids: list[str], path) -> None:
    with open(path, "wb") as f:
        f.write(SEALED_MAGIC)
        f.write(struct.pack("<I", len(labels)))
        f.write(np.asarray(labels, dtype=np.uint8).tobytes())
        for s in ids:
            b = s.encode()
            f.write(struct.pack("<H", len(b)) + b)


def load_sealed_labels(path) -> tuple[np.ndarray, list[str]]:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != SEALED_MAGIC:
        raise DataError(f"{path} is not a sealed answer file")
    (n,) = struct.unpack("<I", blob[4:8])
    labels = np.frombuffer(blob[8:8 + n], dtype=np.uint8).astype(np.int64)
    off = 8 + n
    ids = []
    for _ in range(n):
        (ln,) = struct.unpack("<H", blob[off:off + 2])
        off += 2
        ids.append(blob[off:off + ln].decode())
        off += ln
    return labels, ids


def dataset_digest(ds: DomainDataset) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(ds.images, dtype="<f4").tobytes())
    if ds.labels is not None:
        h.update(ds.labels.astype(np.uint8).tobytes())
    h.update("\n".join(ds.ids).encode())
    return h.hexdigest()


def spec_from_dict(d: dict) -> SyntheticDomainSpec:
    """Build a spec from flat string key/values (used by the spec file parser)."""
    kwargs = {}
    valid = {f.name: f.type for f in fields(SyntheticDomainSpec)}
    for key, raw in d.items():
        if key not in valid:
            raise DataError(f"unknown synthetic spec field {key!r}")
        if key == "spatter_count":
            lo, hi = raw.split(",")
            kwargs[key] = (int(lo), int(hi))
        elif key == "axis_ratio":
            lo, hi = raw.split(",")
            kwargs[key] = (float(lo), float(hi))
        elif key in ("train_per_class", "val_per_class", "test_per_class", "seed"):
            kwargs[key] = int(raw)
        else:
            kwargs[key] = float(raw)
    return SyntheticDomainSpec(**kwargs)
