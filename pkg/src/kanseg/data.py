"""
Tiles, manifests, splitting, cloud filtering and the synthetic generator.

On-disk tile (format version 1), for a tile with id ``<id>``:

  ``<id>.json``   sidecar: {"magic": "KANSEG-TILE", "version": 1, "id", "shape": [C, H, W],
                  "dtype": "float32-le", "channel_names", "image_file", "mask_file",
                  "cloud_file" (or null)}
  ``<id>.img``    C*H*W little-endian float32, channel-major (C, then rows, then columns)
  ``<id>.mask``   H*W bytes, each 0 or 1, row-major
  ``<id>.cloud``  optional, same layout as the mask

Dataset manifest ``manifest.json``:
  {"magic": "KANSEG-DATASET", "version": 1, "channels", "height", "width",
   "channel_names", "tiles": [{"id", "path", "split"}],
   "normalization": {"mean": [...], "std": [...]} or null}
``path`` is the sidecar path relative to the manifest directory.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, replace

import numpy as np
from scipy import stats

from .errors import LoadError

logger = logging.getLogger(__name__)

TILE_MAGIC = "KANSEG-TILE"
DATASET_MAGIC = "KANSEG-DATASET"
FORMAT_VERSION = 1
DEFAULT_RATIOS = (0.76, 0.10, 0.14)


@dataclass
class Sample:
    image: np.ndarray  # [C, H, W]
    mask: np.ndarray  # [H, W] uint8 in {0, 1}
    id: str = ""
    cloud_mask: np.ndarray | None = None

    def __post_init__(self):
        self.image = np.asarray(self.image)
        self.mask = np.asarray(self.mask)
        if self.image.ndim != 3:
            raise ValueError(f"image must be [C,H,W], got shape {self.image.shape}")
        if self.mask.shape != self.image.shape[1:]:
            raise ValueError(f"mask shape {self.mask.shape} != image spatial {self.image.shape[1:]}")
        if not np.isin(self.mask, (0, 1)).all():
            raise ValueError("mask values must be 0 or 1")
        self.mask = self.mask.astype(np.uint8)
        if not np.all(np.isfinite(self.image)):
            raise ValueError("image contains non-finite values")
        if self.cloud_mask is not None:
            self.cloud_mask = np.asarray(self.cloud_mask).astype(np.uint8)

    @property
    def channels(self) -> int:
        return self.image.shape[0]


@dataclass
class DatasetManifest:
    tiles: list[dict]
    channels: int
    height: int
    width: int
    channel_names: list[str]
    normalization: dict | None = None
    version: int = FORMAT_VERSION

    def ids(self, split: str | None = None) -> list[str]:
        return [t["id"] for t in self.tiles if split is None or t["split"] == split]

    def to_dict(self) -> dict:
        return {
            "magic": DATASET_MAGIC,
            "version": self.version,
            "channels": self.channels,
            "height": self.height,
            "width": self.width,
            "channel_names": list(self.channel_names),
            "tiles": self.tiles,
            "normalization": self.normalization,
        }


def default_channel_names(c: int) -> list[str]:
    return [f"ch{i:02d}" for i in range(c)]


# ---------------------------------------------------------------------------
# tiles


def save_tile(sample: Sample, directory, channel_names=None) -> str:
    os.makedirs(directory, exist_ok=True)
    C, H, W = sample.image.shape
    base = sample.id or "tile"
    sidecar = {
        "magic": TILE_MAGIC,
        "version": FORMAT_VERSION,
        "id": sample.id,
        "shape": [C, H, W],
        "dtype": "float32-le",
        "channel_names": list(channel_names or default_channel_names(C)),
        "image_file": f"{base}.img",
        "mask_file": f"{base}.mask",
        "cloud_file": f"{base}.cloud" if sample.cloud_mask is not None else None,
    }
    with open(os.path.join(directory, sidecar["image_file"]), "wb") as fh:
        fh.write(np.ascontiguousarray(sample.image, dtype="<f4").tobytes())
    with open(os.path.join(directory, sidecar["mask_file"]), "wb") as fh:
        fh.write(np.ascontiguousarray(sample.mask, dtype=np.uint8).tobytes())
    if sample.cloud_mask is not None:
        with open(os.path.join(directory, sidecar["cloud_file"]), "wb") as fh:
            fh.write(np.ascontiguousarray(sample.cloud_mask, dtype=np.uint8).tobytes())
    path = os.path.join(directory, f"{base}.json")
    with open(path, "w") as fh:
        json.dump(sidecar, fh, indent=1, sort_keys=True)
    return path


def _read_mask(path, size: int, field_name: str) -> np.ndarray:
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size != size:
        raise LoadError(f"{field_name}: {path} holds {raw.size} bytes, expected {size}")
    if not np.isin(raw, (0, 1)).all():
        raise LoadError(f"{field_name}: values must be 0 or 1")
    return raw


def load_tile(path, normalization: dict | None = None) -> Sample:
    try:
        with open(path) as fh:
            sidecar = json.load(fh)
    except json.JSONDecodeError as exc:
        raise LoadError(f"sidecar: {path} is not valid JSON ({exc})") from None
    if sidecar.get("magic") != TILE_MAGIC:
        raise LoadError(f"magic: {path} is not a kanseg tile")
    if sidecar.get("version") != FORMAT_VERSION:
        raise LoadError(f"version: unsupported tile version {sidecar.get('version')}")
    if sidecar.get("dtype") != "float32-le":
        raise LoadError(f"dtype: unsupported {sidecar.get('dtype')!r}")
    shape = sidecar.get("shape")
    if not (isinstance(shape, list) and len(shape) == 3 and all(isinstance(s, int) and s > 0 for s in shape)):
        raise LoadError(f"shape: malformed {shape!r}")
    C, H, W = shape
    directory = os.path.dirname(os.path.abspath(path))
    img = np.fromfile(os.path.join(directory, sidecar["image_file"]), dtype="<f4")
    if img.size != C * H * W:
        raise LoadError(
            f"image_file: blob holds {img.size} float32 values, shape {shape} needs {C * H * W}"
        )
    image = img.astype(np.float32).reshape(C, H, W)
    mask = _read_mask(os.path.join(directory, sidecar["mask_file"]), H * W, "mask_file").reshape(H, W)
    cloud = None
    if sidecar.get("cloud_file"):
        cloud = _read_mask(os.path.join(directory, sidecar["cloud_file"]), H * W, "cloud_file").reshape(H, W)
    if not np.all(np.isfinite(image)):
        raise LoadError("image_file: non-finite values")
    sample = Sample(image, mask, str(sidecar.get("id", "")), cloud)
    if normalization is not None:
        sample = normalize(sample, normalization)
    return sample


# ---------------------------------------------------------------------------
# manifest and normalization


def channel_statistics(samples) -> dict:
    stack = np.stack([s.image.astype(np.float64) for s in samples])
    mean = stack.mean(axis=(0, 2, 3))
    std = stack.std(axis=(0, 2, 3))
    std = np.where(std > 0, std, 1.0)
    return {"mean": [float(v) for v in mean], "std": [float(v) for v in std]}


def normalize(sample: Sample, normalization: dict) -> Sample:
    mean = np.asarray(normalization["mean"], dtype=np.float64)[:, None, None]
    std = np.asarray(normalization["std"], dtype=np.float64)[:, None, None]
    if mean.shape[0] != sample.channels:
        raise ValueError(f"normalization has {mean.shape[0]} channels, sample has {sample.channels}")
    return replace(sample, image=(sample.image.astype(np.float64) - mean) / std)


def write_dataset(directory, splits: dict[str, list[Sample]], channel_names=None,
                  normalization: dict | None = None) -> DatasetManifest:
    os.makedirs(directory, exist_ok=True)
    all_samples = [s for part in splits.values() for s in part]
    if not all_samples:
        raise ValueError("write_dataset: no samples")
    C, H, W = all_samples[0].image.shape
    names = list(channel_names or default_channel_names(C))
    tiles = []
    ids = set()
    for split, part in splits.items():
        for s in part:
            if s.id in ids:
                raise ValueError(f"duplicate tile id {s.id!r}")
            if s.image.shape != (C, H, W):
                raise ValueError(f"tile {s.id!r} shape {s.image.shape} != {(C, H, W)}")
            ids.add(s.id)
            path = save_tile(s, os.path.join(directory, "tiles"), names)
            tiles.append({"id": s.id, "path": os.path.relpath(path, directory), "split": split})
    manifest = DatasetManifest(tiles, C, H, W, names, normalization)
    with open(os.path.join(directory, "manifest.json"), "w") as fh:
        json.dump(manifest.to_dict(), fh, indent=1, sort_keys=True)
    return manifest


def read_manifest(directory) -> DatasetManifest:
    path = os.path.join(directory, "manifest.json")
    try:
        with open(path) as fh:
            d = json.load(fh)
    except FileNotFoundError:
        raise LoadError(f"{path}: missing dataset manifest") from None
    except json.JSONDecodeError as exc:
        raise LoadError(f"{path}: invalid JSON ({exc})") from None
    if d.get("magic") != DATASET_MAGIC:
        raise LoadError(f"magic: {path} is not a kanseg dataset manifest")
    if d.get("version") != FORMAT_VERSION:
        raise LoadError(f"version: unsupported manifest version {d.get('version')}")
    ids = [t["id"] for t in d["tiles"]]
    if len(set(ids)) != len(ids):
        raise LoadError("tiles: ids are not unique")
    return DatasetManifest(d["tiles"], d["channels"], d["height"], d["width"], d["channel_names"],
                           d.get("normalization"), d["version"])


def load_split(directory, split: str, normalized: bool = True) -> list[Sample]:
    manifest = read_manifest(directory)
    norm = manifest.normalization if normalized else None
    return [load_tile(os.path.join(directory, t["path"]), norm) for t in manifest.tiles if t["split"] == split]


# ---------------------------------------------------------------------------
# splitting


def chi_square_homogeneity(table) -> tuple[float, float, int]:
    """Pearson chi-square for a 2 x k table (classes x groups): (statistic, p, dof)."""
    table = np.asarray(table, dtype=np.float64)
    if table.ndim != 2:
        raise ValueError("contingency table must be 2-D")
    row = table.sum(axis=1, keepdims=True)
    col = table.sum(axis=0, keepdims=True)
    total = table.sum()
    expected = row * col / total
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(expected > 0, (table - expected) ** 2 / expected, 0.0)
    stat = float(terms.sum())
    dof = (table.shape[0] - 1) * (table.shape[1] - 1)
    p = float(stats.chi2.sf(stat, dof)) if dof > 0 else 1.0
    return stat, p, dof


def class_table(splits) -> np.ndarray:
    cols = []
    for part in splits:
        pos = int(sum(int(s.mask.sum()) for s in part))
        neg = int(sum(s.mask.size for s in part)) - pos
        cols.append([pos, neg])
    return np.array(cols, dtype=np.float64).T


@dataclass
class SplitResult:
    train: list[Sample]
    val: list[Sample]
    test: list[Sample]
    p_value: float
    seed_used: int
    accepted: bool

    def __iter__(self):
        return iter((self.train, self.val, self.test))


def _split_sizes(n: int, ratios) -> tuple[int, int, int]:
    n_val = int(round(n * ratios[1]))
    n_test = int(round(n * ratios[2]))
    n_train = n - n_val - n_test
    return n_train, n_val, n_test


def split_dataset(samples, ratios=DEFAULT_RATIOS, seed: int = 0, p_min: float = 0.9,
                  max_retries: int = 50) -> SplitResult:
    """Seeded train/val/test partition whose pixel class frequencies pass a chi-square check."""
    samples = list(samples)
    if len(samples) < 3:
        raise ValueError("split_dataset needs at least 3 samples")
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9 or min(ratios) < 0:
        raise ValueError(f"ratios must be three non-negative numbers summing to 1, got {ratios}")
    sizes = _split_sizes(len(samples), ratios)
    if min(sizes) < 1:
        raise ValueError(f"ratios {ratios} leave an empty split for {len(samples)} samples")
    best = None
    for attempt in range(max(1, max_retries)):
        s = seed + attempt
        order = np.random.default_rng(s).permutation(len(samples))
        parts = (
            [samples[i] for i in order[: sizes[0]]],
            [samples[i] for i in order[sizes[0] : sizes[0] + sizes[1]]],
            [samples[i] for i in order[sizes[0] + sizes[1] :]],
        )
        _, p, _ = chi_square_homogeneity(class_table(parts))
        if best is None or p > best[0]:
            best = (p, s, parts)
        if p > p_min:
            return SplitResult(*parts, p_value=p, seed_used=s, accepted=True)
    p, s, parts = best
    logger.warning("split_dataset: best chi-square p=%.4g after %d tries (wanted > %g)", p, max_retries, p_min)
    return SplitResult(*parts, p_value=p, seed_used=s, accepted=False)


# ---------------------------------------------------------------------------
# cloud filter


def cloud_overlap(sample: Sample, denominator: str = "crop") -> float:
    if sample.cloud_mask is None:
        raise ValueError(f"sample {sample.id!r} has no cloud mask")
    crop = sample.mask.astype(bool)
    cloud = sample.cloud_mask.astype(bool)
    inter = int(np.count_nonzero(crop & cloud))
    if denominator == "crop":
        denom = int(np.count_nonzero(crop))
    elif denominator == "union":
        denom = int(np.count_nonzero(crop | cloud))
    else:
        raise ValueError(f"denominator must be 'crop' or 'union', got {denominator!r}")
    return inter / denom if denom else 0.0


def filter_cloudy(samples, overlap_threshold: float = 0.7, denominator: str = "crop") -> list[Sample]:
    """Drop samples whose clouds cover more than ``overlap_threshold`` of their crop pixels."""
    kept = []
    for s in samples:
        if s.cloud_mask is None:
            raise ValueError(f"sample {s.id!r} has no cloud mask; cannot filter")
        if not s.mask.any() or cloud_overlap(s, denominator) <= overlap_threshold:
            kept.append(s)
    return kept


# ---------------------------------------------------------------------------
# synthetic generator

SIGNAL_SHIFT = 1.0
NOISE_SIGMA = 0.25
MIN_POSITIVE_FRACTION = 0.05
MAX_POSITIVE_FRACTION = 0.6


def _convex_polygon(rng, size: int) -> np.ndarray:
    cx, cy = rng.uniform(0.15 * size, 0.85 * size, size=2)
    radius = rng.uniform(0.12 * size, 0.3 * size)
    n = int(rng.integers(3, 8))
    angles = np.sort(rng.uniform(0, 2 * np.pi, size=n))
    radii = radius * rng.uniform(0.7, 1.0, size=n)
    pts = np.stack([cx + radii * np.cos(angles), cy + radii * np.sin(angles)], axis=1)
    return pts  # counter-clockwise, star-shaped about the centre


def _rasterize_convex(pts: np.ndarray, size: int) -> np.ndarray:
    from scipy.spatial import ConvexHull

    hull = pts[ConvexHull(pts).vertices]
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    inside = np.ones((size, size), dtype=bool)
    for a, b in zip(hull, np.roll(hull, -1, axis=0)):
        cross = (b[0] - a[0]) * (yy - a[1]) - (b[1] - a[1]) * (xx - a[0])
        inside &= cross >= 0
    return inside


def _field_mask(rng, size: int) -> np.ndarray:
    while True:
        mask = np.zeros((size, size), dtype=bool)
        for _ in range(int(rng.integers(1, 6))):
            mask |= _rasterize_convex(_convex_polygon(rng, size), size)
        frac = mask.mean()
        if MIN_POSITIVE_FRACTION <= frac <= MAX_POSITIVE_FRACTION:
            return mask.astype(np.uint8)


def synth_channel_roles(channels: int) -> list[str]:
    """Role of every channel: signal (critical), edge, noise, half (weaker copy of signal)."""
    if channels < 2:
        raise ValueError("synthetic tiles need at least 2 channels")
    roles = ["signal"] + ["noise"] * (channels - 2) + ["half"]
    if channels >= 3:
        roles[1] = "edge"
    return roles


def synth_generate(count: int, size: int = 32, channels: int = 4, seed: int = 0) -> list[Sample]:
    if size < 16:
        raise ValueError(f"size must be >= 16, got {size}")
    roles = synth_channel_roles(channels)
    rng = np.random.default_rng(seed)
    samples = []
    for n in range(count):
        mask = _field_mask(rng, size)
        m = mask.astype(np.float64)
        gy, gx = np.gradient(m)
        edge = np.hypot(gy, gx)
        image = np.empty((channels, size, size))
        for c, role in enumerate(roles):
            if role == "signal":
                image[c] = SIGNAL_SHIFT * m
            elif role == "edge":
                image[c] = edge
            elif role == "half":
                image[c] = 0.5 * SIGNAL_SHIFT * m
            else:
                image[c] = rng.normal(0.0, 1.0, size=(size, size))
        image += rng.normal(0.0, NOISE_SIGMA, size=image.shape)
        samples.append(Sample(image.astype(np.float32), mask, f"tile{n:05d}"))
    return samples
