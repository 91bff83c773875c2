"""
Grad-CAM saliency and the explanation metrics built on it.

The positive-class score of a segmentation network is the sum of its logit
map. Grad-CAM weights each feature map ``A_k`` of the target layer by the
spatial mean of d(score)/d(A_k), sums, applies ReLU and upsamples
bilinearly to the input size. Continuous maps are binarized with Otsu's
method (256 bins on the max-normalized map) before any mask comparison.

Occlusion and masking fill with 0, the per-channel mean in normalized space.
"""

from __future__ import annotations

import csv
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from .data import Sample
from .errors import DimensionError
from .models import Model
from .numerics import Tensor
from .training import MetricsReport, confusion_counts

__all__ = [
    "SaliencyMap",
    "OtsuResult",
    "SufficiencyResult",
    "XaiReport",
    "grad_cam",
    "cam_from_activations",
    "normalize_saliency",
    "otsu_threshold",
    "plausibility",
    "sufficiency",
    "channel_relevance",
    "mask_iou",
    "write_pgm",
    "read_pgm",
    "write_saliency_csv",
]

FILL_VALUE = 0.0


@dataclass
class SaliencyMap:
    raw: np.ndarray
    normalized: np.ndarray
    target_layer: str = ""
    sample_id: str = ""

    @classmethod
    def from_raw(cls, raw, target_layer: str = "", sample_id: str = "") -> "SaliencyMap":
        raw = np.asarray(raw, dtype=np.float64)
        return cls(raw, normalize_saliency(raw), target_layer, sample_id)


def normalize_saliency(raw: np.ndarray) -> np.ndarray:
    peak = float(raw.max()) if raw.size else 0.0
    if peak <= 0:
        return np.zeros_like(raw, dtype=np.float64)
    return raw / peak


def cam_from_activations(acts: np.ndarray, grads: np.ndarray, out_size=None) -> np.ndarray:
    """ReLU(sum_k mean(grads_k) * acts_k) for [K, h, w] arrays, upsampled to ``out_size``."""
    acts = np.asarray(acts, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if acts.ndim != 3 or acts.shape != grads.shape:
        raise DimensionError(f"activations {acts.shape} and gradients {grads.shape} must both be [K,h,w]")
    alpha = grads.mean(axis=(1, 2))
    cam = np.maximum(np.tensordot(alpha, acts, axes=1), 0.0)
    if out_size is not None and tuple(out_size) != cam.shape:
        H, W = out_size
        h, w = cam.shape
        if H % h or W % w or H // h != W // w:
            raise DimensionError(f"cannot upsample {cam.shape} to {tuple(out_size)} by an integer factor")
        cam = nm.upsample_bilinear(Tensor(cam[None, None]), H // h).data[0, 0]
        cam = np.maximum(cam, 0.0)
    return cam


def _target_activation(model: Model, image: np.ndarray, target_layer: str):
    names = {layer.name for layer in model.layers}
    if target_layer not in names:
        raise ValueError(f"unknown target layer {target_layer!r}")
    holder = {}

    def capture(t: Tensor) -> Tensor:
        if t.ndim != 4:
            raise ValueError(f"target layer {target_layer!r} is not spatial (output shape {t.shape})")
        leaf = Tensor(t.data, requires_grad=True)
        holder["a"] = leaf
        return leaf

    acts = model.run(Tensor(image[None]), intervene={target_layer: capture})
    score = nm.tsum(acts[model.output_name])
    nm.backward(score)
    a = holder["a"]
    grad = a.grad if a.grad is not None else np.zeros_like(a.data)
    return a.data[0], grad[0]


def grad_cam(model: Model, sample: Sample, target_layer: str | None = None) -> SaliencyMap:
    layer = target_layer or model.grad_cam_layer
    if layer is None:
        raise ValueError("model has no default Grad-CAM layer; pass target_layer")
    a, g = _target_activation(model, np.asarray(sample.image, dtype=np.float64), layer)
    raw = cam_from_activations(a, g, sample.image.shape[1:])
    return SaliencyMap(raw, normalize_saliency(raw), layer, sample.id)


# ---------------------------------------------------------------------------
# Otsu


@dataclass
class OtsuResult:
    threshold: float | None
    binary: np.ndarray
    degenerate: bool


def _bin_index(values: np.ndarray, bins: int) -> np.ndarray:
    # right-closed bins (i/bins, (i+1)/bins], bin 0 also holds 0
    return np.clip(np.ceil(values * bins).astype(np.int64) - 1, 0, bins - 1)


def otsu_threshold(saliency, bins: int = 256) -> OtsuResult:
    """Threshold on the normalized map that maximizes between-class variance.

    Candidates are the upper bin edges ``(k+1)/bins``; class 0 holds bins
    ``0..k``. Ties resolve toward the lower threshold.
    """
    values = saliency.normalized if isinstance(saliency, SaliencyMap) else normalize_saliency(np.asarray(saliency, float))
    idx = _bin_index(values.reshape(-1), bins)
    counts = np.bincount(idx, minlength=bins).astype(np.float64)
    centers = (np.arange(bins) + 0.5) / bins
    w0 = np.cumsum(counts)
    s0 = np.cumsum(counts * centers)
    total, stotal = w0[-1], s0[-1]
    w1 = total - w0
    with np.errstate(divide="ignore", invalid="ignore"):
        mu0 = s0 / w0
        mu1 = (stotal - s0) / w1
        between = w0 * w1 * (mu0 - mu1) ** 2
    between = np.where((w0 > 0) & (w1 > 0), between, 0.0)
    k = int(np.argmax(between))
    if between[k] <= 0:
        return OtsuResult(None, np.zeros(values.shape, dtype=bool), True)
    binary = (idx > k).reshape(values.shape)
    return OtsuResult((k + 1) / bins, binary, False)


# ---------------------------------------------------------------------------
# metrics


def mask_iou(a, b) -> float:
    a, b = np.asarray(a, bool), np.asarray(b, bool)
    union = np.count_nonzero(a | b)
    if union == 0:
        return 1.0
    return np.count_nonzero(a & b) / union


def plausibility(saliency, gt) -> MetricsReport:
    """Otsu-binarized saliency scored against the ground-truth mask."""
    gt = np.asarray(gt)
    values = saliency.normalized if isinstance(saliency, SaliencyMap) else np.asarray(saliency)
    if values.shape != gt.shape:
        raise DimensionError(f"saliency shape {values.shape} != mask shape {gt.shape}")
    return MetricsReport.from_masks(otsu_threshold(saliency).binary, gt)


@dataclass
class SufficiencyResult:
    deltas: dict[str, float] | None
    original: MetricsReport | None = None
    masked: MetricsReport | None = None
    degenerate: bool = False
    important: np.ndarray | None = field(default=None, repr=False)


def _sample_report(model: Model, image: np.ndarray, gt: np.ndarray, threshold: float = 0.5) -> MetricsReport:
    prob = model.predict_proba(image[None].astype(np.float64))[0, 0]
    return MetricsReport.from_counts(*confusion_counts(prob > threshold, gt))


def sufficiency(model: Model, sample: Sample, saliency, fill: float = FILL_VALUE) -> SufficiencyResult:
    """Metric change (masked - original) when only important pixels survive.

    ``saliency`` is a SaliencyMap (binarized with Otsu) or a boolean mask of
    important pixels.
    """
    if isinstance(saliency, SaliencyMap):
        otsu = otsu_threshold(saliency)
        if otsu.degenerate:
            return SufficiencyResult(None, degenerate=True)
        important = otsu.binary
    else:
        important = np.asarray(saliency, dtype=bool)
    if important.shape != sample.mask.shape:
        raise DimensionError(f"important-pixel mask {important.shape} != tile {sample.mask.shape}")
    image = np.asarray(sample.image, dtype=np.float64)
    masked = np.where(important[None], image, fill)
    original = _sample_report(model, image, sample.mask)
    altered = _sample_report(model, masked, sample.mask)
    a, b = original.scores(), altered.scores()
    return SufficiencyResult({k: b[k] - a[k] for k in a}, original, altered, False, important)


def channel_relevance(model: Model, sample: Sample, target_layer: str | None = None,
                      fill: float = FILL_VALUE, threads: int = 1) -> np.ndarray:
    """IoU between the binarized full-input map and each single-channel-occluded map."""
    if sample.channels < 2:
        raise ValueError("channel_relevance needs at least 2 channels")
    full = otsu_threshold(grad_cam(model, sample, target_layer))
    if full.degenerate:
        raise ValueError(f"sample {sample.id!r}: full-channel saliency is degenerate")

    def occluded_iou(c: int) -> float:
        image = np.array(sample.image, dtype=np.float64, copy=True)
        image[c] = fill
        occ = Sample(image, sample.mask, sample.id)
        return mask_iou(otsu_threshold(grad_cam(model, occ, target_layer)).binary, full.binary)

    channels = range(sample.channels)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return np.array(list(pool.map(occluded_iou, channels)))
    return np.array([occluded_iou(c) for c in channels])


# ---------------------------------------------------------------------------
# reports and export


@dataclass
class XaiReport:
    plausibility: MetricsReport
    sufficiency: dict[str, float]
    channel_relevance: list[float]
    otsu_threshold: float | None

    def to_dict(self) -> dict:
        return {
            "plausibility": self.plausibility.to_dict(),
            "sufficiency": self.sufficiency,
            "channel_relevance": list(self.channel_relevance),
            "otsu_threshold": self.otsu_threshold,
        }

    def write(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1, sort_keys=True)


def write_pgm(saliency: SaliencyMap, path) -> None:
    """Binary PGM (P5), maxval 255, pixel = round(normalized * 255)."""
    pixels = np.rint(np.clip(saliency.normalized, 0.0, 1.0) * 255).astype(np.uint8)
    h, w = pixels.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    # header tokens are whitespace separated; exactly one whitespace byte precedes the raster,
    # so pixel values that happen to be whitespace codes must not be consumed
    fields, pos = [], 0
    while len(fields) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError(f"{path}: truncated PGM header")
        fields.append(data[start:pos])
    if fields[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = (int(f) for f in fields[1:])
    if maxval != 255:
        raise ValueError(f"{path}: unsupported maxval {maxval}")
    raster = data[pos + 1 : pos + 1 + w * h]
    if len(raster) != w * h:
        raise ValueError(f"{path}: raster holds {len(raster)} bytes, expected {w * h}")
    return np.frombuffer(raster, dtype=np.uint8).reshape(h, w)


def write_saliency_csv(saliency: SaliencyMap, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        for row in saliency.raw:
            writer.writerow([repr(float(v)) for v in row])
