"""Calibration (ECE, classwise ECE, reliability bins) and overlap/boundary
(Dice, HD95) metrics for 2D label maps and probability fields."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import _backend
from .core import CalibsegError, InvalidInputError, LabelMap, as_field, check_same_grid

DEFAULT_BINS = 15


class UndefinedMetricError(CalibsegError, ValueError):
    """A metric has no samples to be computed over."""


@dataclass(frozen=True)
class BinStats:
    index: int
    lo: float
    hi: float
    count: int
    accuracy: float | None
    confidence: float | None


def bin_edges(bins: int) -> np.ndarray:
    return np.arange(bins + 1, dtype=np.float64) / bins


def bin_index(conf: np.ndarray, bins: int) -> np.ndarray:
    """Bin ``i`` covers ``(i/M, (i+1)/M]``; a confidence of exactly 0 goes to bin 0."""
    idx = np.searchsorted(bin_edges(bins), conf, side="left") - 1
    return np.clip(idx, 0, bins - 1)


def _check(probs, gt: LabelMap, bins: int) -> np.ndarray:
    probs = as_field(probs, "probs")
    check_same_grid(probs, gt)
    if bins < 1:
        raise InvalidInputError(f"need at least one bin, got {bins}")
    return probs


def _confidence_samples(probs, gt, foreground_only):
    conf = probs.max(axis=-1)
    pred = probs.argmax(axis=-1)
    correct = pred == gt.values
    if foreground_only:
        keep = (gt.values != 0) | (pred != 0)
        conf, correct = conf[keep], correct[keep]
    else:
        conf, correct = conf.reshape(-1), correct.reshape(-1)
    if conf.size == 0:
        raise UndefinedMetricError("no pixels to compute the calibration error over")
    return conf, correct


def _binned(conf, hits, bins):
    idx = bin_index(conf, bins)
    counts = np.bincount(idx, minlength=bins)
    acc_sum = np.bincount(idx, weights=hits.astype(np.float64), minlength=bins)
    conf_sum = np.bincount(idx, weights=conf, minlength=bins)
    return counts, acc_sum, conf_sum


def _gap(counts, acc_sum, conf_sum, total):
    nz = counts > 0
    acc = acc_sum[nz] / counts[nz]
    conf = conf_sum[nz] / counts[nz]
    return float(np.sum(counts[nz] / total * np.abs(acc - conf)))


def reliability_bins(probs, gt: LabelMap, bins: int = DEFAULT_BINS,
                     foreground_only: bool = True) -> list[BinStats]:
    probs = _check(probs, gt, bins)
    conf, correct = _confidence_samples(probs, gt, foreground_only)
    counts, acc_sum, conf_sum = _binned(conf, correct, bins)
    edges = bin_edges(bins)
    out = []
    for i in range(bins):
        n = int(counts[i])
        out.append(BinStats(
            i, float(edges[i]), float(edges[i + 1]), n,
            float(acc_sum[i] / n) if n else None,
            float(conf_sum[i] / n) if n else None,
        ))
    return out


def ece(probs, gt: LabelMap, bins: int = DEFAULT_BINS, foreground_only: bool = True) -> float:
    """Expected calibration error of the max-probability prediction.

    With ``foreground_only`` a pixel counts when its ground truth or its
    prediction is a non-background class.
    """
    probs = _check(probs, gt, bins)
    conf, correct = _confidence_samples(probs, gt, foreground_only)
    return _gap(*_binned(conf, correct, bins), conf.size)


def cece(probs, gt: LabelMap, bins: int = DEFAULT_BINS) -> float:
    """Classwise ECE: every pixel is binned once per class by that class's
    probability; gaps are weighted by bin population over the pixel count."""
    probs = _check(probs, gt, bins)
    n = gt.values.size
    total = 0.0
    for j in range(gt.num_classes):
        col = probs[..., j].reshape(-1)
        hits = gt.values.reshape(-1) == j
        total += _gap(*_binned(col, hits, bins), n)
    return total


def dice(pred: LabelMap, gt: LabelMap, k: int) -> float:
    """Dice overlap of the class-``k`` masks; 1.0 when both are empty."""
    if pred.shape != gt.shape:
        raise InvalidInputError(f"shape mismatch {pred.shape} vs {gt.shape}")
    if not 0 <= k < max(pred.num_classes, gt.num_classes):
        raise InvalidInputError(f"class {k} out of range")
    a = pred.values == k
    b = gt.values == k
    denom = int(a.sum()) + int(b.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / denom


def boundary(mask: np.ndarray) -> np.ndarray:
    """Mask pixels with a 4-neighbour outside the mask (the image border is outside)."""
    mask = np.asarray(mask, dtype=bool)
    p = np.pad(mask, 1, constant_values=False)
    interior = p[:-2, 1:-1] & p[2:, 1:-1] & p[1:-1, :-2] & p[1:-1, 2:]
    return mask & ~interior


def surface_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pooled nearest-boundary distances A->B and B->A (both masks nonempty)."""
    ba, bb = boundary(a), boundary(b)
    to_b = _backend.distance_to_mask(np.ascontiguousarray(bb, dtype=np.uint8))
    to_a = _backend.distance_to_mask(np.ascontiguousarray(ba, dtype=np.uint8))
    return np.concatenate([to_b[ba], to_a[bb]])


def hd95(pred: LabelMap, gt: LabelMap, k: int) -> float | None:
    """95th percentile (linear interpolation) of pooled boundary distances.

    Returns ``None`` when exactly one of the two class-``k`` masks is empty.
    """
    if pred.shape != gt.shape:
        raise InvalidInputError(f"shape mismatch {pred.shape} vs {gt.shape}")
    a = pred.values == k
    b = gt.values == k
    has_a, has_b = bool(a.any()), bool(b.any())
    if not has_a and not has_b:
        return 0.0
    if has_a != has_b:
        return None
    if np.array_equal(a, b):
        return 0.0
    return float(np.percentile(surface_distances(a, b), 95))


@dataclass
class CaseMetrics:
    dsc: dict[int, float]
    hd95: dict[int, float | None]
    ece: float | None
    cece: float
    mean_dsc: float
    mean_hd95: float | None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dsc"] = {str(k): v for k, v in self.dsc.items()}
        d["hd95"] = {str(k): v for k, v in self.hd95.items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CaseMetrics":
        return cls(
            dsc={int(k): v for k, v in d["dsc"].items()},
            hd95={int(k): v for k, v in d["hd95"].items()},
            ece=d["ece"],
            cece=d["cece"],
            mean_dsc=d["mean_dsc"],
            mean_hd95=d["mean_hd95"],
        )


def _mean_defined(values) -> float | None:
    vals = [v for v in values if v is not None and not math.isnan(v)]
    return float(np.mean(vals)) if vals else None


def case_metrics(probs, gt: LabelMap, bins: int = DEFAULT_BINS,
                 foreground_only: bool = True) -> CaseMetrics:
    """All four metrics for one case; DSC and HD95 over foreground classes 1..K-1."""
    probs = _check(probs, gt, bins)
    pred = LabelMap(probs.argmax(axis=-1), gt.num_classes)
    classes = range(1, gt.num_classes)
    dsc = {k: dice(pred, gt, k) for k in classes}
    hd = {k: hd95(pred, gt, k) for k in classes}
    try:
        e = ece(probs, gt, bins, foreground_only)
    except UndefinedMetricError:
        e = None
    return CaseMetrics(
        dsc=dsc,
        hd95=hd,
        ece=e,
        cece=cece(probs, gt, bins),
        mean_dsc=_mean_defined(dsc.values()),
        mean_hd95=_mean_defined(hd.values()),
    )
