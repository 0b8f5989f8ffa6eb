"""Spatial kernels, spatially varying soft labels, and neighbourhood priors.

Every prior is a function of the class histogram of a patch: plain counts for
Mean and the order-statistic modes, kernel-weighted counts for Gaussian.  Both
``compute_prior`` and ``prior_field`` go through the same histogram routine,
so a pixel of the field is bitwise equal to the prior of its padded patch.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from . import _backend
from .core import InvalidConfigError, InvalidInputError, LabelMap, as_kernel


class PriorMode(str, enum.Enum):
    MEAN = "mean"
    GAUSSIAN = "gaussian"
    MAX = "max"
    MIN = "min"
    MEDIAN = "median"
    MODE = "mode"


@dataclass(frozen=True)
class PriorConfig:
    mode: PriorMode = PriorMode.MEAN
    patch_size: int = 3
    sigma: float = 2.0
    normalize: bool = True

    def __post_init__(self):
        try:
            object.__setattr__(self, "mode", PriorMode(self.mode))
        except ValueError as exc:
            raise InvalidConfigError(f"unknown prior mode {self.mode!r}") from exc
        if int(self.patch_size) != self.patch_size or self.patch_size < 1 or self.patch_size % 2 == 0:
            raise InvalidConfigError(f"patch_size must be odd and >= 1, got {self.patch_size}")
        if self.mode is PriorMode.GAUSSIAN and not self.sigma > 0:
            raise InvalidConfigError(f"sigma must be > 0, got {self.sigma}")


def gaussian_kernel(size: int, sigma: float) -> np.ndarray:
    """Unnormalized discrete Gaussian, ``exp(-(i^2 + j^2) / (2 sigma^2))``."""
    if int(size) != size or size < 1 or size % 2 == 0:
        raise InvalidConfigError(f"kernel size must be odd and >= 1, got {size}")
    if not sigma > 0:
        raise InvalidConfigError(f"sigma must be > 0, got {sigma}")
    r = np.arange(size, dtype=np.float64) - (size - 1) / 2
    d2 = r[:, None] ** 2 + r[None, :] ** 2
    return np.exp(-d2 / (2.0 * sigma * sigma))


def kernel_total(weights: np.ndarray) -> float:
    """Sum of the kernel weights in row-major order, the order in which window
    histograms accumulate them, so a uniform patch maps to an exact one-hot."""
    total = 0.0
    for x in np.asarray(weights, dtype=np.float64).ravel().tolist():
        total += x
    return total


def pad_replicate(labels: LabelMap, d1: int, d2: int | None = None) -> np.ndarray:
    d2 = d1 if d2 is None else d2
    return np.pad(labels.values, ((d1 // 2, d1 // 2), (d2 // 2, d2 // 2)), mode="edge")


def _patch_histogram(patch: LabelMap, weights: np.ndarray) -> np.ndarray:
    if patch.shape != weights.shape:
        raise InvalidInputError(
            f"patch shape {patch.shape} does not match kernel shape {weights.shape}"
        )
    values = np.ascontiguousarray(patch.values, dtype=np.int64)
    return _backend.window_sums(values, patch.num_classes, np.ascontiguousarray(weights))[0, 0]


def svls_soft_label(patch: LabelMap, kernel) -> np.ndarray:
    """Kernel-weighted class proportions of ``patch`` (a point on the simplex)."""
    w = as_kernel(kernel)
    return _patch_histogram(patch, w) / kernel_total(w)


def _from_histograms(hist: np.ndarray, config: PriorConfig, weights: np.ndarray) -> np.ndarray:
    """Map class histograms (..., K) to priors under ``config``."""
    num_classes = hist.shape[-1]
    mode = config.mode
    if mode is PriorMode.MEAN:
        return hist / weights.size if config.normalize else hist.copy()
    if mode is PriorMode.GAUSSIAN:
        return hist / kernel_total(weights)
    present = hist > 0
    if mode is PriorMode.MAX:
        idx = num_classes - 1 - np.argmax(present[..., ::-1], axis=-1)
    elif mode is PriorMode.MIN:
        idx = np.argmax(present, axis=-1)
    elif mode is PriorMode.MODE:
        idx = np.argmax(hist, axis=-1)  # first maximum = smallest id on ties
    else:
        # lower median: the ((d - 1) // 2)-th smallest label id
        rank = (weights.size - 1) // 2
        idx = np.argmax(np.cumsum(hist, axis=-1) > rank, axis=-1)
    return np.eye(num_classes, dtype=np.float64)[idx]


def _weights_for(config: PriorConfig) -> np.ndarray:
    if config.mode is PriorMode.GAUSSIAN:
        return gaussian_kernel(config.patch_size, config.sigma)
    return np.ones((config.patch_size, config.patch_size), dtype=np.float64)


def compute_prior(patch: LabelMap, config: PriorConfig) -> np.ndarray:
    """Prior vector of length K for a single ``patch_size`` x ``patch_size`` patch."""
    weights = _weights_for(config)
    return _from_histograms(_patch_histogram(patch, weights), config, weights)


def prior_field(labels: LabelMap, config: PriorConfig) -> np.ndarray:
    """``compute_prior`` on the replicate-padded patch around every pixel."""
    weights = _weights_for(config)
    padded = np.ascontiguousarray(pad_replicate(labels, config.patch_size), dtype=np.int64)
    hist = _backend.window_sums(padded, labels.num_classes, weights)
    return _from_histograms(hist, config, weights)


def svls_soft_labels(labels: LabelMap, kernel) -> np.ndarray:
    """Soft-label field: ``svls_soft_label`` over the padded patch of every pixel."""
    w = as_kernel(kernel)
    padded = np.ascontiguousarray(pad_replicate(labels, *w.shape), dtype=np.int64)
    return _backend.window_sums(padded, labels.num_classes, np.ascontiguousarray(w)) / kernel_total(w)
