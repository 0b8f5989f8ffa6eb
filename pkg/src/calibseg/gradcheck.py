"""Central finite-difference checks of the analytic loss gradients."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import LabelMap
from .losses import LossConfig, LossKind, compute_loss, kink_mask

TOLERANCE = 1e-6


def numerical_gradient(fn, x: np.ndarray, h: float = 1e-6, where=None) -> np.ndarray:
    """Central differences of scalar ``fn`` at ``x``; entries outside ``where`` stay 0."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    idx = range(flat.size) if where is None else np.flatnonzero(np.reshape(where, -1))
    for i in idx:
        orig = flat[i]
        flat[i] = orig + h
        up = fn(x)
        flat[i] = orig - h
        down = fn(x)
        flat[i] = orig
        gflat[i] = (up - down) / (2.0 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max-norm relative error ``max|a - n| / max(max|a|, max|n|)``."""
    scale = max(np.max(np.abs(analytic), initial=0.0), np.max(np.abs(numeric), initial=0.0))
    if scale == 0.0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric)) / scale)


@dataclass
class GradcheckResult:
    kind: str
    max_error: float
    trials: int
    excluded_pixels: int

    @property
    def passed(self) -> bool:
        return self.max_error < TOLERANCE


def check_loss(
    config: LossConfig,
    rng: np.random.Generator,
    shape=(5, 5),
    num_classes: int = 4,
    low: float = -3.0,
    high: float = 3.0,
    h: float = 1e-6,
    kink_tol: float = 1e-3,
) -> tuple[float, int]:
    """One random trial; returns (relative error, number of excluded pixels)."""
    logits = rng.uniform(low, high, size=(*shape, num_classes))
    labels = LabelMap(rng.integers(0, num_classes, size=shape), num_classes)
    analytic = compute_loss(logits, labels, config).grad
    keep = ~kink_mask(logits, labels, config, kink_tol)
    where = np.broadcast_to(keep[..., None], logits.shape)
    numeric = numerical_gradient(lambda x: compute_loss(x, labels, config).value, logits, h, where)
    err = relative_error(analytic[where], numeric[where])
    return err, int((~keep).sum())


def run_gradcheck(kinds=None, seed: int = 7, trials: int = 20, **kwargs) -> list[GradcheckResult]:
    """Check every loss in ``kinds`` (default: all seven at default hyperparameters)."""
    configs = [
        k if isinstance(k, LossConfig) else LossConfig(LossKind(k))
        for k in (kinds or list(LossKind))
    ]
    results = []
    for config in configs:
        rng = np.random.default_rng(seed)
        worst, excluded = 0.0, 0
        for _ in range(trials):
            err, n_ex = check_loss(config, rng, **kwargs)
            worst = max(worst, err)
            excluded += n_ex
        results.append(GradcheckResult(config.kind.value, worst, trials, excluded))
    return results
