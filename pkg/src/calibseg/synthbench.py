"""Seeded synthetic 2D segmentation cases and two toy gradient-descent models.

Cases are random discs and rectangles painted on background, observed
through Gaussian intensity noise, with optional label flips at region
boundaries.  All randomness comes from numpy's PCG64 bit generator seeded
with ``BenchConfig.seed``, so a config determines every output bit.

Models:

* :class:`DirectLogit` -- a free logit field per case, trained pixel-wise.
* :class:`LinearPixel` -- logits ``W @ f + b`` over two per-pixel features
  (intensity and its 3x3 replicate-padded mean).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .core import (
    CalibsegError,
    InvalidConfigError,
    InvalidInputError,
    LabelMap,
    softmax,
)
from .losses import LossConfig, LossKind, compute_loss, nacl_loss, nacl_prior
from .metrics import DEFAULT_BINS, CaseMetrics, case_metrics


class TrainingDivergedError(CalibsegError, RuntimeError):
    def __init__(self, step: int, value: float):
        super().__init__(f"training diverged at step {step} (loss={value})")
        self.step = step
        self.value = value


@dataclass(frozen=True)
class BenchConfig:
    height: int = 32
    width: int = 32
    num_classes: int = 2
    shapes: int = 2
    intensity_means: tuple[float, ...] | None = None
    noise_std: float = 0.5
    label_noise: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.height < 1 or self.width < 1:
            raise InvalidConfigError("height and width must be >= 1")
        if self.num_classes < 2:
            raise InvalidConfigError("need at least 2 classes")
        if self.shapes < 0:
            raise InvalidConfigError("shapes must be >= 0")
        means = self.intensity_means
        if means is None:
            means = tuple(float(k) for k in range(self.num_classes))
        means = tuple(float(m) for m in means)
        object.__setattr__(self, "intensity_means", means)
        if len(set(means)) < self.num_classes or len(means) < self.num_classes:
            raise InvalidConfigError(
                f"need {self.num_classes} distinct intensity means, got {means}"
            )
        if not self.noise_std > 0:
            raise InvalidConfigError("noise_std must be > 0")
        if not 0 <= self.label_noise < 0.5:
            raise InvalidConfigError("label_noise must lie in [0, 0.5)")
        if not 0 <= self.seed < 2**64:
            raise InvalidConfigError("seed must be an unsigned 64-bit integer")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["intensity_means"] = list(self.intensity_means)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "BenchConfig":
        known = {f for f in cls.__dataclass_fields__}
        extra = set(d) - known
        if extra:
            raise InvalidConfigError(f"unknown bench config keys: {sorted(extra)}")
        d = dict(d)
        if d.get("intensity_means") is not None:
            d["intensity_means"] = tuple(d["intensity_means"])
        return cls(**d)


@dataclass
class Case:
    image: np.ndarray          # (H, W, 1)
    labels: LabelMap           # observed (possibly boundary-flipped)
    posterior: np.ndarray      # (H, W, K) Bayes posterior of the clean class
    clean: LabelMap


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


def _paint_shapes(rng, config: BenchConfig) -> np.ndarray:
    h, w = config.height, config.width
    rows, cols = np.mgrid[0:h, 0:w]
    labels = np.zeros((h, w), dtype=np.int64)
    side = min(h, w)
    for k in range(1, config.num_classes):
        for _ in range(config.shapes):
            kind, cy, cx, a, b = rng.random(5)
            cy, cx = cy * (h - 1), cx * (w - 1)
            if kind < 0.5:
                radius = side * (0.12 + 0.13 * a)
                inside = (rows - cy) ** 2 + (cols - cx) ** 2 <= radius ** 2
            else:
                half_h = side * (0.08 + 0.12 * a)
                half_w = side * (0.08 + 0.12 * b)
                inside = (np.abs(rows - cy) <= half_h) & (np.abs(cols - cx) <= half_w)
            labels[inside] = k
    return labels


def _neighbour_classes(labels: np.ndarray, num_classes: int) -> np.ndarray:
    """(H, W, K) flags: some 4-neighbour inside the image has class k."""
    p = np.pad(labels, 1, constant_values=-1)
    nbrs = np.stack([p[:-2, 1:-1], p[2:, 1:-1], p[1:-1, :-2], p[1:-1, 2:]], axis=-1)
    return np.stack([(nbrs == k).any(axis=-1) for k in range(num_classes)], axis=-1)


def _flip_boundaries(rng, clean: np.ndarray, config: BenchConfig) -> np.ndarray:
    k = config.num_classes
    # draw for every pixel so the stream does not depend on the shapes
    flip_u = rng.random(clean.shape)
    pick_u = rng.random(clean.shape)
    candidates = _neighbour_classes(clean, k) & (np.arange(k) != clean[..., None])
    n_cand = candidates.sum(axis=-1)
    flip = (n_cand > 0) & (flip_u < config.label_noise)
    choice = np.minimum((pick_u * n_cand).astype(np.int64), np.maximum(n_cand - 1, 0))
    # index of the choice-th candidate class
    order = np.cumsum(candidates, axis=-1) - 1
    target = np.argmax(candidates & (order == choice[..., None]), axis=-1)
    return np.where(flip, target, clean)


def _posterior(image: np.ndarray, clean: np.ndarray, config: BenchConfig) -> np.ndarray:
    k = config.num_classes
    freq = np.bincount(clean.reshape(-1), minlength=k) / clean.size
    mu = np.asarray(config.intensity_means[:k])
    with np.errstate(divide="ignore"):
        log_prior = np.log(freq)
    log_lik = -((image - mu) ** 2) / (2.0 * config.noise_std ** 2)
    z = log_prior + log_lik
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def generate_dataset(config: BenchConfig, n_cases: int) -> list[Case]:
    if n_cases < 0:
        raise InvalidInputError("n_cases must be >= 0")
    rng = make_rng(config.seed)
    mu = np.asarray(config.intensity_means[: config.num_classes])
    cases = []
    for _ in range(n_cases):
        clean = _paint_shapes(rng, config)
        noise = rng.standard_normal(clean.shape)
        image = (mu[clean] + config.noise_std * noise)[..., None]
        observed = _flip_boundaries(rng, clean, config)
        cases.append(Case(
            image=image,
            labels=LabelMap(observed, config.num_classes),
            posterior=_posterior(image, clean, config),
            clean=LabelMap(clean, config.num_classes),
        ))
    return cases


# -- models -------------------------------------------------------------------


@dataclass
class DirectLogit:
    """Free logit field per case, shape (N, H, W, K)."""

    logits: np.ndarray

    @classmethod
    def zeros(cls, data: list[Case]) -> "DirectLogit":
        if not data:
            raise InvalidInputError("no cases")
        h, w = data[0].labels.shape
        k = data[0].labels.num_classes
        return cls(np.zeros((len(data), h, w, k)))

    def logits_for(self, data: list[Case]) -> list[np.ndarray]:
        if len(data) != self.logits.shape[0]:
            raise InvalidInputError(
                f"direct-logit model holds {self.logits.shape[0]} fields, got {len(data)} cases"
            )
        return list(self.logits)


def pixel_features(image: np.ndarray) -> np.ndarray:
    """(H, W, 2): intensity and 3x3 replicate-padded mean intensity."""
    x = np.asarray(image, dtype=np.float64)[..., 0]
    p = np.pad(x, 1, mode="edge")
    h, w = x.shape
    acc = np.zeros_like(x)
    for i in range(3):
        for j in range(3):
            acc += p[i:i + h, j:j + w]
    return np.stack([x, acc / 9.0], axis=-1)


@dataclass
class LinearPixel:
    """Per-pixel linear model: ``logits = features @ weights.T + bias``."""

    weights: np.ndarray   # (K, F)
    bias: np.ndarray      # (K,)

    @classmethod
    def init(cls, num_classes: int, seed: int = 0, scale: float = 0.01) -> "LinearPixel":
        rng = make_rng(seed)
        return cls(scale * rng.standard_normal((num_classes, 2)), np.zeros(num_classes))

    def logits_for(self, data: list[Case]) -> list[np.ndarray]:
        return [pixel_features(c.image) @ self.weights.T + self.bias for c in data]


@dataclass(frozen=True)
class TrainConfig:
    loss: LossConfig = field(default_factory=lambda: LossConfig(LossKind.CE))
    steps: int = 2000
    lr: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise InvalidConfigError("steps must be >= 1")
        if not self.lr > 0:
            raise InvalidConfigError("learning rate must be > 0")


def _case_losses(logit_fields, data, config: LossConfig, priors):
    out = []
    for logits, case, prior in zip(logit_fields, data, priors):
        if prior is not None:
            out.append(nacl_loss(logits, case.labels, config, prior=prior))
        else:
            out.append(compute_loss(logits, case.labels, config))
    return out


def dataset_loss(model, data: list[Case], config: LossConfig):
    """Mean over cases of the per-case loss, and the per-case results."""
    priors = [nacl_prior(c.labels, config) if config.kind is LossKind.NACL else None for c in data]
    results = _case_losses(model.logits_for(data), data, config, priors)
    return float(np.mean([r.value for r in results])), results


def train(model, data: list[Case], config: TrainConfig):
    """Full-batch gradient descent with a fixed step; returns (model, trace).

    The trace holds the dataset loss before each update.  For ``DirectLogit``
    each pixel's logits only enter that pixel's term, so the step is applied
    to the per-pixel gradient (the learning rate is per pixel, independent of
    image size and case count).  ``LinearPixel`` follows the gradient of the
    mean loss through the chain rule.
    """
    if not data:
        raise InvalidInputError("no training cases")
    loss_cfg = config.loss
    priors = [nacl_prior(c.labels, loss_cfg) if loss_cfg.kind is LossKind.NACL else None for c in data]
    n = len(data)
    trace = np.empty(config.steps)
    if isinstance(model, DirectLogit):
        logits = model.logits_for(data)
        logits = np.array(logits, dtype=np.float64)
        for step in range(config.steps):
            results = _case_losses(logits, data, loss_cfg, priors)
            value = float(np.mean([r.value for r in results]))
            if not np.isfinite(value):
                raise TrainingDivergedError(step, value)
            trace[step] = value
            for i, r in enumerate(results):
                scale = r.per_pixel.size if loss_cfg.reduction == "mean" else 1
                logits[i] -= config.lr * scale * r.grad
            if not np.all(np.isfinite(logits)):
                raise TrainingDivergedError(step, value)
        return DirectLogit(logits), trace
    if isinstance(model, LinearPixel):
        feats = [pixel_features(c.image) for c in data]
        w = np.array(model.weights, dtype=np.float64)
        b = np.array(model.bias, dtype=np.float64)
        for step in range(config.steps):
            with np.errstate(over="ignore", invalid="ignore"):
                fields = [f @ w.T + b for f in feats]
            if not all(np.all(np.isfinite(f)) for f in fields):
                raise TrainingDivergedError(step, float("inf"))
            results = _case_losses(fields, data, loss_cfg, priors)
            value = float(np.mean([r.value for r in results]))
            if not np.isfinite(value):
                raise TrainingDivergedError(step, value)
            trace[step] = value
            gw = np.zeros_like(w)
            gb = np.zeros_like(b)
            for f, r in zip(feats, results):
                g = r.grad.reshape(-1, r.grad.shape[-1])
                gw += g.T @ f.reshape(-1, f.shape[-1])
                gb += g.sum(axis=0)
            w -= config.lr * gw / n
            b -= config.lr * gb / n
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise TrainingDivergedError(step, value)
        return LinearPixel(w, b), trace
    raise InvalidInputError(f"unknown model type {type(model).__name__}")


# -- evaluation ----------------------------------------------------------------


@dataclass
class RunReport:
    cases: list[CaseMetrics]
    mean_dsc: float | None
    mean_hd95: float | None
    mean_ece: float | None
    mean_cece: float
    mean_abs_logit: float
    mean_abs_logit_by_class: dict[int, float | None]
    posterior_mae: float

    def to_dict(self) -> dict:
        return {
            "cases": [c.to_dict() for c in self.cases],
            "mean_dsc": self.mean_dsc,
            "mean_hd95": self.mean_hd95,
            "mean_ece": self.mean_ece,
            "mean_cece": self.mean_cece,
            "mean_abs_logit": self.mean_abs_logit,
            "mean_abs_logit_by_class": {str(k): v for k, v in self.mean_abs_logit_by_class.items()},
            "posterior_mae": self.posterior_mae,
        }


def _mean_or_none(values):
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


def mean_abs_logit_by_class(logit_fields, label_maps, num_classes: int) -> dict[int, float | None]:
    """Mean of ``|l_k|`` over classes k and over pixels whose ground truth is c."""
    sums = np.zeros(num_classes)
    counts = np.zeros(num_classes, dtype=np.int64)
    for logits, labels in zip(logit_fields, label_maps):
        per_pixel = np.abs(logits).mean(axis=-1)
        sums += np.bincount(labels.values.reshape(-1), weights=per_pixel.reshape(-1), minlength=num_classes)
        counts += np.bincount(labels.values.reshape(-1), minlength=num_classes)
    return {c: (float(sums[c] / counts[c]) if counts[c] else None) for c in range(num_classes)}


def evaluate_run(model, data: list[Case], bins: int = DEFAULT_BINS) -> RunReport:
    if not data:
        raise InvalidInputError("no evaluation cases")
    logit_fields = model.logits_for(data)
    probs = [softmax(l) for l in logit_fields]
    cases = [case_metrics(p, c.labels, bins) for p, c in zip(probs, data)]
    k = data[0].labels.num_classes
    return RunReport(
        cases=cases,
        mean_dsc=_mean_or_none(c.mean_dsc for c in cases),
        mean_hd95=_mean_or_none(c.mean_hd95 for c in cases),
        mean_ece=_mean_or_none(c.ece for c in cases),
        mean_cece=float(np.mean([c.cece for c in cases])),
        mean_abs_logit=float(np.mean([np.abs(l).mean() for l in logit_fields])),
        mean_abs_logit_by_class=mean_abs_logit_by_class(logit_fields, [c.labels for c in data], k),
        posterior_mae=float(np.mean([np.abs(p - c.posterior).mean() for p, c in zip(probs, data)])),
    )
