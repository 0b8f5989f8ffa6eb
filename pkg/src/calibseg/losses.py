"""Training losses over a logit field with closed-form gradients.

Every loss takes ``(logits, labels, config)`` and returns a :class:`LossResult`
holding the reduced value, the per-pixel values, and the gradient with respect
to the logits.  Reductions are over pixels (``mean`` by default).

The module also carries the identities that recast spatially varying label
smoothing (SVLS) as cross-entropy plus a constraint on neighbourhood class
proportions: :func:`svls_decomposition` and :func:`kl_divergence`.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, fields

import numpy as np

from .core import (
    CalibsegError,
    InvalidConfigError,
    InvalidInputError,
    LabelMap,
    as_field,
    as_kernel,
    check_same_grid,
    class_sum,
    one_hot,
)
from .priors import (
    PriorConfig,
    PriorMode,
    gaussian_kernel,
    kernel_total,
    prior_field,
    svls_soft_labels,
)


class DivergenceInfiniteError(CalibsegError, ValueError):
    """KL(tau || s) is infinite because s has a zero where tau does not."""


class LossKind(str, enum.Enum):
    CE = "ce"
    LS = "ls"
    FL = "fl"
    ECP = "ecp"
    SVLS = "svls"
    MBLS = "mbls"
    NACL = "nacl"


class Penalty(str, enum.Enum):
    LINEAR = "linear"
    QUADRATIC = "quadratic"


class ConstrainOn(str, enum.Enum):
    LOGITS = "logits"
    SOFTMAX = "softmax"


# hyperparameters each loss needs, with their defaults
_PARAMS = {
    LossKind.CE: {},
    LossKind.LS: {"alpha": 0.1},
    LossKind.FL: {"gamma": 3.0},
    LossKind.ECP: {"lam": 0.1},
    LossKind.SVLS: {"sigma": 2.0, "patch_size": 3},
    LossKind.MBLS: {"lam": 0.1, "margin": 5.0},
    LossKind.NACL: {
        "lam": 0.1,
        "prior": PriorConfig(),
        "penalty": Penalty.LINEAR,
        "constrain_on": ConstrainOn.LOGITS,
    },
}
_OPTIONAL = ("lam", "alpha", "gamma", "margin", "sigma", "patch_size", "prior", "penalty", "constrain_on")


@dataclass(frozen=True)
class LossConfig:
    """Loss selection plus exactly the hyperparameters that loss uses.

    Unset hyperparameters of the chosen kind take their defaults; setting one
    the kind does not use is an error.
    """

    kind: LossKind
    lam: float | None = None
    alpha: float | None = None
    gamma: float | None = None
    margin: float | None = None
    sigma: float | None = None
    patch_size: int | None = None
    prior: PriorConfig | None = None
    penalty: Penalty | None = None
    constrain_on: ConstrainOn | None = None
    reduction: str = "mean"

    def __post_init__(self):
        try:
            kind = LossKind(self.kind)
        except ValueError as exc:
            raise InvalidConfigError(f"unknown loss kind {self.kind!r}") from exc
        object.__setattr__(self, "kind", kind)
        wanted = _PARAMS[kind]
        for name in _OPTIONAL:
            value = getattr(self, name)
            if name not in wanted:
                if value is not None:
                    raise InvalidConfigError(f"{kind.value} loss takes no {name!r}")
            elif value is None:
                object.__setattr__(self, name, wanted[name])
        if self.penalty is not None:
            object.__setattr__(self, "penalty", Penalty(self.penalty))
        if self.constrain_on is not None:
            object.__setattr__(self, "constrain_on", ConstrainOn(self.constrain_on))
        self._validate()

    def _validate(self):
        if self.reduction not in ("mean", "sum"):
            raise InvalidConfigError(f"reduction must be 'mean' or 'sum', got {self.reduction!r}")
        if self.lam is not None and not self.lam >= 0:
            raise InvalidConfigError(f"lambda must be >= 0, got {self.lam}")
        if self.alpha is not None and not 0 <= self.alpha < 1:
            raise InvalidConfigError(f"alpha must lie in [0, 1), got {self.alpha}")
        if self.gamma is not None and not self.gamma >= 0:
            raise InvalidConfigError(f"gamma must be >= 0, got {self.gamma}")
        if self.margin is not None and not self.margin >= 0:
            raise InvalidConfigError(f"margin must be >= 0, got {self.margin}")
        if self.sigma is not None and not self.sigma > 0:
            raise InvalidConfigError(f"sigma must be > 0, got {self.sigma}")
        if self.patch_size is not None and (self.patch_size < 1 or self.patch_size % 2 == 0):
            raise InvalidConfigError(f"patch_size must be odd, got {self.patch_size}")
        if self.prior is not None and not isinstance(self.prior, PriorConfig):
            raise InvalidConfigError("prior must be a PriorConfig")

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            value = getattr(self, f.name)
            if value is None:
                continue
            if isinstance(value, enum.Enum):
                value = value.value
            elif isinstance(value, PriorConfig):
                value = {
                    "mode": value.mode.value,
                    "patch_size": value.patch_size,
                    "sigma": value.sigma,
                    "normalize": value.normalize,
                }
            out[f.name] = value
        return out


@dataclass
class LossResult:
    value: float
    grad: np.ndarray
    per_pixel: np.ndarray = field(repr=False)


# Log-probabilities are floored at log(1e-300).  Gradients are the analytic
# ones of the unfloored loss; the two differ only past a ~690 nat logit gap.
LOG_FLOOR = math.log(1e-300)


def _prepare(logits, labels: LabelMap):
    logits = as_field(logits, "logits")
    check_same_grid(logits, labels)
    z = logits - logits.max(axis=-1, keepdims=True)
    log_s = z - np.log(class_sum(np.exp(z)))
    return logits, np.exp(log_s), np.maximum(log_s, LOG_FLOOR)


def _reduce(per_pixel: np.ndarray, grad: np.ndarray, config: LossConfig) -> LossResult:
    if config.reduction == "mean":
        n = per_pixel.size
        return LossResult(float(np.mean(per_pixel)), grad / n, per_pixel)
    return LossResult(float(np.sum(per_pixel)), grad, per_pixel)


def _soft_target_ce(logits, labels, config, target):
    _, s, log_s = _prepare(logits, labels)
    per_pixel = -np.sum(target * log_s, axis=-1)
    return _reduce(per_pixel, s - target, config)


def ce_loss(logits, labels: LabelMap, config: LossConfig | None = None) -> LossResult:
    config = config or LossConfig(LossKind.CE)
    return _soft_target_ce(logits, labels, config, one_hot(labels))


def ls_loss(logits, labels: LabelMap, config: LossConfig | None = None) -> LossResult:
    """Cross-entropy against ``(1 - alpha) * y + alpha / K``."""
    config = config or LossConfig(LossKind.LS)
    target = (1.0 - config.alpha) * one_hot(labels) + config.alpha / labels.num_classes
    return _soft_target_ce(logits, labels, config, target)


def fl_loss(logits, labels: LabelMap, config: LossConfig | None = None) -> LossResult:
    """Focal loss ``-(1 - s_y)^gamma log s_y``."""
    config = config or LossConfig(LossKind.FL)
    gamma = config.gamma
    _, s, log_s = _prepare(logits, labels)
    y = one_hot(labels)
    p = np.sum(s * y, axis=-1, keepdims=True)
    log_p = np.sum(log_s * y, axis=-1, keepdims=True)
    q = 1.0 - p
    per_pixel = -(q ** gamma * log_p)[..., 0]
    # d/dl_k = [gamma (1-p)^(gamma-1) p log p - (1-p)^gamma] (y_k - s_k)
    if gamma == 0:
        coef = -np.ones_like(p)
    else:
        with np.errstate(divide="ignore", invalid="ignore"):
            lead = np.where(q > 0, gamma * q ** (gamma - 1.0) * p * log_p, 0.0)
        coef = lead - q ** gamma
    return _reduce(per_pixel, coef * (y - s), config)


def ecp_loss(logits, labels: LabelMap, config: LossConfig | None = None) -> LossResult:
    """Cross-entropy minus ``lam`` times the softmax entropy."""
    config = config or LossConfig(LossKind.ECP)
    lam = config.lam
    _, s, log_s = _prepare(logits, labels)
    y = one_hot(labels)
    entropy = -np.sum(s * log_s, axis=-1, keepdims=True)
    per_pixel = -np.sum(y * log_s, axis=-1) - lam * entropy[..., 0]
    grad = s - y + lam * s * (log_s + entropy)
    return _reduce(per_pixel, grad, config)


def svls_targets(labels: LabelMap, config: LossConfig) -> np.ndarray:
    return svls_soft_labels(labels, gaussian_kernel(config.patch_size, config.sigma))


def svls_loss(logits, labels: LabelMap, config: LossConfig | None = None) -> LossResult:
    """Cross-entropy against Gaussian-smoothed labels of each pixel's neighbourhood."""
    config = config or LossConfig(LossKind.SVLS)
    return _soft_target_ce(logits, labels, config, svls_targets(labels, config))


def mbls_loss(logits, labels: LabelMap, config: LossConfig | None = None) -> LossResult:
    """Cross-entropy plus ``lam * sum_k relu(max_j l_j - l_k - margin)``."""
    config = config or LossConfig(LossKind.MBLS)
    logits, s, log_s = _prepare(logits, labels)
    y = one_hot(labels)
    top = np.argmax(logits, axis=-1)
    violation = logits.max(axis=-1, keepdims=True) - logits - config.margin
    active = (violation > 0).astype(np.float64)
    per_pixel = -np.sum(y * log_s, axis=-1) + config.lam * np.sum(np.maximum(violation, 0.0), axis=-1)
    hinge_grad = -active
    np.put_along_axis(
        hinge_grad, top[..., None],
        np.take_along_axis(hinge_grad, top[..., None], axis=-1) + active.sum(axis=-1, keepdims=True),
        axis=-1,
    )
    return _reduce(per_pixel, s - y + config.lam * hinge_grad, config)


def nacl_prior(labels: LabelMap, config: LossConfig) -> np.ndarray:
    return prior_field(labels, config.prior)


def nacl_loss(logits, labels: LabelMap, config: LossConfig | None = None, prior=None) -> LossResult:
    """Cross-entropy plus ``lam * sum_k P(|tau_k - t_k|)`` with ``t`` the logits
    (or softmax) and ``tau`` the neighbourhood prior.

    ``P`` is the identity (linear penalty) or the square.  The subgradient of
    ``|tau_k - l_k|`` at zero is taken as 0.  ``prior`` overrides the prior
    field computed from ``labels``.
    """
    config = config or LossConfig(LossKind.NACL)
    logits, s, log_s = _prepare(logits, labels)
    y = one_hot(labels)
    tau = nacl_prior(labels, config) if prior is None else as_field(prior, "prior")
    if tau.shape != logits.shape:
        raise InvalidInputError(f"prior shape {tau.shape} does not match logits {logits.shape}")
    t = logits if config.constrain_on is ConstrainOn.LOGITS else s
    diff = t - tau
    if config.penalty is Penalty.LINEAR:
        penalty = np.abs(diff)
        dpen = np.sign(diff)
    else:
        penalty = diff * diff
        dpen = 2.0 * diff
    if config.constrain_on is ConstrainOn.SOFTMAX:
        # chain through the softmax Jacobian: s_j (g_j - sum_k g_k s_k)
        dpen = s * (dpen - np.sum(dpen * s, axis=-1, keepdims=True))
    per_pixel = -np.sum(y * log_s, axis=-1) + config.lam * np.sum(penalty, axis=-1)
    return _reduce(per_pixel, s - y + config.lam * dpen, config)


_DISPATCH = {
    LossKind.CE: ce_loss,
    LossKind.LS: ls_loss,
    LossKind.FL: fl_loss,
    LossKind.ECP: ecp_loss,
    LossKind.SVLS: svls_loss,
    LossKind.MBLS: mbls_loss,
    LossKind.NACL: nacl_loss,
}


def compute_loss(logits, labels: LabelMap, config: LossConfig) -> LossResult:
    return _DISPATCH[config.kind](logits, labels, config)


def kink_mask(logits, labels: LabelMap, config: LossConfig, tol: float = 1e-3) -> np.ndarray:
    """Pixels within ``tol`` of a point where the loss is not differentiable."""
    logits = as_field(logits, "logits")
    mask = np.zeros(labels.shape, dtype=bool)
    if config.kind is LossKind.MBLS:
        top2 = np.sort(logits, axis=-1)[..., -2:]
        violation = logits.max(axis=-1, keepdims=True) - logits - config.margin
        mask |= np.any(np.abs(violation) < tol, axis=-1)
        mask |= (top2[..., 1] - top2[..., 0]) < tol
    elif config.kind is LossKind.NACL and config.penalty is Penalty.LINEAR:
        tau = nacl_prior(labels, config)
        t = logits if config.constrain_on is ConstrainOn.LOGITS else _prepare(logits, labels)[1]
        mask |= np.any(np.abs(t - tau) < tol, axis=-1)
    return mask


def default_config(kind) -> LossConfig:
    return LossConfig(LossKind(kind))


# -- SVLS as a constrained problem ---------------------------------------------


@dataclass(frozen=True)
class SvlsDecomposition:
    ce_term: float
    constraint_term: float
    total: float
    tau: np.ndarray


def svls_decomposition(patch: LabelMap, kernel, logits) -> SvlsDecomposition:
    """Split the SVLS loss at the centre pixel of ``patch`` into the hard-label
    cross-entropy and the cross-entropy against ``tau``, the kernel-weighted
    class counts of the surrounding pixels (centre excluded).

    ``total = (w_c * ce_term + constraint_term) / sum(w)`` where ``w_c`` is the
    centre weight (1 for :func:`gaussian_kernel`).
    """
    w = as_kernel(kernel)
    d1, d2 = w.shape
    if patch.shape != w.shape:
        raise InvalidInputError(f"patch shape {patch.shape} does not match kernel shape {w.shape}")
    logits = np.asarray(logits, dtype=np.float64).reshape(-1)
    if logits.size != patch.num_classes or not np.all(np.isfinite(logits)):
        raise InvalidInputError("logits must be a finite vector of length K")
    z = logits - logits.max()
    log_s = np.maximum(z - np.log(class_sum(np.exp(z))), LOG_FLOOR)
    y = one_hot(patch)
    centre = (d1 // 2, d2 // 2)
    neighbours = w.copy()
    neighbours[centre] = 0.0
    tau = np.einsum("ij,ijk->k", neighbours, y)
    ce_term = -float(np.dot(y[centre], log_s))
    constraint_term = -float(np.dot(tau, log_s))
    total = (w[centre] * ce_term + constraint_term) / kernel_total(w)
    return SvlsDecomposition(ce_term, constraint_term, total, tau)


def kl_divergence(tau, s) -> float:
    """``sum_k tau_k log(tau_k / s_k)`` with ``0 log 0 = 0``."""
    tau = np.asarray(tau, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    if tau.shape != s.shape:
        raise InvalidInputError(f"shape mismatch {tau.shape} vs {s.shape}")
    if np.any(tau < 0) or np.any(s < 0):
        raise InvalidInputError("tau and s must be nonnegative")
    support = tau > 0
    if np.any(s[support] == 0):
        raise DivergenceInfiniteError("s is zero where tau is positive")
    return float(np.sum(tau[support] * np.log(tau[support] / s[support])))


def entropy(p) -> float:
    p = np.asarray(p, dtype=np.float64)
    nz = p > 0
    return float(-np.sum(p[nz] * np.log(p[nz])))


__all__ = [
    "ConstrainOn",
    "DivergenceInfiniteError",
    "LossConfig",
    "LossKind",
    "LossResult",
    "Penalty",
    "PriorMode",
    "SvlsDecomposition",
    "ce_loss",
    "compute_loss",
    "ecp_loss",
    "entropy",
    "fl_loss",
    "kink_mask",
    "kl_divergence",
    "ls_loss",
    "mbls_loss",
    "nacl_loss",
    "svls_decomposition",
    "svls_loss",
]
