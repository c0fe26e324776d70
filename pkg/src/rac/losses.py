"""Re-weighted, logit-adjusted softmax cross-entropy and balanced metrics.

One loss family covers CE, BalCE, LACE and the margin rule: per-class
weights alpha_y scale each sample's loss, per-class adjustments Delta_y
shift logits (additively for LACE, as a true-class margin for the margin
rule), tau scales the adjustment, and epsilon smooths the one-hot target.
Predictions are always argmax of raw logits; adjustments act only inside
the loss.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .dataspace import ClassStats
from .errors import ValidationError

REWEIGHT_SCHEMES = ("none", "inv_log", "inv_sqrt")


@dataclass
class Logits:
    """Batch of class scores with the branch they came from."""

    values: np.ndarray  # (N_batch, L)
    branch: str = "base"  # base | ret | fused

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValidationError("logits must be a (N_batch, L) matrix")
        if self.branch not in ("base", "ret", "fused"):
            raise ValidationError(f"unknown logits branch {self.branch!r}")


@dataclass
class LossSpec:
    """Parameters of the adjusted cross-entropy family.

    margin=False applies delta additively to every logit row; margin=True
    instead subtracts tau*delta[y] from the true-class logit of each sample.
    """

    alpha: np.ndarray
    delta: np.ndarray
    tau: float = 1.0
    epsilon: float = 0.0
    margin: bool = False
    kind: str = "custom"

    def __post_init__(self):
        self.alpha = np.asarray(self.alpha, dtype=np.float64)
        self.delta = np.asarray(self.delta, dtype=np.float64)
        if self.alpha.shape != self.delta.shape or self.alpha.ndim != 1:
            raise ValidationError("alpha and delta must be 1-d vectors of equal length")
        if (self.alpha <= 0).any():
            raise ValidationError("alpha must be positive elementwise")
        if not np.isfinite(self.delta).all():
            raise ValidationError("delta must be finite")
        if self.tau < 0:
            raise ValidationError("tau must be non-negative")
        if not 0 <= self.epsilon < 1:
            raise ValidationError("label-smoothing epsilon must lie in [0, 1)")

    @property
    def num_classes(self) -> int:
        return len(self.alpha)


class LossResult(NamedTuple):
    loss: float
    grad: np.ndarray  # (N_batch, L), d loss / d logits


def smoothed_targets(labels: np.ndarray, num_classes: int, epsilon: float) -> np.ndarray:
    """t = (1 - epsilon) * onehot + epsilon / L."""
    labels = np.asarray(labels, dtype=np.int64)
    t = np.full((len(labels), num_classes), epsilon / num_classes, dtype=np.float64)
    t[np.arange(len(labels)), labels] += 1.0 - epsilon
    return t


def _log_softmax(g: np.ndarray) -> np.ndarray:
    shifted = g - g.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def adjusted_ce(logits, labels, spec: LossSpec) -> LossResult:
    """Loss and exact gradient of the adjusted cross-entropy family.

    loss = mean_i -alpha_{y_i} * sum_c t_ic log softmax(g_i)_c with
    g = f + tau*delta (or the margin form), t the smoothed target;
    grad = alpha_{y_i} * (softmax(g_i) - t_i) / N_batch.
    """
    values = logits.values if isinstance(logits, Logits) else np.asarray(logits, dtype=np.float64)
    if values.ndim != 2:
        raise ValidationError("logits must be a (N_batch, L) matrix")
    if not np.isfinite(values).all():
        raise ValidationError("logits contain non-finite entries")
    labels = np.asarray(labels, dtype=np.int64)
    n, L = values.shape
    if L != spec.num_classes:
        raise ValidationError(f"spec covers {spec.num_classes} classes, logits have {L}")
    if len(labels) != n:
        raise ValidationError("labels and logits disagree on batch size")
    if labels.min() < 0 or labels.max() >= L:
        raise ValidationError(f"labels must lie in [0, {L})")

    rows = np.arange(n)
    if spec.margin:
        g = values.copy()
        g[rows, labels] -= spec.tau * spec.delta[labels]
    else:
        g = values + spec.tau * spec.delta

    log_p = _log_softmax(g)
    t = smoothed_targets(labels, L, spec.epsilon)
    a = spec.alpha[labels]
    loss = float(np.mean(-a * (t * log_p).sum(axis=1)))
    grad = (a[:, None] / n) * (np.exp(log_p) - t)
    return LossResult(loss, grad)


# ---------------------------------------------------------------------------
# Spec constructors
# ---------------------------------------------------------------------------


def _counts(stats: ClassStats) -> np.ndarray:
    counts = np.asarray(stats.counts, dtype=np.float64)
    if (counts <= 0).any():
        raise ValidationError("loss specs need a positive count for every class")
    return counts


def ce_spec(num_classes: int, epsilon: float = 0.0) -> LossSpec:
    """Plain cross-entropy: unit weights, no adjustment."""
    return LossSpec(
        np.ones(num_classes), np.zeros(num_classes), tau=0.0, epsilon=epsilon, kind="ce"
    )


def balce_spec(stats: ClassStats, epsilon: float = 0.0) -> LossSpec:
    """Count-balanced CE: alpha_y = 1/N_y, no logit adjustment."""
    counts = _counts(stats)
    return LossSpec(
        1.0 / counts, np.zeros(len(counts)), tau=0.0, epsilon=epsilon, kind="balce"
    )


def lace_spec(stats: ClassStats, tau: float = 1.0, epsilon: float = 0.0) -> LossSpec:
    """Logit-adjusted CE: delta_y = ln(N_y / N), unit weights."""
    counts = _counts(stats)
    delta = np.log(counts / counts.sum())
    return LossSpec(np.ones(len(counts)), delta, tau=tau, epsilon=epsilon, kind="lace")


def ldam_spec(stats: ClassStats, tau: float = 1.0, epsilon: float = 0.0) -> LossSpec:
    """Margin rule: subtract tau * N_y^(-1/4) from the true-class logit,
    with alpha_y = 1/N_y."""
    counts = _counts(stats)
    return LossSpec(
        1.0 / counts, counts ** -0.25, tau=tau, epsilon=epsilon, margin=True, kind="ldam"
    )


def make_loss_spec(
    kind: str, stats: ClassStats, tau: float = 1.0, epsilon: float = 0.0,
    reweight_scheme: str = "none",
) -> LossSpec:
    """Build a named member of the loss family, optionally re-weighted."""
    if kind == "ce":
        spec = ce_spec(stats.num_classes, epsilon)
    elif kind == "balce":
        spec = balce_spec(stats, epsilon)
    elif kind == "lace":
        spec = lace_spec(stats, tau, epsilon)
    elif kind == "ldam":
        spec = ldam_spec(stats, tau, epsilon)
    else:
        raise ValidationError(f"unknown loss kind {kind!r}")
    if reweight_scheme != "none":
        spec.alpha = spec.alpha * reweight(stats, reweight_scheme)
        spec.kind = f"{kind}+{reweight_scheme}"
    return spec


def reweight(stats: ClassStats, scheme: str = "none") -> np.ndarray:
    """Per-class weight vector for a named re-weighting scheme."""
    counts = _counts(stats)
    if scheme == "none":
        return np.ones(len(counts))
    if scheme == "inv_sqrt":
        return 1.0 / np.sqrt(counts)
    if scheme == "inv_log":
        # ln 1 = 0 would blow up singleton classes; floor counts at 2.
        return 1.0 / np.log(np.maximum(counts, 2.0))
    raise ValidationError(f"unknown re-weighting scheme {scheme!r}; choose from {REWEIGHT_SCHEMES}")


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


def predictions_from_logits(logits: np.ndarray) -> np.ndarray:
    """Argmax with lowest-index tie-break; no loss adjustment is applied."""
    return np.argmax(np.asarray(logits), axis=1).astype(np.int64)


def per_class_accuracy(predictions, labels, num_classes: int) -> np.ndarray:
    """Accuracy per class; NaN for classes absent from labels."""
    predictions = np.asarray(predictions, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    totals = np.bincount(labels, minlength=num_classes).astype(np.float64)
    hits = np.bincount(labels[predictions == labels], minlength=num_classes).astype(np.float64)
    with np.errstate(invalid="ignore", divide="ignore"):
        acc = hits / totals
    acc[totals == 0] = np.nan
    return acc


def balanced_error(predictions, labels, num_classes: int) -> float:
    """Mean per-class error rate; classes with no samples are excluded."""
    acc = per_class_accuracy(predictions, labels, num_classes)
    missing = np.flatnonzero(np.isnan(acc))
    if len(missing) == num_classes:
        raise ValidationError("balanced_error needs at least one evaluated class")
    if len(missing):
        warnings.warn(
            f"balanced_error: {len(missing)} classes without test samples excluded "
            f"(ids {missing.tolist()[:8]}{'...' if len(missing) > 8 else ''})",
            stacklevel=2,
        )
    return float(1.0 - np.nanmean(acc))


def topk_accuracy(logits, labels, k: int = 1) -> float:
    """Fraction of samples whose label is among the k highest logits.

    Ties at the k-th score resolve toward lower class indexes, matching the
    argmax convention (k=1 agrees with predictions_from_logits exactly).
    """
    values = logits.values if isinstance(logits, Logits) else np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n, L = values.shape
    if not 1 <= k <= L:
        raise ValidationError(f"k must lie in [1, {L}]")
    # stable argsort on (-score, index): lowest index wins ties
    order = np.argsort(-values, axis=1, kind="stable")[:, :k]
    return float(np.mean((order == labels[:, None]).any(axis=1)))


def bucket_accuracy(class_acc: np.ndarray, buckets: list[str]) -> dict[str, float]:
    """Mean per-class accuracy within each frequency bucket plus 'all'.

    Classes with NaN accuracy (no test samples) are skipped; a bucket with
    no evaluated classes is absent from the result rather than zero.
    """
    class_acc = np.asarray(class_acc, dtype=np.float64)
    if len(class_acc) != len(buckets):
        raise ValidationError("per-class accuracies and buckets disagree on length")
    out: dict[str, float] = {}
    for name in ("many", "med", "few"):
        mask = np.array([b == name for b in buckets]) & ~np.isnan(class_acc)
        if mask.any():
            out[name] = float(class_acc[mask].mean())
    valid = ~np.isnan(class_acc)
    if valid.any():
        out["all"] = float(class_acc[valid].mean())
    return out
