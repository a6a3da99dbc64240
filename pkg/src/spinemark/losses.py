"""Multi-task losses: summed binary cross-entropy over softmax outputs for
identification, Iverson-masked smooth L1 for localization, and their
weighted sums (per sample and accumulated over a sequence)."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

N_CLASSES = 27
BACKGROUND = N_CLASSES - 1
EPS = 1e-12


@dataclass(frozen=True)
class SampleTarget:
    label: int
    centroid_offset: tuple[float, float, float] = (0.0, 0.0, 0.0)

    @property
    def positive(self) -> bool:
        return self.label != BACKGROUND

    def onehot(self, n_classes: int = N_CLASSES) -> np.ndarray:
        y = np.zeros(n_classes)
        y[self.label] = 1.0
        return y


@dataclass(frozen=True)
class LossReport:
    id_loss: float
    loc_loss: float
    total: float
    positive_count: int
    lam: float


def _labels(targets) -> np.ndarray:
    return np.array([t.label if isinstance(t, SampleTarget) else int(t) for t in targets], dtype=int)


def _onehots(labels: np.ndarray, n_classes: int) -> np.ndarray:
    y = np.zeros((len(labels), n_classes))
    y[np.arange(len(labels)), labels] = 1.0
    return y


def identification_loss(probs, targets) -> float:
    """Mean over samples of the per-class binary cross-entropy summed over
    all classes, on probabilities clamped to ``[EPS, 1 - EPS]``."""
    probs = np.atleast_2d(np.asarray(probs, dtype=np.float64))
    labels = _labels(targets)
    if len(labels) == 0 or probs.shape[0] == 0:
        raise ValueError("identification_loss needs at least one sample")
    if probs.shape[0] != len(labels):
        raise ValueError(f"{probs.shape[0]} predictions for {len(labels)} targets")
    sums = probs.sum(axis=1)
    if np.any(np.abs(sums - 1.0) > 1e-6) or np.any(probs < 0):
        bad = int(np.argmax(np.abs(sums - 1.0)))
        raise ValueError(f"prediction {bad} is not a probability vector (sums to {sums[bad]!r})")
    y = _onehots(labels, probs.shape[1])
    f = np.clip(probs, EPS, 1.0 - EPS)
    per_sample = -(y * np.log(f) + (1.0 - y) * np.log(1.0 - f)).sum(axis=1)
    return float(per_sample.mean())


def identification_loss_grad(logits, targets) -> np.ndarray:
    """Gradient of ``identification_loss(softmax(logits), targets)`` w.r.t. the logits."""
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    labels = _labels(targets)
    n = len(labels)
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    f = e / e.sum(axis=1, keepdims=True)
    y = _onehots(labels, f.shape[1])
    fc = np.clip(f, EPS, 1.0 - EPS)
    inside = (f > EPS) & (f < 1.0 - EPS)
    # a_j = f_j * dL/df_j, with the clamp's zero derivative outside its range
    dl_df = np.where(inside, -y / fc + (1.0 - y) / (1.0 - fc), 0.0)
    a = f * dl_df
    grad = a - f * a.sum(axis=1, keepdims=True)
    return grad / n


def smooth_l1(x):
    x = np.asarray(x, dtype=np.float64)
    ax = np.abs(x)
    out = np.where(ax < 1.0, 0.5 * x * x, ax - 0.5)
    return float(out) if out.ndim == 0 else out


def smooth_l1_grad(x):
    x = np.asarray(x, dtype=np.float64)
    return np.where(np.abs(x) < 1.0, x, np.sign(x))


def _loc_parts(pred_offsets, targets):
    pred = np.atleast_2d(np.asarray(pred_offsets, dtype=np.float64))
    if len(targets) == 0:
        raise ValueError("localization_loss needs at least one sample")
    if pred.shape != (len(targets), 3):
        raise ValueError(f"expected predicted offsets of shape ({len(targets)}, 3), got {pred.shape}")
    gt = np.array([t.centroid_offset for t in targets], dtype=np.float64)
    mask = np.array([t.positive for t in targets])
    return pred, gt, mask


def localization_loss(pred_offsets, targets) -> tuple[float, int]:
    """Smooth-L1 over positive samples only, normalised by their count m.

    Returns ``(loss, m)``; an all-background batch gives ``(0.0, 0)``.
    """
    pred, gt, mask = _loc_parts(pred_offsets, targets)
    m = int(mask.sum())
    if m == 0:
        return 0.0, 0
    diff = gt[mask] - pred[mask]
    return float(smooth_l1(diff).sum() / m), m


def localization_loss_grad(pred_offsets, targets) -> np.ndarray:
    pred, gt, mask = _loc_parts(pred_offsets, targets)
    m = int(mask.sum())
    grad = np.zeros_like(pred)
    if m:
        grad[mask] = -smooth_l1_grad(gt[mask] - pred[mask]) / m
    return grad


def total_loss(id_loss: float, loc_loss: float, lam: float) -> float:
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    return id_loss + lam * loc_loss


def sequence_loss(per_step_id, per_step_loc, lam: float) -> float:
    ids = list(per_step_id)
    locs = list(per_step_loc)
    if len(ids) != len(locs):
        raise ValueError(f"length mismatch: {len(ids)} id terms vs {len(locs)} loc terms")
    if not ids:
        raise ValueError("sequence_loss needs T >= 1")
    return float(sum(total_loss(i, l, lam) for i, l in zip(ids, locs)))


def multitask_loss(logits, offsets, targets, lam: float) -> tuple[LossReport, np.ndarray, np.ndarray]:
    """Loss report plus gradients w.r.t. logits and predicted offsets."""
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    z = logits - logits.max(axis=1, keepdims=True)
    probs = np.exp(z)
    probs /= probs.sum(axis=1, keepdims=True)
    lid = identification_loss(probs, targets)
    lloc, m = localization_loss(offsets, targets)
    report = LossReport(lid, lloc, total_loss(lid, lloc, lam), m, lam)
    return report, identification_loss_grad(logits, targets), lam * localization_loss_grad(offsets, targets)
