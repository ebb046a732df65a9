"""Composite detection loss: cross-entropy classification, length-scaled
localization, and a retrieval term driven by overlap-ranked mAP.

Classification and localization errors are summed over (detection,
ground truth) pairs produced by best-overlap assignment; the retrieval
term is one minus the overlap-ranked mAP of the whole detection set.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .segmetrics import Detection, GroundTruthSet, Segment, assign, mean_ap

PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class LossWeights:
    lambda_cls: float = 1.0
    lambda_loc: float = 1.0
    lambda_ret: float = 0.5

    def __post_init__(self) -> None:
        if min(self.lambda_cls, self.lambda_loc, self.lambda_ret) < 0:
            raise ValueError("loss weights must be nonnegative")


@dataclass(frozen=True)
class LossBreakdown:
    """Per-term loss values; ``cls`` and ``loc`` are already summed over
    matched pairs, ``ret`` lies in [0, 1]."""

    cls: float
    loc: float
    ret: float
    total: float


def one_hot(label: int, size: int) -> np.ndarray:
    vec = np.zeros(size)
    vec[label] = 1.0
    return vec


def cls_error(pred_probs: np.ndarray, target_onehot: np.ndarray) -> float:
    """Multi-class cross entropy with probabilities floored at 1e-12."""
    pred = np.asarray(pred_probs, dtype=float)
    target = np.asarray(target_onehot, dtype=float)
    if pred.shape != target.shape:
        raise ValueError("probability vectors have mismatched dimensions")
    return float(-(target * np.log(np.maximum(pred, PROB_FLOOR))).sum())


def cls_error_grad(pred_probs: np.ndarray, target_onehot: np.ndarray) -> np.ndarray:
    """Gradient of cls_error in the predicted probabilities.

    Zero wherever the floor clips the probability."""
    pred = np.asarray(pred_probs, dtype=float)
    target = np.asarray(target_onehot, dtype=float)
    if pred.shape != target.shape:
        raise ValueError("probability vectors have mismatched dimensions")
    return np.where(pred > PROB_FLOOR, -target / np.maximum(pred, PROB_FLOOR), 0.0)


def inverse_length_scale(gt_length: float) -> float:
    """Default length scaling: short ground truths get proportionally
    larger penalties for the same absolute boundary error."""
    return 1.0 / gt_length


def boundary_distance(pred: Segment, gt: Segment) -> float:
    """Mean absolute endpoint error in normalized time."""
    return 0.5 * (abs(pred.start - gt.start) + abs(pred.end - gt.end))


def loc_error(
    pred: Segment,
    gt: Segment,
    length_scale: Callable[[float], float] | None = None,
    distance: Callable[[Segment, Segment], float] | None = None,
) -> float:
    """Length-scaled localization error between a prediction and its
    assigned ground truth. The scale and distance are overridable; the
    defaults are inverse ground-truth length and mean absolute endpoint
    error."""
    if gt.length <= 0.0:
        raise ValueError("ground truth segment has zero length")
    scale = (length_scale or inverse_length_scale)(gt.length)
    dist = (distance or boundary_distance)(pred, gt)
    return scale * dist


def loc_error_grad(pred: Segment, gt: Segment) -> tuple[float, float]:
    """Subgradient of the default loc_error in (pred.start, pred.end)."""
    if gt.length <= 0.0:
        raise ValueError("ground truth segment has zero length")
    scale = 0.5 / gt.length
    return (
        scale * float(np.sign(pred.start - gt.start)),
        scale * float(np.sign(pred.end - gt.end)),
    )


def retrieval_error(
    dets: list[Detection], gts: GroundTruthSet, tau_iou: float
) -> float:
    """One minus the overlap-ranked mAP; an empty detection set scores 1."""
    if len(gts) == 0:
        raise ValueError("retrieval error needs a nonempty ground truth set")
    if not dets:
        return 1.0
    return 1.0 - mean_ap([dets], [gts], tau_iou, ranking="overlap")


def match_detections(
    dets: list[Detection], gts: GroundTruthSet
) -> list[int | None]:
    """Best-overlap ground-truth index per detection (None when IoU 0)."""
    return [assign(det, gts) for det in dets]


def total_loss(
    dets: list[Detection],
    gts: GroundTruthSet,
    weights: LossWeights = LossWeights(),
    tau_iou: float = 0.5,
) -> LossBreakdown:
    """Weighted sum of the three error terms over a detection set.

    Background-argmax detections are expected to have been discarded by
    the caller; they would otherwise be matched like any other.
    """
    cls_sum = 0.0
    loc_sum = 0.0
    for det, g_idx in zip(dets, match_detections(dets, gts)):
        if g_idx is None:
            continue
        gt = gts.items[g_idx]
        cls_sum += cls_error(det.class_probs, one_hot(gt.label, det.class_probs.shape[0]))
        loc_sum += loc_error(det.segment, gt.segment)
    ret = retrieval_error(dets, gts, tau_iou)
    total = (
        weights.lambda_cls * cls_sum
        + weights.lambda_loc * loc_sum
        + weights.lambda_ret * ret
    )
    return LossBreakdown(cls=cls_sum, loc=loc_sum, ret=ret, total=total)
