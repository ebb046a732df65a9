"""Temporal segment types, IoU, ground-truth assignment, and AP/mAP.

Two ranking conventions are supported when scoring a detection list:
``"overlap"`` orders detections by their best IoU against the ground
truth (the variant used inside the training loss), ``"confidence"``
orders by predicted class probability (the usual evaluation protocol).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Literal

import numpy as np

Ranking = Literal["overlap", "confidence"]

PROB_TOL = 1e-6


@dataclass(frozen=True)
class Segment:
    """Temporal extent in normalized [0, 1] time."""

    start: float
    end: float

    def __post_init__(self) -> None:
        if not (0.0 <= self.start <= self.end <= 1.0):
            raise ValueError(f"invalid segment ({self.start}, {self.end})")

    @property
    def length(self) -> float:
        return self.end - self.start


@dataclass(frozen=True, eq=False)
class Detection:
    """A predicted segment with a class distribution over K+1 labels.

    Index 0 of ``class_probs`` is the background class.
    """

    segment: Segment
    class_probs: np.ndarray
    step_index: int

    def __post_init__(self) -> None:
        probs = np.asarray(self.class_probs, dtype=float)
        object.__setattr__(self, "class_probs", probs)
        if probs.ndim != 1:
            raise ValueError("class_probs must be a vector")
        if np.any(probs < 0) or abs(float(probs.sum()) - 1.0) > PROB_TOL:
            raise ValueError("class_probs must be a probability distribution")
        if self.step_index < 1:
            raise ValueError("step_index must be >= 1")

    @property
    def predicted_class(self) -> int:
        return int(np.argmax(self.class_probs))

    @property
    def confidence(self) -> float:
        return float(self.class_probs[self.predicted_class])


@dataclass(frozen=True)
class GroundTruthSegment:
    """A labeled reference segment; labels are 1..K, never background."""

    segment: Segment
    label: int

    def __post_init__(self) -> None:
        if self.label < 1:
            raise ValueError("ground truth label must be a foreground class (>= 1)")


@dataclass(frozen=True)
class GroundTruthSet:
    """Reference segments of one video; the generator guarantees that
    their pairwise temporal overlap is zero."""

    items: tuple[GroundTruthSegment, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "items", tuple(self.items))

    def __len__(self) -> int:
        return len(self.items)

    def __iter__(self) -> Iterator[GroundTruthSegment]:
        return iter(self.items)

    @property
    def labels(self) -> list[int]:
        return sorted({g.label for g in self.items})


def iou(a: Segment, b: Segment) -> float:
    """Intersection over union of two segments.

    Two identical zero-length segments count as a perfect match (1.0);
    any other empty intersection gives 0.
    """
    inter = min(a.end, b.end) - max(a.start, b.start)
    if inter <= 0.0:
        if a.start == b.start and a.end == b.end:
            return 1.0
        return 0.0
    union = max(a.end, b.end) - min(a.start, b.start)
    return inter / union


def assign(det: Detection, gts: GroundTruthSet) -> int | None:
    """Index of the best-overlapping ground truth, or None when nothing
    overlaps. Ties are broken toward the lowest index."""
    best_idx: int | None = None
    best = 0.0
    for idx, gt in enumerate(gts):
        value = iou(det.segment, gt.segment)
        if value > best:
            best = value
            best_idx = idx
    return best_idx


@dataclass(frozen=True)
class APResult:
    """AP for one class; ``class_present`` is False when the ground truth
    contains no segment of that class (AP is then defined as 0)."""

    ap: float
    class_present: bool


def _ranking_keys(
    cands: list[tuple[int, Detection]],
    gts_per_video: list[GroundTruthSet],
    class_index: int,
    ranking: Ranking,
) -> list[float]:
    if ranking == "overlap":
        return [
            max((iou(det.segment, g.segment) for g in gts_per_video[vid]), default=0.0)
            for vid, det in cands
        ]
    if ranking == "confidence":
        return [float(det.class_probs[class_index]) for _, det in cands]
    raise ValueError(f"unknown ranking mode {ranking!r}")


def _pooled_ap(
    dets_per_video: list[list[Detection]],
    gts_per_video: list[GroundTruthSet],
    class_index: int,
    tau_iou: float,
    ranking: Ranking,
) -> APResult:
    if not 0.0 < tau_iou < 1.0:
        raise ValueError("tau_iou must lie in (0, 1)")
    num_gt = sum(1 for gts in gts_per_video for g in gts if g.label == class_index)
    if num_gt == 0:
        return APResult(0.0, class_present=False)

    cands = [
        (vid, det)
        for vid, dets in enumerate(dets_per_video)
        for det in dets
        if det.predicted_class == class_index
    ]
    keys = _ranking_keys(cands, gts_per_video, class_index, ranking)
    # Stable sort: equal keys keep video/insertion order.
    order = sorted(range(len(cands)), key=lambda i: -keys[i])

    claimed: set[tuple[int, int]] = set()
    ap = 0.0
    true_pos = 0
    for rank, i in enumerate(order, start=1):
        vid, det = cands[i]
        gts = gts_per_video[vid]
        g_idx = assign(det, gts)
        hit = (
            g_idx is not None
            and gts.items[g_idx].label == class_index
            and iou(det.segment, gts.items[g_idx].segment) >= tau_iou
            and (vid, g_idx) not in claimed
        )
        if hit:
            claimed.add((vid, g_idx))
            true_pos += 1
            # precision at this rank times the recall gained here
            ap += (true_pos / rank) * (1.0 / num_gt)
    return APResult(ap, class_present=True)


def average_precision(
    dets: list[Detection],
    gts: GroundTruthSet,
    class_index: int,
    tau_iou: float,
    ranking: Ranking = "overlap",
) -> APResult:
    """AP of one class on a single video.

    Detections whose argmax class equals ``class_index`` are ranked
    (stable sort, descending key) and matched greedily in rank order: a
    detection is a true positive when its best-overlap ground truth has
    the matching class, clears ``tau_iou``, and is still unclaimed.
    Recall counts claimed ground truths.
    """
    return _pooled_ap([dets], [gts], class_index, tau_iou, ranking)


def per_class_ap(
    dets_per_video: list[list[Detection]],
    gts_per_video: list[GroundTruthSet],
    tau_iou: float,
    ranking: Ranking = "confidence",
) -> dict[int, float]:
    """AP per class, pooled over videos, for every class present in the
    ground truth."""
    classes = sorted({g.label for gts in gts_per_video for g in gts})
    return {
        c: _pooled_ap(dets_per_video, gts_per_video, c, tau_iou, ranking).ap
        for c in classes
    }


def mean_ap(
    dets_per_video: list[list[Detection]],
    gts_per_video: list[GroundTruthSet],
    tau_iou: float,
    ranking: Ranking = "confidence",
) -> float:
    """Unweighted mean of per-class AP over classes present in the
    ground truth. Raises when no ground truth exists anywhere."""
    table = per_class_ap(dets_per_video, gts_per_video, tau_iou, ranking)
    if not table:
        raise ValueError("no ground truth segments present in any video")
    return float(np.mean(list(table.values())))
