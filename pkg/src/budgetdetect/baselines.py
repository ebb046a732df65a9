"""Comparison systems: per-frame classifiers (dense softmax or two-layer
LSTM) aggregated by 1-D non-maximum suppression, and the linear
boundary-regression refinement over uniformly sampled in-segment frames.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffkit import (
    GradTape,
    HeadSeeds,
    NetConfig,
    ParamSet,
    adam_init_arrays,
    adam_update,
    heads_backward,
    heads_forward,
    init_params,
    lstm_backward,
    lstm_forward,
    softmax,
)
from .envsim import FeatureVideo
from .segmetrics import Detection, GroundTruthSet, Segment, assign, iou

VARIANTS = ("dense", "lstm")


def frame_labels(video: FeatureVideo, gts: GroundTruthSet) -> np.ndarray:
    """Per-frame class labels: a frame belongs to a ground truth segment
    when its normalized position lies inside the segment extent, else
    background (0)."""
    labels = np.zeros(video.num_frames, dtype=int)
    for i in range(video.num_frames):
        t = video.frame_time(i)
        for g in gts:
            if g.segment.start <= t <= g.segment.end:
                labels[i] = g.label
                break
    return labels


def _classifier_inputs(video: FeatureVideo, use_diff: bool) -> np.ndarray:
    if not use_diff:
        return video.frames
    if video.diff is None:
        raise ValueError("video has no frame-difference channel")
    return np.concatenate([video.frames, video.diff], axis=1)


@dataclass
class FrameClassifier:
    variant: str
    num_labels: int
    use_diff: bool
    dense_arrays: dict[str, np.ndarray] | None = None
    lstm_params: ParamSet | None = None


def frame_probs(clf: FrameClassifier, video: FeatureVideo) -> np.ndarray:
    """(num_frames, num_labels) class distributions."""
    x = _classifier_inputs(video, clf.use_diff)
    if clf.variant == "dense":
        logits = x @ clf.dense_arrays["W"] + clf.dense_arrays["b"]
        return softmax(logits)
    hs, _caches, _state = lstm_forward(clf.lstm_params, list(x))
    return np.stack([heads_forward(clf.lstm_params, h).class_probs for h in hs])


def train_frame_classifier(
    dataset: list[tuple[FeatureVideo, GroundTruthSet]],
    variant: str = "dense",
    use_diff: bool = False,
    num_labels: int | None = None,
    epochs: int = 30,
    batch_size: int = 256,
    learning_rate: float = 1e-2,
    hidden_size: int = 32,
    num_layers: int = 2,
    seed: int = 0,
) -> FrameClassifier:
    """Cross-entropy training of a per-frame classifier with Adam."""
    if variant not in VARIANTS:
        raise ValueError(f"variant must be one of {VARIANTS}")
    if num_labels is None:
        num_labels = 1 + max(g.label for _, gts in dataset for g in gts)
    rng = np.random.default_rng(seed)

    if variant == "dense":
        x = np.concatenate([_classifier_inputs(v, use_diff) for v, _ in dataset])
        y = np.concatenate([frame_labels(v, g) for v, g in dataset])
        dim = x.shape[1]
        arrays = {
            "W": rng.uniform(-1, 1, size=(dim, num_labels)) / np.sqrt(dim),
            "b": np.zeros(num_labels),
        }
        opt = adam_init_arrays(arrays, learning_rate=learning_rate)
        onehot = np.eye(num_labels)[y]
        for _ in range(epochs):
            order = rng.permutation(len(x))
            for lo in range(0, len(order), batch_size):
                pick = order[lo : lo + batch_size]
                xb, tb = x[pick], onehot[pick]
                probs = softmax(xb @ arrays["W"] + arrays["b"])
                d_logits = (probs - tb) / len(pick)
                grads = {"W": xb.T @ d_logits, "b": d_logits.sum(axis=0)}
                adam_update(arrays, grads, opt)
        return FrameClassifier(variant, num_labels, use_diff, dense_arrays=arrays)

    dim = dataset[0][0].feature_dim * (2 if use_diff else 1)
    config = NetConfig(
        input_dim=dim,
        hidden_size=hidden_size,
        num_layers=num_layers,
        num_classes=num_labels,
    )
    params = init_params(config, rng)
    opt = adam_init_arrays(params.arrays, learning_rate=learning_rate)
    videos_per_batch = 4
    for _ in range(epochs):
        order = rng.permutation(len(dataset))
        for lo in range(0, len(order), videos_per_batch):
            pick = order[lo : lo + videos_per_batch]
            tape = GradTape.zeros(params)
            total_frames = sum(dataset[i][0].num_frames for i in pick)
            for i in pick:
                video, gts = dataset[i]
                xs = list(_classifier_inputs(video, use_diff))
                labels = frame_labels(video, gts)
                hs, caches, _ = lstm_forward(params, xs)
                d_hidden = []
                for h, label in zip(hs, labels):
                    out = heads_forward(params, h)
                    d_logits = out.class_probs.copy()
                    d_logits[label] -= 1.0
                    seeds = HeadSeeds.zeros(num_labels)
                    seeds.d_logits = d_logits / total_frames
                    d_hidden.append(heads_backward(params, h, seeds, tape))
                lstm_backward(params, caches, d_hidden, tape)
            adam_update(params.arrays, tape.arrays, opt)
    return FrameClassifier(variant, num_labels, use_diff, lstm_params=params)


# --------------------------------------------------------------------
# 1-D non-maximum suppression over thresholded probability runs
# --------------------------------------------------------------------


def _runs(mask: np.ndarray) -> list[tuple[int, int]]:
    """Inclusive (first, last) index pairs of consecutive True runs."""
    runs = []
    start = None
    for i, flag in enumerate(mask):
        if flag and start is None:
            start = i
        elif not flag and start is not None:
            runs.append((start, i - 1))
            start = None
    if start is not None:
        runs.append((start, len(mask) - 1))
    return runs


def nms_aggregate(
    probs: np.ndarray,
    prob_threshold: float = 0.5,
    iou_threshold: float = 0.4,
) -> list[Detection]:
    """Aggregate per-frame class probabilities into detections.

    Per foreground class: frames above the probability threshold are
    merged into consecutive runs scored by their mean probability, then
    greedily suppressed at the IoU threshold.
    """
    probs = np.asarray(probs, dtype=float)
    n, num_labels = probs.shape
    detections: list[Detection] = []
    for c in range(1, num_labels):
        candidates = []
        for first, last in _runs(probs[:, c] >= prob_threshold):
            class_probs = probs[first : last + 1].mean(axis=0)
            if int(np.argmax(class_probs)) != c:
                continue
            score = float(probs[first : last + 1, c].mean())
            seg = (
                Segment(first / (n - 1), last / (n - 1))
                if n > 1
                else Segment(0.0, 0.0)
            )
            candidates.append((score, Detection(seg, class_probs, 1)))
        candidates.sort(key=lambda pair: -pair[0])  # stable
        kept: list[Detection] = []
        for _score, det in candidates:
            if all(iou(det.segment, k.segment) < iou_threshold for k in kept):
                kept.append(det)
        detections.extend(kept)
    return detections


def detect_with_classifier(
    clf: FrameClassifier,
    video: FeatureVideo,
    prob_threshold: float = 0.5,
    iou_threshold: float = 0.4,
) -> list[Detection]:
    return nms_aggregate(frame_probs(clf, video), prob_threshold, iou_threshold)


# --------------------------------------------------------------------
# Linear boundary refinement
# --------------------------------------------------------------------


@dataclass
class BoundaryRegressor:
    """Linear map [current bounds; kappa sampled frame features; their
    frame differences] -> (start offset, end offset)."""

    weights: np.ndarray  # (2 + kappa * (D + D_diff), 2)
    kappa: int
    feature_dim: int
    diff_dim: int

    @property
    def input_dim(self) -> int:
        return 2 + self.kappa * (self.feature_dim + self.diff_dim)


def segment_regression_features(
    video: FeatureVideo, segment: Segment, kappa: int
) -> np.ndarray:
    """Regression input for one segment: its bounds plus kappa uniformly
    sampled in-segment frame features (and frame differences when the
    video carries a difference channel)."""
    n = video.num_frames
    lo = segment.start * (n - 1)
    hi = segment.end * (n - 1)
    idx = np.clip(np.round(np.linspace(lo, hi, kappa)).astype(int), 0, n - 1)
    parts = [np.array([segment.start, segment.end]), video.frames[idx].ravel()]
    if video.diff is not None:
        parts.append(video.diff[idx].ravel())
    return np.concatenate(parts)


def train_boundary_regressor(
    items: list[tuple[FeatureVideo, list[Detection], GroundTruthSet]],
    kappa: int = 10,
    ridge: float = 1e-6,
) -> BoundaryRegressor:
    """Closed-form ridge least squares on matched (detection, ground
    truth) pairs; the targets are the boundary offsets."""
    if not items:
        raise ValueError("regressor training needs at least one video")
    video0 = items[0][0]
    diff_dim = video0.feature_dim if video0.diff is not None else 0
    in_dim = 2 + kappa * (video0.feature_dim + diff_dim)
    rows = []
    targets = []
    for video, dets, gts in items:
        for det in dets:
            g_idx = assign(det, gts)
            if g_idx is None:
                continue
            gt = gts.items[g_idx]
            rows.append(segment_regression_features(video, det.segment, kappa))
            targets.append(
                [gt.segment.start - det.segment.start, gt.segment.end - det.segment.end]
            )
    if not rows:
        return BoundaryRegressor(
            np.zeros((in_dim, 2)), kappa, video0.feature_dim, diff_dim
        )
    x = np.stack(rows)
    y = np.array(targets)
    gram = x.T @ x + ridge * np.eye(x.shape[1])
    weights = np.linalg.solve(gram, x.T @ y)
    return BoundaryRegressor(weights, kappa, video0.feature_dim, diff_dim)


def refine_boundaries(
    reg: BoundaryRegressor, video: FeatureVideo, dets: list[Detection]
) -> list[Detection]:
    """Shift detection boundaries by the predicted offsets, clamped to
    [0, 1]; a crossed pair collapses to its midpoint."""
    refined = []
    for det in dets:
        x = segment_regression_features(video, det.segment, reg.kappa)
        offsets = x @ reg.weights
        start = min(max(det.segment.start + float(offsets[0]), 0.0), 1.0)
        end = min(max(det.segment.end + float(offsets[1]), 0.0), 1.0)
        if start > end:
            mid = 0.5 * (start + end)
            start = end = mid
        refined.append(Detection(Segment(start, end), det.class_probs, det.step_index))
    return refined
