"""Synthetic feature-stream environment: videos with planted labeled
segments, local observations around the currently selected frame, and
the stepwise reward channel (decrease in total detection loss).

Frame index i of an N-frame video sits at normalized time i/(N-1); a
planted segment covering frames a..b inclusive therefore occupies the
normalized extent [a/(N-1), b/(N-1)].
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .losses import LossWeights, total_loss
from .segmetrics import Detection, GroundTruthSegment, GroundTruthSet, Segment

DATASET_HEADER = "budgetdetect-dataset v1"


@dataclass
class FeatureVideo:
    """Per-frame feature vectors plus an optional frame-difference
    channel (entry 0 of the difference channel is the zero vector)."""

    id: str
    frames: np.ndarray  # (num_frames, feature_dim)
    diff: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.frames = np.asarray(self.frames, dtype=float)
        if self.frames.ndim != 2:
            raise ValueError("frames must be a (num_frames, feature_dim) array")
        if self.diff is not None:
            self.diff = np.asarray(self.diff, dtype=float)
            if self.diff.shape != self.frames.shape:
                raise ValueError("diff channel must match the frame array shape")

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.frames.shape[1]

    def frame_time(self, index: int) -> float:
        if self.num_frames == 1:
            return 0.0
        return index / (self.num_frames - 1)

    def time_to_frame(self, x: float) -> int:
        """Nearest valid frame index for a normalized location."""
        x = min(max(float(x), 0.0), 1.0)
        return int(round(x * (self.num_frames - 1)))


@dataclass(frozen=True)
class SyntheticSpec:
    """Knobs of the synthetic generator. Frames inside a class-c segment
    are drawn from prototype c plus noise, background frames from
    prototype 0 plus noise; planted segments never overlap."""

    num_videos: int
    frames_per_video: int = 100
    feature_dim: int = 16
    num_classes: int = 3  # foreground classes; background is extra
    segments_min: int = 1
    segments_max: int = 2
    segment_len_min: int = 10
    segment_len_max: int = 30
    noise_level: float = 0.5
    prototype_seed: int = 7
    with_diff: bool = False

    def __post_init__(self) -> None:
        if self.num_classes < 1:
            raise ValueError("need at least one foreground class")
        if not 1 <= self.segments_min <= self.segments_max:
            raise ValueError("invalid segments-per-video range")
        if not 1 <= self.segment_len_min <= self.segment_len_max:
            raise ValueError("invalid segment length range")


def class_prototypes(spec: SyntheticSpec) -> np.ndarray:
    """(num_classes + 1, feature_dim) prototype matrix, row 0 background."""
    rng = np.random.default_rng(spec.prototype_seed)
    return rng.normal(0.0, 1.0, size=(spec.num_classes + 1, spec.feature_dim))


def _plant_segments(
    spec: SyntheticSpec, rng: np.random.Generator
) -> list[tuple[int, int, int]]:
    """(first_frame, last_frame, label) triplets, non-overlapping with at
    least a one-frame gap between consecutive segments."""
    count = int(rng.integers(spec.segments_min, spec.segments_max + 1))
    lengths = rng.integers(
        spec.segment_len_min, spec.segment_len_max + 1, size=count
    )
    free = spec.frames_per_video - int(lengths.sum()) - (count - 1)
    if free < 0:
        raise ValueError(
            "planted segments cannot fit in the video without overlap"
        )
    cuts = np.sort(rng.integers(0, free + 1, size=count))
    gaps = np.diff(np.concatenate([[0], cuts]))
    triplets = []
    pos = 0
    for j in range(count):
        pos += int(gaps[j])
        label = int(rng.integers(1, spec.num_classes + 1))
        triplets.append((pos, pos + int(lengths[j]) - 1, label))
        pos += int(lengths[j]) + 1  # body plus mandatory separator
    return triplets


def generate_dataset(
    spec: SyntheticSpec, seed: int
) -> list[tuple[FeatureVideo, GroundTruthSet]]:
    """Deterministic synthetic dataset for the given seed."""
    rng = np.random.default_rng(seed)
    protos = class_prototypes(spec)
    n = spec.frames_per_video
    dataset = []
    for v in range(spec.num_videos):
        triplets = _plant_segments(spec, rng)
        labels = np.zeros(n, dtype=int)
        for first, last, label in triplets:
            labels[first : last + 1] = label
        frames = protos[labels] + spec.noise_level * rng.standard_normal(
            (n, spec.feature_dim)
        )
        diff = None
        if spec.with_diff:
            diff = np.zeros_like(frames)
            diff[1:] = frames[1:] - frames[:-1]
        gts = GroundTruthSet(
            tuple(
                GroundTruthSegment(
                    Segment(first / (n - 1), last / (n - 1)), label
                )
                for first, last, label in triplets
            )
        )
        dataset.append((FeatureVideo(f"video-{v:04d}", frames, diff), gts))
    return dataset


# --------------------------------------------------------------------
# Episode state, observations, environment step
# --------------------------------------------------------------------


@dataclass
class EpisodeState:
    current_frame: int
    selected_mask: np.ndarray  # bool per frame, True once visited
    detections: list[Detection]
    step: int
    prev_loss: float


def init_episode(
    video: FeatureVideo,
    gts: GroundTruthSet | None,
    weights: LossWeights = LossWeights(),
    tau_iou: float = 0.5,
) -> EpisodeState:
    """Episode starts at the first frame with an empty detection set, so
    a learned forward scanning stride can cover the whole timeline.
    Without ground truth (inference) the loss bookkeeping is disabled."""
    start = 0
    mask = np.zeros(video.num_frames, dtype=bool)
    mask[start] = True
    prev = 0.0
    if gts is not None:
        prev = total_loss([], gts, weights, tau_iou).total
    return EpisodeState(start, mask, [], 0, prev)


@dataclass
class Observation:
    """Local view around the current frame: selection indicators over
    the neighborhood, averaged class confidence of detections sharing
    frames with it, the normalized frame location, and the pooled
    neighborhood feature vector."""

    psi: np.ndarray
    phi: np.ndarray
    xi: float
    features: np.ndarray

    def vector(self) -> np.ndarray:
        return np.concatenate([self.psi, self.phi, [self.xi], self.features])


def observe(
    video: FeatureVideo,
    state: EpisodeState,
    neighborhood_size: int,
    num_labels: int,
    use_diff: bool = False,
) -> Observation:
    """Build the observation for the current frame.

    The neighborhood spans +-floor(size/2) frames, clamped at video
    bounds; clamped indicator positions stay zero. phi averages the
    class distributions of detections whose extent intersects the
    neighborhood index range (zero vector when there are none).
    """
    half = neighborhood_size // 2
    center = state.current_frame
    n = video.num_frames
    idx = np.arange(center - half, center - half + neighborhood_size)
    valid = (idx >= 0) & (idx < n)
    psi = np.zeros(neighborhood_size)
    psi[valid] = state.selected_mask[idx[valid]].astype(float)

    in_range = idx[valid]
    lo, hi = int(in_range[0]), int(in_range[-1])
    overlapping = [
        det.class_probs
        for det in state.detections
        if det.segment.start * (n - 1) <= hi and det.segment.end * (n - 1) >= lo
    ]
    if overlapping:
        phi = np.mean(overlapping, axis=0)
    else:
        phi = np.zeros(num_labels)

    features = video.frames[in_range].mean(axis=0)
    if use_diff:
        if video.diff is None:
            raise ValueError("video has no frame-difference channel")
        features = np.concatenate([features, video.diff[in_range].mean(axis=0)])

    xi = video.frame_time(center)
    return Observation(psi=psi, phi=phi, xi=xi, features=features)


def step_env(
    video: FeatureVideo,
    gts: GroundTruthSet | None,
    state: EpisodeState,
    detection: Detection | None,
    next_xi: float,
    weights: LossWeights = LossWeights(),
    tau_iou: float = 0.5,
) -> tuple[EpisodeState, float]:
    """Apply one policy step: keep the detection unless it is None (the
    caller decided to discard) or its argmax class is background, reward
    the decrease in total loss, and move to the frame addressed by the
    sampled next location."""
    if detection is None or detection.predicted_class == 0:
        dets = state.detections
        new_loss = state.prev_loss
    else:
        dets = state.detections + [detection]
        new_loss = (
            total_loss(dets, gts, weights, tau_iou).total if gts is not None else 0.0
        )
    reward = state.prev_loss - new_loss
    nxt = video.time_to_frame(next_xi)
    mask = state.selected_mask.copy()
    mask[nxt] = True
    new_state = EpisodeState(nxt, mask, dets, state.step + 1, new_loss)
    return new_state, reward


def discounted_return(rewards, tau: float, start: int = 0) -> float:
    """Discounted accumulated reward from ``start`` to the episode end."""
    if not 0.0 < tau <= 1.0:
        raise ValueError("discount must lie in (0, 1]")
    total = 0.0
    factor = 1.0
    for r in rewards[start:]:
        total += factor * r
        factor *= tau
    return total


def discounted_returns(rewards, tau: float) -> np.ndarray:
    """Vector of discounted returns for every starting step."""
    if not 0.0 < tau <= 1.0:
        raise ValueError("discount must lie in (0, 1]")
    out = np.zeros(len(rewards))
    acc = 0.0
    for t in range(len(rewards) - 1, -1, -1):
        acc = rewards[t] + tau * acc
        out[t] = acc
    return out


# --------------------------------------------------------------------
# Dataset file format (structured text, one record per video)
# --------------------------------------------------------------------
#
#   budgetdetect-dataset v1
#   videos <count>
#   video <id>
#   frames <N> dim <D> diff <0|1>
#   gt <count>
#   <start> <end> <label>          (gt count lines)
#   features
#   <D floats per line>            (N lines)
#   diff-features                  (only when diff 1)
#   <D floats per line>            (N lines)
#   end
# --------------------------------------------------------------------


def _format_row(row: np.ndarray) -> str:
    return " ".join(repr(float(x)) for x in row)


def save_dataset(path: str, dataset: list[tuple[FeatureVideo, GroundTruthSet]]) -> None:
    lines = [DATASET_HEADER, f"videos {len(dataset)}"]
    for video, gts in dataset:
        if any(ch.isspace() for ch in video.id):
            raise ValueError("video ids must not contain whitespace")
        has_diff = int(video.diff is not None)
        lines.append(f"video {video.id}")
        lines.append(
            f"frames {video.num_frames} dim {video.feature_dim} diff {has_diff}"
        )
        lines.append(f"gt {len(gts)}")
        for g in gts:
            lines.append(
                f"{g.segment.start!r} {g.segment.end!r} {g.label}"
            )
        lines.append("features")
        for row in video.frames:
            lines.append(_format_row(row))
        if video.diff is not None:
            lines.append("diff-features")
            for row in video.diff:
                lines.append(_format_row(row))
        lines.append("end")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def load_dataset(path: str) -> list[tuple[FeatureVideo, GroundTruthSet]]:
    with open(path, "r", encoding="utf-8") as fh:
        lines = [line.rstrip("\n") for line in fh]
    pos = 0

    def take() -> str:
        nonlocal pos
        if pos >= len(lines):
            raise ValueError("truncated dataset file")
        line = lines[pos]
        pos += 1
        return line

    if take() != DATASET_HEADER:
        raise ValueError(f"{path} is not a dataset file")
    count = int(take().split()[1])
    dataset = []
    for _ in range(count):
        vid = take().split(" ", 1)[1]
        meta = take().split()
        n, dim, has_diff = int(meta[1]), int(meta[3]), int(meta[5])
        gt_count = int(take().split()[1])
        gt_items = []
        for _ in range(gt_count):
            parts = take().split()
            gt_items.append(
                GroundTruthSegment(
                    Segment(float(parts[0]), float(parts[1])), int(parts[2])
                )
            )
        if take() != "features":
            raise ValueError("malformed dataset record (missing features)")
        frames = np.array(
            [[float(x) for x in take().split()] for _ in range(n)]
        ).reshape(n, dim)
        diff = None
        if has_diff:
            if take() != "diff-features":
                raise ValueError("malformed dataset record (missing diff block)")
            diff = np.array(
                [[float(x) for x in take().split()] for _ in range(n)]
            ).reshape(n, dim)
        if take() != "end":
            raise ValueError("malformed dataset record (missing end)")
        dataset.append((FeatureVideo(vid, frames, diff), GroundTruthSet(tuple(gt_items))))
    return dataset
