"""The recurrent detection policy: rollouts over a fixed step budget,
producing per-step segment predictions, class distributions, and the
next frame to observe.

Training rollouts sample the exploration distributions and record the
log-density of every sampled action; evaluation rollouts take the
distribution means everywhere and discard steps whose argmax class is
background.

Two training modes:

- "hybrid": the next-frame location and the class label are sampled
  (the sampled label decides whether the step emits a detection, so the
  keep/discard behavior gets score-function credit); kept detections
  carry the softmax over foreground logits, through which the
  differentiable classification and localization terms backpropagate.
- "pure": location (center, width) is sampled as well and the emitted
  detection carries a smoothed one-hot of the sampled class, so the
  realized reward is a constant with respect to the parameters given
  the trajectory and the score-function estimator is exact.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import diffkit
from .diffkit import (
    GradTape,
    HeadOutputs,
    HeadSeeds,
    LstmStepCache,
    NetConfig,
    ParamSet,
    gaussian_logpdf,
    heads_backward,
    heads_forward,
    log_softmax,
    lstm_backward,
    lstm_step,
    softmax,
    zero_state,
)
from .envsim import FeatureVideo, Observation, init_episode, observe, step_env
from .losses import LossBreakdown, LossWeights, total_loss
from .segmetrics import Detection, GroundTruthSet, Segment

MODES = ("hybrid", "pure")


@dataclass(frozen=True)
class PolicyConfig:
    num_classes: int  # foreground classes K; background is extra
    feature_dim: int
    steps: int = 6
    hidden_size: int = 64
    num_layers: int = 2
    neighborhood: int = 15
    xi_variance: float = 0.18
    loc_variance: float = 0.05
    mode: str = "hybrid"
    use_diff: bool = False
    # pure mode encodes the sampled class as a smoothed one-hot so the
    # cross-entropy term stays on the same scale as the other rewards
    class_smoothing: float = 0.05
    # initial background logit bias; a negative value keeps the policy
    # emitting during early training so the classification and
    # localization heads receive gradients before the score function
    # prunes unprofitable emissions (optimistic initialization)
    background_bias_init: float = -3.0
    # initial forward scanning stride of the next-frame head (fraction
    # of the video per step); seeds a coverage pattern so that early
    # rollouts visit fresh content instead of hovering, which keeps
    # duplicate emissions rare while the discard policy is learned
    scan_stride_init: float = 0.25

    def __post_init__(self) -> None:
        if self.steps < 1:
            raise ValueError("need at least one policy step")
        if self.xi_variance <= 0 or self.loc_variance <= 0:
            raise ValueError("exploration variances must be positive")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if not 0.0 <= self.class_smoothing < 0.5:
            raise ValueError("class smoothing must lie in [0, 0.5)")

    @property
    def num_labels(self) -> int:
        return self.num_classes + 1

    @property
    def observation_dim(self) -> int:
        feat = self.feature_dim * (2 if self.use_diff else 1)
        return self.neighborhood + self.num_labels + 1 + feat

    def net_config(self) -> NetConfig:
        return NetConfig(
            input_dim=self.observation_dim,
            hidden_size=self.hidden_size,
            num_layers=self.num_layers,
            num_classes=self.num_labels,
        )


@dataclass(frozen=True)
class StepAction:
    """Realized action of one step. Outside pure mode center/width equal
    the head means; class_index is the sampled label during stochastic
    rollouts and None in deterministic ones."""

    xi: float
    center: float
    width: float
    class_index: int | None


@dataclass
class StepRecord:
    observation: Observation
    x: np.ndarray
    outputs: HeadOutputs
    action: StepAction
    detection: Detection  # the candidate of this step, emitted or not
    emitted: bool
    log_density: float
    reward: float


@dataclass
class TrajectoryRecord:
    video_id: str
    steps: list[StepRecord]
    detections: list[Detection]
    breakdown: LossBreakdown | None
    gts: GroundTruthSet | None

    @property
    def rewards(self) -> np.ndarray:
        return np.array([s.reward for s in self.steps])


def _clip01(x: float) -> float:
    return min(max(float(x), 0.0), 1.0)


def segment_from_center_width(center: float, width: float) -> Segment:
    return Segment(_clip01(center - width / 2.0), _clip01(center + width / 2.0))


def _reflect01(x: float) -> tuple[float, float]:
    """Fold a value into [0, 1] by reflecting at the boundaries; returns
    the folded value and the derivative (+-1) of the fold. Unlike hard
    clipping this keeps gradients alive at the edges, so edge states
    never become learning dead zones."""
    if x < 0.0:
        return -x, -1.0
    if x > 1.0:
        return 2.0 - x, -1.0
    return x, 1.0


def effective_center(offset_gate: float, xi: float) -> float:
    """Segment center addressed relative to the current frame: the raw
    location head output gates an offset in [-0.5, 0.5] around the
    current normalized position. A zero-activation head therefore
    predicts a segment centered on the frame it is looking at, which
    keeps early-training candidates local and lets the best-overlap
    matching associate them with the segment under the policy's feet."""
    value, _ = _reflect01(xi + offset_gate - 0.5)
    return value


def effective_xi(move_gate: float, xi: float) -> float:
    """Next-frame mean addressed relative to the current frame, so that
    constant scanning strides are representable by a head bias alone;
    strides past a video end reflect back inside."""
    value, _ = _reflect01(xi + 2.0 * (move_gate - 0.5))
    return value


def xi_chain(out: HeadOutputs, xi: float) -> tuple[float, float]:
    """(next-frame mean, its derivative in the raw head output)."""
    mean, fold = _reflect01(xi + 2.0 * (out.xi_mean - 0.5))
    d_mean = fold * 2.0 * out.xi_mean * (1.0 - out.xi_mean)
    return mean, d_mean


def location_chain(
    out: HeadOutputs, xi: float
) -> tuple[float, float, float, float]:
    """(center, width, dcenter/dloc_raw0, dwidth/dloc_raw1) for the
    position-relative location parameterization."""
    center, fold = _reflect01(xi + out.center - 0.5)
    d_center = fold * out.center * (1.0 - out.center)
    d_width = out.width * (1.0 - out.width)
    return center, out.width, d_center, d_width


def foreground_probs(cls_logits: np.ndarray) -> np.ndarray:
    """Class distribution restricted to the foreground labels: softmax
    over logits 1..K with the background slot fixed at zero."""
    probs = np.zeros(cls_logits.shape[0])
    probs[1:] = softmax(cls_logits[1:])
    return probs


def action_logdensity(
    outputs: HeadOutputs, action: StepAction, config: PolicyConfig, xi: float
) -> float:
    """Log-density of the sampled actions of one step given the current
    normalized frame location ``xi``.

    Both modes score the next-frame Gaussian and the categorical class
    sample (the class sample carries the keep/discard decision); pure
    mode adds the location Gaussians around the position-relative
    means. Clamping of samples into [0, 1] is ignored by the density
    (documented choice).
    """
    if action.class_index is None:
        raise ValueError("log-density needs a sampled class")
    xi_mean = effective_xi(outputs.xi_mean, xi)
    logp, _ = gaussian_logpdf(action.xi, xi_mean, config.xi_variance)
    logp += float(log_softmax(outputs.cls_logits)[action.class_index])
    if config.mode == "pure":
        center_mean = effective_center(outputs.center, xi)
        lp_c, _ = gaussian_logpdf(action.center, center_mean, config.loc_variance)
        lp_w, _ = gaussian_logpdf(action.width, outputs.width, config.loc_variance)
        logp += lp_c + lp_w
    return logp


def rollout(
    params: ParamSet,
    config: PolicyConfig,
    video: FeatureVideo,
    gts: GroundTruthSet | None,
    rng: np.random.Generator | None = None,
    stochastic: bool = False,
    weights: LossWeights = LossWeights(),
    tau_iou: float = 0.5,
    random_selection: bool = False,
) -> TrajectoryRecord:
    """Run the policy for ``config.steps`` steps on one video.

    ``random_selection=True`` replaces the next-frame output with a
    uniform draw (the random selection reference policy) while keeping
    the heads deterministic.
    """
    if (stochastic or random_selection) and rng is None:
        raise ValueError("stochastic rollouts need an rng")
    state = init_episode(video, gts, weights, tau_iou)
    lstm_state = zero_state(params.config)
    steps: list[StepRecord] = []
    xi_sigma = math.sqrt(config.xi_variance)
    loc_sigma = math.sqrt(config.loc_variance)
    for t in range(1, config.steps + 1):
        obs = observe(video, state, config.neighborhood, config.num_labels, config.use_diff)
        x = obs.vector()
        lstm_state, _cache = lstm_step(params, x, lstm_state)
        h = lstm_state[-1][0]
        if not np.isfinite(h).all():
            raise FloatingPointError(
                f"non-finite hidden state at step {t} of video {video.id}"
            )
        out = heads_forward(params, h)

        center_mean = effective_center(out.center, obs.xi)
        if stochastic and config.mode == "pure":
            center = _clip01(rng.normal(center_mean, loc_sigma))
            width = _clip01(rng.normal(out.width, loc_sigma))
            class_index = int(rng.choice(config.num_labels, p=out.class_probs))
            det_probs = np.full(
                config.num_labels, config.class_smoothing / (config.num_labels - 1)
            )
            det_probs[class_index] = 1.0 - config.class_smoothing
            emit = class_index != 0
        elif stochastic:
            center, width = center_mean, out.width
            class_index = int(rng.choice(config.num_labels, p=out.class_probs))
            det_probs = foreground_probs(out.cls_logits)
            emit = class_index != 0
        else:
            center, width = center_mean, out.width
            class_index = None
            det_probs = foreground_probs(out.cls_logits)
            emit = int(np.argmax(out.class_probs)) != 0

        detection = Detection(segment_from_center_width(center, width), det_probs, t)

        xi_next_mean = effective_xi(out.xi_mean, obs.xi)
        if random_selection:
            xi_next = float(rng.uniform(0.0, 1.0))
        elif stochastic:
            xi_next = _clip01(rng.normal(xi_next_mean, xi_sigma))
        else:
            xi_next = xi_next_mean

        action = StepAction(xi_next, center, width, class_index)
        log_density = (
            action_logdensity(out, action, config, obs.xi)
            if stochastic and not random_selection
            else 0.0
        )
        state, reward = step_env(
            video, gts, state, detection if emit else None, xi_next, weights, tau_iou
        )
        steps.append(
            StepRecord(
                observation=obs,
                x=x,
                outputs=out,
                action=action,
                detection=detection,
                emitted=emit,
                log_density=log_density,
                reward=reward,
            )
        )
    breakdown = (
        total_loss(state.detections, gts, weights, tau_iou) if gts is not None else None
    )
    return TrajectoryRecord(
        video_id=video.id,
        steps=steps,
        detections=state.detections,
        breakdown=breakdown,
        gts=gts,
    )


def detect(params: ParamSet, config: PolicyConfig, video: FeatureVideo) -> list[Detection]:
    """Deterministic inference rollout; returns the non-background
    detections in production order."""
    return rollout(params, config, video, gts=None, stochastic=False).detections


# --------------------------------------------------------------------
# Frozen-trajectory replay: recompute hidden states and head outputs
# from the recorded observation vectors, evaluate (and differentiate)
# the log-density of the recorded actions.
# --------------------------------------------------------------------


@dataclass
class ReplayCache:
    hs: list[np.ndarray]
    outs: list[HeadOutputs]
    lstm_caches: list[LstmStepCache]


def replay_forward(
    params: ParamSet, config: PolicyConfig, xs: list[np.ndarray]
) -> ReplayCache:
    hs, caches, _state = diffkit.lstm_forward(params, xs)
    outs = [heads_forward(params, h) for h in hs]
    return ReplayCache(hs=hs, outs=outs, lstm_caches=caches)


def score_seeds(
    out: HeadOutputs, action: StepAction, config: PolicyConfig, coeff: float, xi: float
) -> HeadSeeds:
    """coeff times the gradient of this step's action log-density with
    respect to the raw head outputs."""
    if action.class_index is None:
        raise ValueError("score seeds need a sampled class")
    seeds = HeadSeeds.zeros(config.num_labels)
    xi_mean, d_xi_raw = xi_chain(out, xi)
    seeds.d_xi_raw = coeff * ((action.xi - xi_mean) / config.xi_variance) * d_xi_raw
    d_logits = -out.class_probs.copy()
    d_logits[action.class_index] += 1.0
    seeds.d_logits = coeff * d_logits
    if config.mode == "pure":
        center_mean, _width, d_center_raw, d_width_raw = location_chain(out, xi)
        d_center = (action.center - center_mean) / config.loc_variance
        d_width = (action.width - out.width) / config.loc_variance
        seeds.d_loc_raw = coeff * np.array(
            [d_center * d_center_raw, d_width * d_width_raw]
        )
    return seeds


def trajectory_logdensity(
    params: ParamSet,
    config: PolicyConfig,
    traj: TrajectoryRecord,
    coefficients: np.ndarray | None = None,
) -> float:
    """sum_t coeff_t * log pi(action_t | h_{t-1}, o_t) with the hidden
    states replayed from the recorded observations under ``params``."""
    replay = replay_forward(params, config, [s.x for s in traj.steps])
    coeffs = np.ones(len(traj.steps)) if coefficients is None else coefficients
    return float(
        sum(
            c * action_logdensity(out, s.action, config, s.observation.xi)
            for c, out, s in zip(coeffs, replay.outs, traj.steps)
        )
    )


def trajectory_logdensity_grad(
    params: ParamSet,
    config: PolicyConfig,
    traj: TrajectoryRecord,
    coefficients: np.ndarray,
    tape: GradTape,
) -> float:
    """Accumulate the gradient of trajectory_logdensity into ``tape``
    and return its value."""
    replay = replay_forward(params, config, [s.x for s in traj.steps])
    value = 0.0
    d_hidden = []
    for c, out, s, h in zip(coefficients, replay.outs, traj.steps, replay.hs):
        value += c * action_logdensity(out, s.action, config, s.observation.xi)
        seeds = score_seeds(out, s.action, config, c, s.observation.xi)
        d_hidden.append(heads_backward(params, h, seeds, tape))
    lstm_backward(params, replay.lstm_caches, d_hidden, tape)
    return value


def trace_lines(traj: TrajectoryRecord, video: FeatureVideo) -> list[str]:
    """Human-readable per-step listing of a trajectory."""
    lines = []
    frame = 0  # episodes start at the first frame
    for s in traj.steps:
        det = s.detection
        kept = "kept" if s.emitted else "discarded (background)"
        probs = " ".join(f"{p:.3f}" for p in det.class_probs)
        lines.append(
            f"step {det.step_index}: frame {frame:4d}"
            f" | segment [{det.segment.start:.3f}, {det.segment.end:.3f}]"
            f" | class {det.predicted_class} (p={det.confidence:.3f})"
            f" | probs [{probs}]"
            f" | reward {s.reward:+.4f}"
            f" | {kept}"
        )
        frame = video.time_to_frame(s.action.xi)
    if traj.breakdown is not None:
        b = traj.breakdown
        lines.append(
            f"final: {len(traj.detections)} detections"
            f" | loss total {b.total:.4f} (cls {b.cls:.4f}, loc {b.loc:.4f}, ret {b.ret:.4f})"
        )
    else:
        lines.append(f"final: {len(traj.detections)} detections")
    return lines
