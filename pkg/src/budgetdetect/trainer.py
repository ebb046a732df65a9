"""Policy-gradient training: Monte-Carlo batches of stochastic rollouts,
per-step return baselines from a random selection policy, Adam updates,
and an epoch loop with validation mAP tracking and checkpoints.

The batch gradient is the mean over videos of
``sum_t grad log pi(action_t) * (return_t - baseline_t)`` (descent on the
negated objective); in hybrid mode the differentiable classification and
localization terms of the final detection set are additionally
backpropagated through the heads with the detection-to-ground-truth
matching frozen.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .diffkit import (
    GradTape,
    ParamSet,
    adam_init,
    adam_step,
    heads_backward,
    init_params,
    lstm_backward,
    softmax_cross_entropy,
)
from .envsim import FeatureVideo, discounted_returns
from .losses import LossWeights, loc_error, match_detections
from .policy import (
    PolicyConfig,
    TrajectoryRecord,
    action_logdensity,
    detect,
    location_chain,
    replay_forward,
    rollout,
    score_seeds,
    segment_from_center_width,
)
from .segmetrics import GroundTruthSet, mean_ap

DatasetItem = tuple[FeatureVideo, GroundTruthSet]


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 128
    learning_rate: float = 1e-3
    discount: float = 0.9
    baseline: str = "random-policy"  # "random-policy" | "constant" | "none"
    baseline_samples: int = 32
    # scale advantages by their batch standard deviation; bounds the
    # score-function step size while the loss terms are still large
    advantage_norm: bool = True
    # entropy bonus on the class categorical; keeps the emission channel
    # explorable while the heads are still too weak for emissions to pay.
    # Linearly annealed from entropy_bonus to entropy_bonus_final so the
    # keep/discard decisions sharpen by the end of training.
    entropy_bonus: float = 0.05
    entropy_bonus_final: float = 0.0
    grad_clip: float = 5.0
    weights: LossWeights = field(default_factory=LossWeights)
    tau_iou: float = 0.5
    eval_every: int = 5
    eval_thresholds: tuple[float, ...] = (0.5,)

    def __post_init__(self) -> None:
        if not 0.0 < self.discount <= 1.0:
            raise ValueError("discount must lie in (0, 1]")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")
        if self.baseline not in ("random-policy", "constant", "none"):
            raise ValueError(f"unknown baseline mode {self.baseline!r}")


@dataclass
class BaselineEstimate:
    """Per-step expected return of the random selection policy."""

    per_step: np.ndarray
    samples: int


def estimate_baseline(
    params: ParamSet,
    config: PolicyConfig,
    dataset: list[DatasetItem],
    train_cfg: TrainConfig,
    rng: np.random.Generator,
) -> BaselineEstimate:
    """Average discounted return per step over rollouts whose next-frame
    choice is uniform random while the other outputs keep the policy's
    own (stochastic) behavior, so the baseline tracks how the current
    policy fares without informed frame selection."""
    if not dataset:
        raise ValueError("baseline estimation needs a nonempty dataset")
    steps = config.steps
    if train_cfg.baseline == "none":
        return BaselineEstimate(np.zeros(steps), 0)
    acc = np.zeros(steps)
    for _ in range(train_cfg.baseline_samples):
        video, gts = dataset[int(rng.integers(len(dataset)))]
        traj = rollout(
            params,
            config,
            video,
            gts,
            rng=rng,
            stochastic=True,
            weights=train_cfg.weights,
            tau_iou=train_cfg.tau_iou,
            random_selection=True,
        )
        acc += discounted_returns(traj.rewards, train_cfg.discount)
    per_step = acc / train_cfg.baseline_samples
    if train_cfg.baseline == "constant":
        per_step = np.full(steps, per_step.mean())
    return BaselineEstimate(per_step, train_cfg.baseline_samples)


# --------------------------------------------------------------------
# Per-trajectory objective and gradient
# --------------------------------------------------------------------


def _hybrid_terms(traj: TrajectoryRecord) -> list[tuple[int, object]]:
    """(step offset, ground truth) pairs for every step whose candidate
    prediction overlaps a ground truth; the matching is frozen from the
    recorded rollout.

    Candidates enter whether or not the step emitted: the heads keep
    receiving classification/localization gradients even while the
    sampled class suppresses emission, so head quality and the emission
    policy can improve independently."""
    if traj.gts is None:
        return []
    candidates = [s.detection for s in traj.steps]
    terms = []
    for t, g_idx in enumerate(match_detections(candidates, traj.gts)):
        if g_idx is None:
            continue
        terms.append((t, traj.gts.items[g_idx]))
    return terms


def trajectory_objective(
    params: ParamSet,
    config: PolicyConfig,
    traj: TrajectoryRecord,
    coefficients: np.ndarray,
    weights: LossWeights,
    hybrid_scale: float = 0.0,
    tape: GradTape | None = None,
    entropy_scale: float = 0.0,
) -> float:
    """sum_t coeff_t * log pi_t plus, when ``hybrid_scale`` is nonzero,
    hybrid_scale * (lambda_cls * sum CE + lambda_loc * sum loc) over the
    frozen matched pairs, minus ``entropy_scale`` times the class
    entropy per step. Hidden states are replayed from the recorded
    observations; with a tape the gradient is accumulated as well.
    """
    xs = [s.x for s in traj.steps]
    replay = replay_forward(params, config, xs)
    num_labels = config.num_labels
    value = 0.0
    seeds = None
    if tape is not None:
        from .diffkit import HeadSeeds

        seeds = [HeadSeeds.zeros(num_labels) for _ in traj.steps]

    for t, (out, step) in enumerate(zip(replay.outs, traj.steps)):
        c = float(coefficients[t])
        value += c * action_logdensity(out, step.action, config, step.observation.xi)
        if seeds is not None:
            s = score_seeds(out, step.action, config, c, step.observation.xi)
            seeds[t].d_loc_raw += s.d_loc_raw
            seeds[t].d_logits += s.d_logits
            seeds[t].d_xi_raw += s.d_xi_raw
        if entropy_scale != 0.0:
            probs = out.class_probs
            logp = np.log(np.maximum(probs, 1e-300))
            entropy = float(-(probs * logp).sum())
            value -= entropy_scale * entropy
            if seeds is not None:
                seeds[t].d_logits -= entropy_scale * (-probs * (logp + entropy))

    if hybrid_scale != 0.0:
        for t, gt in _hybrid_terms(traj):
            out = replay.outs[t]
            # emitted detections carry the softmax over foreground
            # logits, so the cross entropy acts on that slice only
            ce, d_fg = softmax_cross_entropy(out.cls_logits[1:], gt.label - 1)
            value += hybrid_scale * weights.lambda_cls * ce

            xi = traj.steps[t].observation.xi
            center, width, d_center_raw, d_width_raw = location_chain(out, xi)
            start_pre = center - width / 2.0
            end_pre = center + width / 2.0
            seg = segment_from_center_width(center, width)
            value += hybrid_scale * weights.lambda_loc * loc_error(seg, gt.segment)

            if seeds is not None:
                seeds[t].d_logits[1:] += hybrid_scale * weights.lambda_cls * d_fg
                zeta = 0.5 / gt.segment.length
                d_start = zeta * np.sign(seg.start - gt.segment.start)
                d_end = zeta * np.sign(seg.end - gt.segment.end)
                if not 0.0 < start_pre < 1.0:  # clipped at the boundary
                    d_start = 0.0
                if not 0.0 < end_pre < 1.0:
                    d_end = 0.0
                d_center = d_start + d_end
                d_width = 0.5 * (d_end - d_start)
                seeds[t].d_loc_raw += (
                    hybrid_scale
                    * weights.lambda_loc
                    * np.array([d_center * d_center_raw, d_width * d_width_raw])
                )

    if tape is not None and seeds is not None:
        d_hidden = [
            heads_backward(params, h, seed, tape)
            for h, seed in zip(replay.hs, seeds)
        ]
        lstm_backward(params, replay.lstm_caches, d_hidden, tape)
    return value


@dataclass
class BatchStats:
    mean_return: float
    mean_loss: float
    mean_cls: float
    mean_loc: float
    mean_ret: float
    grad_norm: float = 0.0
    skipped: bool = False


def gradient_from_trajectories(
    params: ParamSet,
    config: PolicyConfig,
    trajs: list[TrajectoryRecord],
    train_cfg: TrainConfig,
    baseline: BaselineEstimate,
    tape: GradTape,
    entropy_bonus: float | None = None,
) -> BatchStats:
    """Accumulate the batch policy gradient (descent direction) from
    already-sampled trajectories."""
    if entropy_bonus is None:
        entropy_bonus = train_cfg.entropy_bonus
    batch = len(trajs)
    hybrid = 1.0 / batch if config.mode == "hybrid" else 0.0
    all_returns = [discounted_returns(t.rewards, train_cfg.discount) for t in trajs]
    all_advantages = [r - baseline.per_step for r in all_returns]
    scale = 1.0
    if train_cfg.advantage_norm:
        # shrink-only: tame oversized advantages without amplifying noise
        scale = 1.0 / max(1.0, float(np.std(np.concatenate(all_advantages))))
    returns0 = []
    for traj, returns, advantages in zip(trajs, all_returns, all_advantages):
        coefficients = -advantages * scale / batch
        trajectory_objective(
            params,
            config,
            traj,
            coefficients,
            train_cfg.weights,
            hybrid_scale=hybrid,
            tape=tape,
            entropy_scale=entropy_bonus / batch,
        )
        returns0.append(returns[0])
    breakdowns = [t.breakdown for t in trajs if t.breakdown is not None]
    return BatchStats(
        mean_return=float(np.mean(returns0)),
        mean_loss=float(np.mean([b.total for b in breakdowns])),
        mean_cls=float(np.mean([b.cls for b in breakdowns])),
        mean_loc=float(np.mean([b.loc for b in breakdowns])),
        mean_ret=float(np.mean([b.ret for b in breakdowns])),
        grad_norm=tape.global_norm(),
    )


def policy_gradient_batch(
    params: ParamSet,
    config: PolicyConfig,
    items: list[DatasetItem],
    train_cfg: TrainConfig,
    baseline: BaselineEstimate,
    rng: np.random.Generator,
    entropy_bonus: float | None = None,
) -> tuple[GradTape, BatchStats]:
    """Sample one stochastic rollout per video and form the batch
    gradient."""
    trajs = [
        rollout(
            params,
            config,
            video,
            gts,
            rng=rng,
            stochastic=True,
            weights=train_cfg.weights,
            tau_iou=train_cfg.tau_iou,
        )
        for video, gts in items
    ]
    tape = GradTape.zeros(params)
    stats = gradient_from_trajectories(
        params, config, trajs, train_cfg, baseline, tape, entropy_bonus
    )
    return tape, stats


# --------------------------------------------------------------------
# Epoch loop
# --------------------------------------------------------------------


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    cls: float
    loc: float
    ret: float
    mean_return: float
    val_map: dict[float, float] | None
    wall_seconds: float

    def key_fields(self) -> dict:
        """Everything except wall time; this is the part that must be
        bit-identical for one root seed."""
        return {
            "epoch": self.epoch,
            "loss": self.loss,
            "cls": self.cls,
            "loc": self.loc,
            "ret": self.ret,
            "mean_return": self.mean_return,
            "val_map": self.val_map,
        }


@dataclass
class TrainResult:
    params: ParamSet
    best_params: ParamSet
    history: list[EpochRecord]
    best_val_map: float
    best_epoch: int
    aborted: bool = False


def validation_map(
    params: ParamSet,
    config: PolicyConfig,
    val_set: list[DatasetItem],
    thresholds: tuple[float, ...],
) -> dict[float, float]:
    dets = [detect(params, config, video) for video, _ in val_set]
    gts = [g for _, g in val_set]
    return {thr: mean_ap(dets, gts, thr, ranking="confidence") for thr in thresholds}


def train(
    train_set: list[DatasetItem],
    val_set: list[DatasetItem],
    config: PolicyConfig,
    train_cfg: TrainConfig,
    root_seed: int,
    log_path: str | None = None,
) -> TrainResult:
    """Full training run. All randomness flows from ``root_seed``
    through deterministically spawned streams, so a repeated run yields
    an identical history (wall times aside)."""
    if not train_set:
        raise ValueError("empty training set")
    root = np.random.SeedSequence(root_seed)
    init_ss, run_ss = root.spawn(2)
    params = init_params(config.net_config(), np.random.default_rng(init_ss))
    params.arrays["cls_b"][0] = config.background_bias_init
    # next-frame mean is xi + 2*(sigmoid(raw) - 0.5); the bias seeds a
    # forward stride of scan_stride_init
    gate = 0.5 + 0.5 * config.scan_stride_init
    params.arrays["xi_b"][0] = math.log(gate / (1.0 - gate))
    run_rng = np.random.default_rng(run_ss)
    opt = adam_init(params, learning_rate=train_cfg.learning_rate)

    history: list[EpochRecord] = []
    best_params = params.copy()
    best_val = -1.0
    best_epoch = 0
    last_good = params.copy()
    aborted = False
    log_fh = open(log_path, "a", encoding="utf-8") if log_path else None
    try:
        for epoch in range(1, train_cfg.epochs + 1):
            t0 = time.perf_counter()
            progress = (epoch - 1) / max(train_cfg.epochs - 1, 1)
            entropy_bonus = train_cfg.entropy_bonus + progress * (
                train_cfg.entropy_bonus_final - train_cfg.entropy_bonus
            )
            baseline = estimate_baseline(params, config, train_set, train_cfg, run_rng)
            order = run_rng.permutation(len(train_set))
            batch_stats: list[BatchStats] = []
            for lo in range(0, len(order), train_cfg.batch_size):
                items = [train_set[i] for i in order[lo : lo + train_cfg.batch_size]]
                tape, stats = policy_gradient_batch(
                    params, config, items, train_cfg, baseline, run_rng, entropy_bonus
                )
                if not tape.all_finite():
                    stats.skipped = True
                    batch_stats.append(stats)
                    continue
                if train_cfg.grad_clip > 0:
                    tape.clip_global_norm_(train_cfg.grad_clip)
                adam_step(params, tape, opt)
                batch_stats.append(stats)

            mean_loss = float(np.mean([s.mean_loss for s in batch_stats]))
            record = EpochRecord(
                epoch=epoch,
                loss=mean_loss,
                cls=float(np.mean([s.mean_cls for s in batch_stats])),
                loc=float(np.mean([s.mean_loc for s in batch_stats])),
                ret=float(np.mean([s.mean_ret for s in batch_stats])),
                mean_return=float(np.mean([s.mean_return for s in batch_stats])),
                val_map=None,
                wall_seconds=0.0,
            )
            if not np.isfinite(mean_loss):
                # divergence: roll back to the last finite epoch
                params = last_good
                aborted = True
                record.wall_seconds = time.perf_counter() - t0
                history.append(record)
                _log_epoch(log_fh, record)
                break
            last_good = params.copy()

            run_eval = (
                val_set
                and train_cfg.eval_every > 0
                and (epoch % train_cfg.eval_every == 0 or epoch == train_cfg.epochs)
            )
            if run_eval:
                record.val_map = validation_map(
                    params, config, val_set, train_cfg.eval_thresholds
                )
                primary = record.val_map[train_cfg.eval_thresholds[0]]
                if primary > best_val:
                    best_val = primary
                    best_epoch = epoch
                    best_params = params.copy()
            record.wall_seconds = time.perf_counter() - t0
            history.append(record)
            _log_epoch(log_fh, record)
    finally:
        if log_fh:
            log_fh.close()

    if best_val < 0:  # validation never ran; fall back to the final params
        best_params = params.copy()
        best_val = float("nan")
    return TrainResult(
        params=params,
        best_params=best_params,
        history=history,
        best_val_map=best_val,
        best_epoch=best_epoch,
        aborted=aborted,
    )


def _log_epoch(log_fh, record: EpochRecord) -> None:
    if log_fh is None:
        return
    payload = dict(record.key_fields())
    if payload["val_map"] is not None:
        payload["val_map"] = {str(k): v for k, v in payload["val_map"].items()}
    payload["wall_seconds"] = record.wall_seconds
    log_fh.write(json.dumps(payload, sort_keys=True) + "\n")
    log_fh.flush()
