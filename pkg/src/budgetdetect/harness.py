"""Experiment surface: evaluation reports, the component-cost budget
model, steps-vs-accuracy sweeps, and trajectory traces."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, replace

import numpy as np

from .diffkit import ParamSet
from .envsim import FeatureVideo
from .policy import PolicyConfig, detect, rollout, trace_lines
from .segmetrics import Detection, GroundTruthSet, mean_ap, per_class_ap
from .trainer import TrainConfig, TrainResult, train

DEFAULT_EVAL_THRESHOLDS = (0.3, 0.4, 0.5, 0.6, 0.7)


@dataclass(frozen=True)
class BudgetCostModel:
    """Per-component millisecond costs of the detection pipeline."""

    feature_ms: float = 3.0
    diff_ms: float = 0.1
    recurrent_ms: float = 5.4
    regression_ms: float = 5.5
    neighborhood: int = 15
    regression_samples: int = 10

    def __post_init__(self) -> None:
        if min(self.feature_ms, self.diff_ms, self.recurrent_ms, self.regression_ms) < 0:
            raise ValueError("component costs must be nonnegative")


def estimate_budget(model: BudgetCostModel, steps: int, use_regression: bool) -> float:
    """Estimated per-video cost in milliseconds: every step pays the
    neighborhood feature and difference extraction plus one recurrent
    update; the optional refinement adds its sampled-frame features and
    the regression itself."""
    if steps < 1:
        raise ValueError("need at least one step")
    total = (
        model.diff_ms * model.neighborhood * steps
        + model.feature_ms * model.neighborhood * steps
        + model.recurrent_ms * steps
    )
    if use_regression:
        total += (
            model.diff_ms * model.regression_samples
            + model.feature_ms * model.regression_samples
            + model.regression_ms
        )
    return total


# --------------------------------------------------------------------
# Evaluation report
# --------------------------------------------------------------------


@dataclass
class EvalReport:
    thresholds: tuple[float, ...]
    map_by_threshold: dict[float, float]
    per_class_ap: dict[float, dict[int, float]]
    detection_count: int
    num_videos: int
    steps: int
    wall_seconds_per_video: float

    def key_fields(self) -> dict:
        """Deterministic content (wall clock excluded)."""
        return {
            "thresholds": list(self.thresholds),
            "map_by_threshold": {str(k): v for k, v in self.map_by_threshold.items()},
            "per_class_ap": {
                str(t): {str(c): v for c, v in table.items()}
                for t, table in self.per_class_ap.items()
            },
            "detection_count": self.detection_count,
            "num_videos": self.num_videos,
            "steps": self.steps,
        }

    def to_json(self) -> str:
        payload = self.key_fields()
        payload["wall_seconds_per_video"] = self.wall_seconds_per_video
        return json.dumps(payload, sort_keys=True, indent=2)

    @staticmethod
    def from_json(text: str) -> "EvalReport":
        payload = json.loads(text)
        return EvalReport(
            thresholds=tuple(payload["thresholds"]),
            map_by_threshold={
                float(k): v for k, v in payload["map_by_threshold"].items()
            },
            per_class_ap={
                float(t): {int(c): v for c, v in table.items()}
                for t, table in payload["per_class_ap"].items()
            },
            detection_count=payload["detection_count"],
            num_videos=payload["num_videos"],
            steps=payload["steps"],
            wall_seconds_per_video=payload["wall_seconds_per_video"],
        )


def evaluate_detections(
    dets_per_video: list[list[Detection]],
    gts_per_video: list[GroundTruthSet],
    thresholds: tuple[float, ...] = DEFAULT_EVAL_THRESHOLDS,
    steps: int = 0,
    wall_seconds_per_video: float = 0.0,
) -> EvalReport:
    """Confidence-ranked mAP and per-class AP at every threshold."""
    for dets in dets_per_video:
        for det in dets:
            if det.predicted_class == 0:
                raise ValueError("background-argmax detection reached evaluation")
    return EvalReport(
        thresholds=tuple(thresholds),
        map_by_threshold={
            thr: mean_ap(dets_per_video, gts_per_video, thr, ranking="confidence")
            for thr in thresholds
        },
        per_class_ap={
            thr: per_class_ap(dets_per_video, gts_per_video, thr, ranking="confidence")
            for thr in thresholds
        },
        detection_count=sum(len(d) for d in dets_per_video),
        num_videos=len(dets_per_video),
        steps=steps,
        wall_seconds_per_video=wall_seconds_per_video,
    )


def evaluate(
    params: ParamSet,
    config: PolicyConfig,
    dataset: list[tuple[FeatureVideo, GroundTruthSet]],
    thresholds: tuple[float, ...] = DEFAULT_EVAL_THRESHOLDS,
) -> EvalReport:
    """Run deterministic detection over a dataset and score it."""
    t0 = time.perf_counter()
    dets = [detect(params, config, video) for video, _ in dataset]
    wall = (time.perf_counter() - t0) / max(len(dataset), 1)
    return evaluate_detections(
        dets,
        [g for _, g in dataset],
        thresholds,
        steps=config.steps,
        wall_seconds_per_video=wall,
    )


def render_report(report: EvalReport) -> str:
    lines = [
        f"videos: {report.num_videos}   detections: {report.detection_count}"
        f"   steps: {report.steps}"
        f"   wall/video: {report.wall_seconds_per_video * 1000:.1f} ms",
        "threshold  mAP",
    ]
    for thr in report.thresholds:
        lines.append(f"   {thr:.2f}    {report.map_by_threshold[thr]:.4f}")
    lines.append("per-class AP:")
    for thr in report.thresholds:
        table = report.per_class_ap[thr]
        cells = "  ".join(f"c{c}={v:.4f}" for c, v in sorted(table.items()))
        lines.append(f"   {thr:.2f}    {cells}")
    return "\n".join(lines)


# --------------------------------------------------------------------
# Steps sweep
# --------------------------------------------------------------------


@dataclass
class SweepRow:
    steps: int
    val_map: float
    wall_seconds: float  # measured detection time over the whole eval set
    budget_ms: float

    def to_dict(self) -> dict:
        return {
            "steps": self.steps,
            "val_map": self.val_map,
            "wall_seconds": self.wall_seconds,
            "budget_ms": self.budget_ms,
        }


def steps_sweep(
    train_set: list[tuple[FeatureVideo, GroundTruthSet]],
    val_set: list[tuple[FeatureVideo, GroundTruthSet]],
    config: PolicyConfig,
    train_cfg: TrainConfig,
    step_values: list[int],
    root_seed: int,
    budget_model: BudgetCostModel = BudgetCostModel(),
    use_regression: bool = False,
    pretrained: ParamSet | None = None,
    map_threshold: float = 0.5,
) -> list[SweepRow]:
    """Accuracy, measured wall time, and estimated budget per step
    count. Trains one policy per entry unless ``pretrained`` parameters
    are supplied (then only evaluation is swept)."""
    if sorted(step_values) != list(step_values):
        raise ValueError("step values must be sorted ascending")
    rows = []
    for steps in step_values:
        cfg = replace(config, steps=steps)
        if pretrained is None:
            result: TrainResult = train(train_set, val_set, cfg, train_cfg, root_seed)
            params = result.best_params
        else:
            params = pretrained
        t0 = time.perf_counter()
        dets = [detect(params, cfg, video) for video, _ in val_set]
        wall = time.perf_counter() - t0
        val = mean_ap(
            dets, [g for _, g in val_set], map_threshold, ranking="confidence"
        )
        rows.append(
            SweepRow(
                steps=steps,
                val_map=val,
                wall_seconds=wall,
                budget_ms=estimate_budget(budget_model, steps, use_regression),
            )
        )
    return rows


def render_sweep(rows: list[SweepRow]) -> str:
    lines = ["steps\tval_mAP\twall_seconds\tbudget_ms"]
    for row in rows:
        lines.append(
            f"{row.steps}\t{row.val_map:.4f}\t{row.wall_seconds:.4f}\t{row.budget_ms:.1f}"
        )
    return "\n".join(lines)


# --------------------------------------------------------------------
# Boundary-refinement kappa sweep
# --------------------------------------------------------------------


def kappa_sweep(
    train_items,
    val_videos_dets,
    gts_per_video,
    kappas: list[int],
    map_threshold: float = 0.5,
) -> list[tuple[int, float]]:
    """Validation mAP after refinement for each sampled-frame count.

    ``train_items`` are (video, detections, ground truth) triples used to
    fit one regressor per kappa; ``val_videos_dets`` are (video,
    detections) pairs to refine and score.
    """
    from .baselines import refine_boundaries, train_boundary_regressor

    rows = []
    for kappa in kappas:
        reg = train_boundary_regressor(train_items, kappa=kappa)
        refined = [
            refine_boundaries(reg, video, dets) for video, dets in val_videos_dets
        ]
        rows.append(
            (kappa, mean_ap(refined, gts_per_video, map_threshold, ranking="confidence"))
        )
    return rows


def render_kappa_sweep(rows: list[tuple[int, float]]) -> str:
    lines = ["kappa\tval_mAP"]
    for kappa, value in rows:
        lines.append(f"{kappa}\t{value:.4f}")
    return "\n".join(lines)


# --------------------------------------------------------------------
# Trajectory trace
# --------------------------------------------------------------------


def run_trace(
    params: ParamSet,
    config: PolicyConfig,
    video: FeatureVideo,
    gts: GroundTruthSet | None,
    stochastic: bool = False,
    seed: int = 0,
) -> str:
    rng = np.random.default_rng(seed) if stochastic else None
    traj = rollout(params, config, video, gts, rng=rng, stochastic=stochastic)
    header = f"trace of {video.id} ({'stochastic' if stochastic else 'deterministic'})"
    return "\n".join([header] + trace_lines(traj, video))
