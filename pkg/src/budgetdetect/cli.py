"""Command-line interface: dataset generation, training, evaluation,
detection, sweeps, the budget estimator, and trajectory traces."""

from __future__ import annotations

import argparse
import dataclasses
import sys

import numpy as np

from .diffkit import load_checkpoint, save_checkpoint
from .envsim import SyntheticSpec, generate_dataset, load_dataset, save_dataset
from .harness import (
    BudgetCostModel,
    estimate_budget,
    evaluate,
    render_report,
    render_sweep,
    run_trace,
    steps_sweep,
)
from .policy import PolicyConfig, detect
from .trainer import TrainConfig, train


def _parse_thresholds(text: str) -> tuple[float, ...]:
    return tuple(float(x) for x in text.split(","))


def _load_policy_checkpoint(path: str):
    params, extra = load_checkpoint(path)
    if "policy" not in extra:
        raise ValueError(f"{path} carries no policy configuration")
    config = PolicyConfig(**extra["policy"])
    return params, config


def _split_train_val(dataset, val_data, val_fraction):
    if val_data:
        return dataset, load_dataset(val_data)
    k = max(1, int(round(len(dataset) * val_fraction)))
    if k >= len(dataset):
        raise ValueError("validation fraction leaves no training videos")
    return dataset[:-k], dataset[-k:]


def cmd_gen_data(args) -> int:
    spec = SyntheticSpec(
        num_videos=args.videos,
        frames_per_video=args.frames,
        feature_dim=args.dim,
        num_classes=args.classes,
        segments_min=args.segments_min,
        segments_max=args.segments_max,
        segment_len_min=args.len_min,
        segment_len_max=args.len_max,
        noise_level=args.noise,
        prototype_seed=args.prototype_seed,
        with_diff=args.diff,
    )
    dataset = generate_dataset(spec, args.seed)
    save_dataset(args.out, dataset)
    print(f"wrote {len(dataset)} videos to {args.out}")
    return 0


def cmd_train(args) -> int:
    dataset = load_dataset(args.data)
    train_set, val_set = _split_train_val(dataset, args.val_data, args.val_fraction)
    num_classes = max(g.label for _, gts in dataset for g in gts)
    config = PolicyConfig(
        num_classes=num_classes,
        feature_dim=train_set[0][0].feature_dim,
        steps=args.steps,
        hidden_size=args.hidden,
        num_layers=args.layers,
        neighborhood=args.neighborhood,
        xi_variance=args.xi_variance,
        loc_variance=args.loc_variance,
        mode=args.mode,
        use_diff=args.use_diff,
    )
    train_cfg = TrainConfig(
        epochs=args.epochs,
        batch_size=args.batch,
        learning_rate=args.lr,
        discount=args.discount,
        baseline=args.baseline,
        baseline_samples=args.baseline_samples,
        grad_clip=args.grad_clip,
        tau_iou=args.tau_iou,
        eval_every=args.eval_every,
        eval_thresholds=_parse_thresholds(args.thresholds),
    )
    result = train(train_set, val_set, config, train_cfg, args.seed, log_path=args.log)
    save_checkpoint(
        result.best_params,
        args.out,
        extra={"policy": dataclasses.asdict(config)},
    )
    status = "aborted (divergence)" if result.aborted else "done"
    print(
        f"training {status}: {len(result.history)} epochs,"
        f" best val mAP {result.best_val_map:.4f} at epoch {result.best_epoch}"
    )
    print(f"checkpoint written to {args.out}")
    return 0


def cmd_eval(args) -> int:
    params, config = _load_policy_checkpoint(args.checkpoint)
    dataset = load_dataset(args.data)
    report = evaluate(params, config, dataset, _parse_thresholds(args.thresholds))
    print(render_report(report))
    if args.report:
        with open(args.report, "w", encoding="utf-8") as fh:
            fh.write(report.to_json() + "\n")
        print(f"report written to {args.report}")
    return 0


def cmd_detect(args) -> int:
    params, config = _load_policy_checkpoint(args.checkpoint)
    dataset = load_dataset(args.data)
    for video, _gts in dataset:
        if args.video and video.id != args.video:
            continue
        dets = detect(params, config, video)
        for det in dets:
            print(
                f"{video.id}\t{det.segment.start:.4f}\t{det.segment.end:.4f}"
                f"\t{det.predicted_class}\t{det.confidence:.4f}"
            )
        if not dets:
            print(f"{video.id}\t(no detections)")
    return 0


def cmd_sweep(args) -> int:
    dataset = load_dataset(args.data)
    train_set, val_set = _split_train_val(dataset, args.val_data, args.val_fraction)
    num_classes = max(g.label for _, gts in dataset for g in gts)
    config = PolicyConfig(
        num_classes=num_classes,
        feature_dim=train_set[0][0].feature_dim,
        hidden_size=args.hidden,
        neighborhood=args.neighborhood,
        mode=args.mode,
        use_diff=args.use_diff,
    )
    train_cfg = TrainConfig(
        epochs=args.epochs,
        batch_size=args.batch,
        learning_rate=args.lr,
        eval_every=args.eval_every,
    )
    pretrained = None
    if args.checkpoint:
        pretrained, config = _load_policy_checkpoint(args.checkpoint)
    steps = [int(x) for x in args.steps.split(",")]
    rows = steps_sweep(
        train_set,
        val_set,
        config,
        train_cfg,
        steps,
        args.seed,
        pretrained=pretrained,
    )
    table = render_sweep(rows)
    print(table)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(table + "\n")
        print(f"sweep table written to {args.out}")
    return 0


def cmd_budget(args) -> int:
    model = BudgetCostModel(
        feature_ms=args.feature_ms,
        diff_ms=args.diff_ms,
        recurrent_ms=args.recurrent_ms,
        regression_ms=args.regression_ms,
        neighborhood=args.neighborhood,
        regression_samples=args.kappa,
    )
    ms = estimate_budget(model, args.steps, args.regression)
    print(f"estimated budget: {ms:.1f} ms (~{ms / 1000.0:.2f} s)")
    return 0


def cmd_trace(args) -> int:
    params, config = _load_policy_checkpoint(args.checkpoint)
    dataset = load_dataset(args.data)
    for video, gts in dataset:
        if args.video and video.id != args.video:
            continue
        print(run_trace(params, config, video, gts, args.stochastic, args.seed))
        if args.video:
            break
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="budgetdetect",
        description="Budget-aware temporal activity detection toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset file")
    p.add_argument("--out", required=True)
    p.add_argument("--videos", type=int, default=50)
    p.add_argument("--frames", type=int, default=100)
    p.add_argument("--dim", type=int, default=16)
    p.add_argument("--classes", type=int, default=3)
    p.add_argument("--segments-min", type=int, default=1)
    p.add_argument("--segments-max", type=int, default=2)
    p.add_argument("--len-min", type=int, default=10)
    p.add_argument("--len-max", type=int, default=30)
    p.add_argument("--noise", type=float, default=0.5)
    p.add_argument("--prototype-seed", type=int, default=7)
    p.add_argument("--diff", action="store_true", help="add the frame-difference channel")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a policy on a dataset file")
    p.add_argument("--data", required=True)
    p.add_argument("--val-data", default=None)
    p.add_argument("--val-fraction", type=float, default=0.2)
    p.add_argument("--out", required=True, help="checkpoint output path")
    p.add_argument("--log", default=None, help="append-only epoch log (JSON lines)")
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--steps", type=int, default=6)
    p.add_argument("--hidden", type=int, default=64)
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--neighborhood", type=int, default=15)
    p.add_argument("--mode", choices=["hybrid", "pure"], default="hybrid")
    p.add_argument("--xi-variance", type=float, default=0.18)
    p.add_argument("--loc-variance", type=float, default=0.05)
    p.add_argument("--discount", type=float, default=0.9)
    p.add_argument(
        "--baseline",
        choices=["random-policy", "constant", "none"],
        default="random-policy",
    )
    p.add_argument("--baseline-samples", type=int, default=32)
    p.add_argument("--grad-clip", type=float, default=5.0)
    p.add_argument("--tau-iou", type=float, default=0.5)
    p.add_argument("--eval-every", type=int, default=5)
    p.add_argument("--thresholds", default="0.5")
    p.add_argument("--use-diff", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--thresholds", default="0.3,0.4,0.5,0.6,0.7")
    p.add_argument("--report", default=None, help="write the JSON report here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("detect", help="print detections for a dataset file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--video", default=None, help="restrict to one video id")
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("sweep", help="steps-vs-accuracy/time sweep")
    p.add_argument("--data", required=True)
    p.add_argument("--val-data", default=None)
    p.add_argument("--val-fraction", type=float, default=0.2)
    p.add_argument("--steps", default="3,6,12", help="comma-separated step counts")
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--hidden", type=int, default=64)
    p.add_argument("--neighborhood", type=int, default=15)
    p.add_argument("--mode", choices=["hybrid", "pure"], default="hybrid")
    p.add_argument("--eval-every", type=int, default=5)
    p.add_argument("--use-diff", action="store_true")
    p.add_argument(
        "--checkpoint",
        default=None,
        help="evaluate this checkpoint at each step count instead of training",
    )
    p.add_argument("--out", default=None, help="write the sweep table here")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("budget", help="component-cost budget estimate")
    p.add_argument("--steps", type=int, default=6)
    p.add_argument("--regression", action="store_true")
    p.add_argument("--feature-ms", type=float, default=3.0)
    p.add_argument("--diff-ms", type=float, default=0.1)
    p.add_argument("--recurrent-ms", type=float, default=5.4)
    p.add_argument("--regression-ms", type=float, default=5.5)
    p.add_argument("--neighborhood", type=int, default=15)
    p.add_argument("--kappa", type=int, default=10)
    p.set_defaults(func=cmd_budget)

    p = sub.add_parser("trace", help="print a per-step trajectory trace")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--video", default=None)
    p.add_argument("--stochastic", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_trace)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
