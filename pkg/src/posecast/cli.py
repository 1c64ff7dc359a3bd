"""Command line entry point.

Subcommands:
  generate   write a synthetic motion dataset
  train      fit a model and write checkpoint, log, and figures
  eval       score a checkpoint against the repeated-last-frame baseline
  predict    forecast one sequence, optionally with attention maps
  bench      time parallel decoding against stepwise decoding

Every run directory gets delimited text outputs plus rendered PNG
figures. Exit codes: 0 on success, 1 on any reported error, 2 on
command line usage errors.
"""

from __future__ import annotations

import argparse
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .data import (
    FormatError,
    PoseDataset,
    SyntheticSpec,
    compute_stats,
    denormalize,
    generate_synthetic,
    load_poses,
    load_poses_csv,
    normalize,
    save_poses,
    window_dataset,
)
from .figures import (
    plot_attention_heatmaps,
    plot_benchmark,
    plot_horizon_curves,
    plot_per_joint_error,
    plot_prediction_tracks,
    plot_training_curves,
)
from .metrics import build_eval_report, zero_velocity_predict
from .model import (
    ModelConfig,
    MotionTransformer,
    export_attention,
    load_checkpoint,
)
from .training import AdamW, TrainConfig, train_loop, trainable_parameters


# ---------------------------------------------------------------------------
# shared helpers


def _subset(dataset: PoseDataset, indices) -> PoseDataset:
    sequences = [dataset.sequences[i] for i in indices]
    labels = None
    if dataset.labels is not None:
        labels = [dataset.labels[i] for i in indices]
    return PoseDataset(sequences, labels, dataset.num_classes)


def split_dataset(dataset: PoseDataset, val_fraction: float,
                  seed: int) -> tuple[PoseDataset, PoseDataset | None]:
    """Deterministic shuffled split; the same fraction and seed always
    carve out the same validation sequences."""
    if not (0.0 <= val_fraction < 1.0):
        raise ValueError(f"val fraction must lie in [0, 1), got {val_fraction}")
    count = len(dataset.sequences)
    if val_fraction == 0.0 or count < 2:
        return dataset, None
    order = np.random.default_rng(seed).permutation(count)
    val_count = min(count - 1, max(1, int(round(val_fraction * count))))
    val_part = np.sort(order[:val_count])
    train_part = np.sort(order[val_count:])
    return _subset(dataset, train_part), _subset(dataset, val_part)


def normalized_dataset(dataset: PoseDataset, stats) -> PoseDataset:
    sequences = [seq.with_frames(normalize(seq.frames, stats))
                 for seq in dataset.sequences]
    return PoseDataset(sequences, dataset.labels, dataset.num_classes)


def _load_dataset(args) -> PoseDataset:
    path = Path(args.data)
    if path.suffix == ".csv":
        if args.csv_joints < 1:
            raise ValueError("--csv-joints is required to read CSV data")
        labels = args.csv_labels if args.csv_labels else None
        return load_poses_csv(path, args.csv_fps, args.csv_joints,
                              representation=args.csv_representation,
                              labels_path=labels)
    return load_poses(path)


def _add_data_arguments(parser):
    parser.add_argument("--data", required=True,
                        help="dataset file (.pose, or .csv with --csv-* flags)")
    parser.add_argument("--csv-joints", type=int, default=0,
                        help="joint count when reading CSV data")
    parser.add_argument("--csv-fps", type=float, default=25.0,
                        help="frame rate when reading CSV data")
    parser.add_argument("--csv-representation", default="positions_3d",
                        choices=["positions_3d", "rotation_matrices"])
    parser.add_argument("--csv-labels", default="",
                        help="sidecar label file for CSV data")


def _add_model_arguments(parser):
    group = parser.add_argument_group("model")
    group.add_argument("--embed-dim", type=int, default=128)
    group.add_argument("--layers", type=int, default=4)
    group.add_argument("--heads", type=int, default=4)
    group.add_argument("--ffn-dim", type=int, default=0,
                       help="0 picks twice the embedding width")
    group.add_argument("--codec", default="linear",
                       choices=["linear", "gcn_enc", "gcn_dec", "gcn_full"])
    group.add_argument("--gcn-features", type=int, default=512)
    group.add_argument("--gcn-stages", type=int, default=1)
    group.add_argument("--dropout", type=float, default=0.1)
    group.add_argument("--codec-dropout", type=float, default=0.1)
    group.add_argument("--activity-source", default="class_token",
                       choices=["class_token", "memory"])
    group.add_argument("--per-layer-output-codec", action="store_true",
                       help="give each decoder layer its own pose readout")


def _model_config_from_args(args, pose_dim: int, num_joints: int,
                            num_classes: int) -> ModelConfig:
    return ModelConfig(
        pose_dim=pose_dim,
        input_len=args.input_len,
        target_len=args.target_len,
        embed_dim=args.embed_dim,
        num_layers=args.layers,
        num_heads=args.heads,
        codec=args.codec,
        num_joints=num_joints,
        gcn_stages=args.gcn_stages,
        gcn_node_features=args.gcn_features,
        num_classes=num_classes,
        activity_source=args.activity_source,
        dropout=args.dropout,
        codec_dropout=args.codec_dropout,
        ffn_dim=args.ffn_dim,
        share_output_codec=not args.per_layer_output_codec,
    )


def _parse_horizons(raw: str) -> list[int]:
    try:
        horizons = [int(part) for part in raw.split(",") if part.strip()]
    except ValueError:
        raise ValueError(f"cannot parse horizons {raw!r}; "
                         f"expected comma-separated milliseconds") from None
    if not horizons:
        raise ValueError("at least one horizon is required")
    return horizons


# ---------------------------------------------------------------------------
# generate


def cmd_generate(args) -> int:
    spec = SyntheticSpec(
        num_joints=args.joints,
        representation=args.representation,
        num_classes=args.classes,
        sequences_per_class=args.per_class,
        sequence_length=args.frames,
        frame_rate=args.fps,
        noise_sigma=args.noise,
        seed=args.seed,
    )
    dataset = generate_synthetic(spec)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_poses(out, dataset)
    total = len(dataset.sequences)
    print(f"wrote {out}: {total} sequences of {args.frames} frames, "
          f"{dataset.skeleton.pose_dim} values per frame, "
          f"{dataset.num_classes} activity classes")
    return 0


# ---------------------------------------------------------------------------
# train


def cmd_train(args) -> int:
    dataset = _load_dataset(args)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    train_ds, val_ds = split_dataset(dataset, args.val_fraction, args.seed)
    stats = compute_stats(train_ds.sequences)
    windows, skipped = window_dataset(normalized_dataset(train_ds, stats),
                                      args.input_len, args.target_len,
                                      stride=args.stride)
    if skipped:
        print(f"note: skipped {skipped} sequences shorter than "
              f"{args.input_len + args.target_len} frames", file=sys.stderr)
    eval_windows = None
    if val_ds is not None:
        eval_windows, _ = window_dataset(normalized_dataset(val_ds, stats),
                                         args.input_len, args.target_len,
                                         stride=args.stride)

    optimizer = None
    start_step = 0
    if args.resume:
        bundle = load_checkpoint(args.resume)
        model = bundle.model
        start_step = bundle.step
        if bundle.stats is not None:
            stats = bundle.stats
        if bundle.optimizer_state is not None:
            # Mirror the selection train_loop will make so the restored
            # moments line up with the parameter set.
            train_activity = (args.activity_weight > 0.0
                              and model.activity_head is not None
                              and all(w.label is not None for w in windows))
            optimizer = AdamW(trainable_parameters(model, train_activity),
                              lr=args.lr, weight_decay=args.weight_decay)
            optimizer.restore_state(bundle.optimizer_state)
        print(f"resuming from {args.resume} at step {start_step}")
    else:
        num_classes = dataset.num_classes if dataset.labels is not None else 0
        config = _model_config_from_args(args, dataset.skeleton.pose_dim,
                                         dataset.skeleton.num_joints,
                                         num_classes)
        model = MotionTransformer(config, seed=args.seed)

    train_config = TrainConfig(
        total_steps=args.steps,
        batch_size=args.batch_size,
        learning_rate=args.lr,
        weight_decay=args.weight_decay,
        warmup_steps=args.warmup,
        activity_weight=args.activity_weight,
        clip_norm=args.clip,
        seed=args.seed,
        eval_interval=args.eval_interval,
    )
    checkpoint_path = out_dir / "checkpoint.ckpt"
    log = train_loop(model, windows, train_config, eval_windows=eval_windows,
                     checkpoint_path=checkpoint_path, stats=stats,
                     optimizer=optimizer, start_step=start_step)

    log_path = out_dir / "training_log.csv"
    log.to_csv(log_path)
    figure_path = plot_training_curves(log, out_dir / "training_curves.png")

    last = log.rows[-1]
    print(f"trained {len(log.rows)} steps on {len(windows)} windows; "
          f"final motion loss {last.loss_motion:.6g}")
    if last.eval_l1 is not None:
        accuracy = ("" if last.eval_accuracy is None
                    else f", accuracy {last.eval_accuracy:.3f}")
        print(f"validation L1 {last.eval_l1:.6g}{accuracy}")
    print(f"wrote {checkpoint_path}, {log_path}, {figure_path}")
    return 0


# ---------------------------------------------------------------------------
# eval


def cmd_eval(args) -> int:
    bundle = load_checkpoint(args.checkpoint)
    model = bundle.model
    stats = bundle.stats
    if stats is None:
        raise FormatError(f"{args.checkpoint} carries no normalization stats; "
                          f"evaluation needs them to map into data space")
    dataset = _load_dataset(args)
    if args.split == "val":
        _, val_ds = split_dataset(dataset, args.val_fraction, args.seed)
        if val_ds is None:
            raise ValueError("validation split is empty; use --split all "
                             "or a positive --val-fraction")
        dataset = val_ds
    target_len = model.config.target_len
    windows, _ = window_dataset(dataset, model.config.input_len, target_len,
                                stride=args.stride)
    if not windows:
        raise ValueError("no evaluation windows; sequences are too short "
                         "for the model's input and target lengths")

    # Both predictors run through the identical normalize-and-map-back
    # pipeline, so their rows are comparable to the last bit and an
    # untrained model scores exactly like the baseline.
    def model_predict(frames):
        prediction = model.predict(normalize(frames, stats))
        return denormalize(prediction.frames, stats)

    def baseline_predict(frames):
        repeated = zero_velocity_predict(normalize(frames, stats), target_len)
        return denormalize(repeated, stats)

    predictors = {
        "model": model_predict,
        "zero_velocity": baseline_predict,
    }
    classifier = None
    labels = None
    if model.activity_head is not None and all(w.label is not None
                                               for w in windows):
        labels = [w.label for w in windows]

        def classifier(frames):
            return model.predict(normalize(frames, stats)).logits

    horizons = _parse_horizons(args.horizons)
    report = build_eval_report(
        predictors, windows, dataset.skeleton, dataset.representation,
        dataset.frame_rate, horizons, threshold=args.map_threshold,
        classifier=classifier, labels=labels,
    )

    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = [out_dir / "eval_report.csv"]
    report.to_csv(written[0])
    for metric in report.metric_names():
        table = out_dir / f"metric_{metric}.csv"
        report.metric_table_csv(metric, table)
        written.append(table)
        written.append(Path(plot_horizon_curves(
            report, metric, out_dir / f"horizon_{metric}.png")))
    per_joint_metrics = next(iter(report.per_joint.values()), {})
    if per_joint_metrics:
        table = out_dir / "per_joint.csv"
        report.per_joint_csv(table)
        written.append(table)
        for metric in per_joint_metrics:
            written.append(Path(plot_per_joint_error(
                report, metric, out_dir / f"per_joint_{metric}.png")))

    print(f"evaluated {report.num_windows} windows at horizons "
          f"{','.join(str(h) for h in horizons)} ms")
    for name in report.predictor_names():
        parts = [f"{metric} {report.aggregates[name][metric]:.6g}"
                 for metric in report.metric_names()]
        print(f"  {name}: " + ", ".join(parts))
    if report.accuracy is not None:
        print(f"  activity accuracy: {report.accuracy:.3f}")
    print("wrote " + ", ".join(str(p) for p in written))
    return 0


# ---------------------------------------------------------------------------
# predict


def cmd_predict(args) -> int:
    bundle = load_checkpoint(args.checkpoint)
    model = bundle.model
    stats = bundle.stats
    if stats is None:
        raise FormatError(f"{args.checkpoint} carries no normalization stats")
    dataset = _load_dataset(args)
    if not 0 <= args.index < len(dataset.sequences):
        raise ValueError(f"--index {args.index} outside the "
                         f"{len(dataset.sequences)} available sequences")
    sequence = dataset.sequences[args.index]
    input_len = model.config.input_len
    target_len = args.target_len or model.config.target_len
    if sequence.frames.shape[0] < input_len:
        raise ValueError(f"sequence {args.index} has "
                         f"{sequence.frames.shape[0]} frames; the model "
                         f"needs {input_len}")
    observed = sequence.frames[:input_len]
    truth = None
    if sequence.frames.shape[0] >= input_len + target_len:
        truth = sequence.frames[input_len:input_len + target_len]

    normalized = normalize(observed, stats)
    if args.stepwise:
        prediction = model.predict_autoregressive(normalized, target_len,
                                                  collect_attention=args.attention)
    else:
        prediction = model.predict(normalized, target_len,
                                   collect_attention=args.attention)
    frames = denormalize(prediction.frames, stats)

    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    csv_path = out_dir / "prediction.csv"
    np.savetxt(csv_path, frames, delimiter=",", fmt="%.17g")
    written.append(csv_path)
    pose_path = out_dir / "prediction.pose"
    save_poses(pose_path, PoseDataset([sequence.with_frames(frames)]))
    written.append(pose_path)
    if truth is not None:
        figure = plot_prediction_tracks(observed, truth, frames,
                                        out_dir / "prediction_tracks.png",
                                        frame_rate=sequence.frame_rate)
        written.append(Path(figure))
    if args.attention:
        decoder_maps = [m for m in prediction.attention if m.stage == "decoder"]
        written.extend(Path(p) for p in export_attention(decoder_maps, out_dir))
        written.append(Path(plot_attention_heatmaps(
            decoder_maps, out_dir / "attention.png")))

    mode = "stepwise" if args.stepwise else "parallel"
    print(f"predicted {target_len} frames ({mode} decoding) for sequence "
          f"{args.index}")
    if prediction.logits is not None:
        predicted_class = int(np.argmax(prediction.logits))
        print(f"predicted activity class: {predicted_class}")
    if truth is not None:
        l1 = float(np.abs(frames - truth).mean())
        baseline = zero_velocity_predict(observed, target_len)
        base_l1 = float(np.abs(baseline - truth).mean())
        print(f"mean absolute error {l1:.6g} (repeat-last-frame baseline "
              f"{base_l1:.6g})")
    print("wrote " + ", ".join(str(p) for p in written))
    return 0


# ---------------------------------------------------------------------------
# bench


@dataclass
class BenchResult:
    mode: str
    median_sps: float
    min_sps: float
    max_sps: float
    reps: int
    sequences: int
    decoder_calls_per_sequence: float


def _bench_mode(model: MotionTransformer, inputs, target_len: int,
                mode: str, reps: int, warmup: int) -> BenchResult:
    def run_once() -> float:
        model.reset_decoder_calls()
        start = time.perf_counter()
        for frames in inputs:
            if mode == "parallel":
                model.predict(frames, target_len)
            else:
                model.predict_autoregressive(frames, target_len)
        elapsed = time.perf_counter() - start
        return len(inputs) / elapsed

    for _ in range(warmup):
        run_once()
    rates = [run_once() for _ in range(reps)]
    calls = model.decoder_calls / len(inputs)
    return BenchResult(
        mode=mode,
        median_sps=float(np.median(rates)),
        min_sps=float(min(rates)),
        max_sps=float(max(rates)),
        reps=reps,
        sequences=len(inputs),
        decoder_calls_per_sequence=calls,
    )


def cmd_bench(args) -> int:
    if args.reps < 3:
        raise ValueError(f"--reps must be >= 3 for stable medians, got {args.reps}")
    if args.checkpoint:
        model = load_checkpoint(args.checkpoint).model
    else:
        config = _model_config_from_args(args, args.pose_dim,
                                         args.joints, num_classes=0)
        model = MotionTransformer(config, seed=args.seed)
    config = model.config
    rng = np.random.default_rng(args.seed)
    inputs = [rng.normal(size=(config.input_len, config.pose_dim))
              for _ in range(args.sequences)]
    target_len = args.target_len

    modes = ["parallel", "stepwise"] if args.mode == "both" else [args.mode]
    results = [_bench_mode(model, inputs, target_len, mode,
                           args.reps, args.bench_warmup)
               for mode in modes]

    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / "bench.csv"
    lines = ["mode,median_sps,min_sps,max_sps,reps,sequences,"
             "decoder_calls_per_sequence"]
    for r in results:
        lines.append(f"{r.mode},{r.median_sps:.12g},{r.min_sps:.12g},"
                     f"{r.max_sps:.12g},{r.reps},{r.sequences},"
                     f"{r.decoder_calls_per_sequence:.12g}")
    csv_path.write_text("\n".join(lines) + "\n")
    figure = plot_benchmark(
        {r.mode: {"median_sps": r.median_sps, "min_sps": r.min_sps,
                  "max_sps": r.max_sps} for r in results},
        out_dir / "bench.png")

    print(f"decoding {target_len} future frames from {config.input_len} "
          f"observed, {args.sequences} sequences per run, {args.reps} runs")
    for r in results:
        print(f"  {r.mode}: median {r.median_sps:.2f} seq/s "
              f"(min {r.min_sps:.2f}, max {r.max_sps:.2f}), "
              f"{r.decoder_calls_per_sequence:.0f} decoder calls per sequence")
    if len(results) == 2:
        speedup = results[0].median_sps / results[1].median_sps
        print(f"  parallel decoding is {speedup:.2f}x the stepwise throughput")
    print(f"wrote {csv_path}, {figure}")
    return 0


# ---------------------------------------------------------------------------
# parser plumbing


def _coerce(raw: str):
    lowered = raw.lower()
    if lowered == "true":
        return True
    if lowered == "false":
        return False
    for kind in (int, float):
        try:
            return kind(raw)
        except ValueError:
            pass
    return raw


def _apply_config_file(path, subparser) -> None:
    valid = {action.dest for action in subparser._actions}
    values = {}
    for number, line in enumerate(Path(path).read_text().splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise FormatError(f"{path}:{number}: expected key=value, "
                              f"got {stripped!r}")
        key, _, raw = stripped.partition("=")
        key = key.strip().replace("-", "_")
        if key not in valid:
            raise FormatError(f"{path}:{number}: unknown option {key!r}")
        values[key] = _coerce(raw.strip())
    subparser.set_defaults(**values)


def build_parser() -> tuple[argparse.ArgumentParser, dict]:
    parser = argparse.ArgumentParser(
        prog="posecast",
        description="forecast skeletal motion with a parallel-decoding transformer",
    )
    parser.add_argument("--version", action="version", version=__version__)
    subparsers = parser.add_subparsers(dest="command", required=True)
    registry = {}

    gen = subparsers.add_parser("generate", help="write a synthetic dataset")
    gen.add_argument("--out", required=True, help="output .pose file")
    gen.add_argument("--classes", type=int, default=2)
    gen.add_argument("--per-class", type=int, default=50)
    gen.add_argument("--frames", type=int, default=60)
    gen.add_argument("--fps", type=float, default=25.0)
    gen.add_argument("--joints", type=int, default=4)
    gen.add_argument("--noise", type=float, default=0.01)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--representation", default="positions_3d",
                     choices=["positions_3d", "rotation_matrices"])
    gen.set_defaults(handler=cmd_generate)
    registry["generate"] = gen

    train = subparsers.add_parser("train", help="fit a model")
    _add_data_arguments(train)
    train.add_argument("--out-dir", required=True)
    train.add_argument("--input-len", type=int, default=10)
    train.add_argument("--target-len", type=int, default=10)
    train.add_argument("--stride", type=int, default=1)
    train.add_argument("--val-fraction", type=float, default=0.1)
    train.add_argument("--steps", type=int, default=2000)
    train.add_argument("--batch-size", type=int, default=16)
    train.add_argument("--lr", type=float, default=1e-4)
    train.add_argument("--weight-decay", type=float, default=1e-5)
    train.add_argument("--warmup", type=int, default=-1,
                       help="warmup steps; -1 picks a tenth of --steps")
    train.add_argument("--activity-weight", type=float, default=1.0)
    train.add_argument("--clip", type=float, default=1.0)
    train.add_argument("--eval-interval", type=int, default=0,
                       help="evaluate every N steps; 0 means only at the end")
    train.add_argument("--seed", type=int, default=0)
    train.add_argument("--resume", default="",
                       help="checkpoint to continue training from")
    _add_model_arguments(train)
    train.set_defaults(handler=cmd_train)
    registry["train"] = train

    evaluate = subparsers.add_parser("eval", help="score a checkpoint")
    _add_data_arguments(evaluate)
    evaluate.add_argument("--checkpoint", required=True)
    evaluate.add_argument("--out-dir", required=True)
    evaluate.add_argument("--horizons", default="80,160,320,400",
                          help="comma-separated milliseconds")
    evaluate.add_argument("--map-threshold", type=float, default=0.10)
    evaluate.add_argument("--stride", type=int, default=1)
    evaluate.add_argument("--split", default="all", choices=["all", "val"])
    evaluate.add_argument("--val-fraction", type=float, default=0.1)
    evaluate.add_argument("--seed", type=int, default=0,
                          help="must match the training seed for --split val")
    evaluate.set_defaults(handler=cmd_eval)
    registry["eval"] = evaluate

    predict = subparsers.add_parser("predict", help="forecast one sequence")
    _add_data_arguments(predict)
    predict.add_argument("--checkpoint", required=True)
    predict.add_argument("--out-dir", required=True)
    predict.add_argument("--index", type=int, default=0)
    predict.add_argument("--target-len", type=int, default=0,
                         help="0 keeps the model's trained horizon")
    predict.add_argument("--attention", action="store_true",
                         help="export decoder attention CSVs and a heatmap")
    predict.add_argument("--stepwise", action="store_true",
                         help="decode frame by frame instead of in parallel")
    predict.set_defaults(handler=cmd_predict)
    registry["predict"] = predict

    bench = subparsers.add_parser("bench",
                                  help="compare decoding throughput")
    bench.add_argument("--out-dir", required=True)
    bench.add_argument("--checkpoint", default="",
                       help="time a trained model instead of a fresh one")
    bench.add_argument("--mode", default="both",
                       choices=["both", "parallel", "stepwise"])
    bench.add_argument("--pose-dim", type=int, default=12)
    bench.add_argument("--joints", type=int, default=4)
    bench.add_argument("--input-len", type=int, default=10)
    bench.add_argument("--target-len", type=int, default=20)
    bench.add_argument("--sequences", type=int, default=4,
                       help="sequences decoded per timed run")
    bench.add_argument("--reps", type=int, default=5)
    bench.add_argument("--bench-warmup", type=int, default=1,
                       help="untimed runs before measuring")
    bench.add_argument("--seed", type=int, default=0)
    _add_model_arguments(bench)
    bench.set_defaults(handler=cmd_bench)
    registry["bench"] = bench

    for sub in registry.values():
        sub.add_argument("--config", default="",
                         help="file of key=value lines giving option defaults")

    return parser, registry


def main(argv=None) -> int:
    parser, registry = build_parser()
    if argv is None:
        argv = sys.argv[1:]
    try:
        args = parser.parse_args(argv)
        if getattr(args, "config", ""):
            _apply_config_file(args.config, registry[args.command])
            args = parser.parse_args(argv)
        return args.handler(args)
    except (ValueError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
