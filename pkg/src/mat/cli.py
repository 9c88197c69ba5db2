"""Command-line entry point.

Subcommands: gen-data, train, eval, stream, gradcheck. All take a JSON
config file plus dotted --set overrides, echo the resolved config into
their artifacts, and exit with distinct codes per failure class.
"""

import os

if "MAT_THREADS" in os.environ:  # must run before numpy loads its BLAS
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                 "NUMEXPR_NUM_THREADS"):
        os.environ.setdefault(_var, os.environ["MAT_THREADS"])

import argparse
import csv
import json
import sys

import numpy as np

from .blocks import AttentionExport
from .config import RunConfig, config_from_dict, load_config
from .data import (
    SyntheticGrammar,
    extract_window,
    generate_synthetic,
    load_manifest_videos,
    load_video_pair,
    make_samples,
)
from .errors import (
    ArgumentError,
    CheckFailure,
    ConfigError,
    DataFormatError,
    DivergenceError,
    LabelError,
    MaskError,
    MatError,
    ShapeError,
)
from .gradcheck import format_gradcheck_table, run_gradcheck, tiny_config
from .model import MATModel
from .streaming import evaluate_videos, replay_file
from .training import Adam, load_checkpoint, save_checkpoint, train_model

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_DIVERGENCE = 4
EXIT_CHECK = 5


def _parse_taus(text: str):
    try:
        return [float(part) for part in text.split(",") if part.strip()]
    except ValueError as exc:
        raise ConfigError(f"cannot parse taus {text!r}: {exc}") from exc


def _grammar_from(cfg: RunConfig) -> SyntheticGrammar:
    return SyntheticGrammar(
        num_classes=cfg.model.num_classes,
        seg_len_min=cfg.data.seg_len_min,
        seg_len_max=cfg.data.seg_len_max,
        lag=cfg.data.lag_segments,
        sigma=cfg.data.noise_sigma,
        fps=cfg.model.fps,
    )


def cmd_gen_data(args) -> int:
    cfg = load_config(args.config, args.set)
    grammar = _grammar_from(cfg)
    steps = list(range(cfg.model.fps, cfg.model.num_future_steps + 1, cfg.model.fps))
    result = generate_synthetic(
        grammar, dim=cfg.model.embed_dim,
        split_videos={"train": cfg.data.videos_train, "eval": cfg.data.videos_eval},
        frames_per_video=cfg.data.frames_per_video,
        seed=cfg.model.seed, out_dir=args.out, oracle_steps=steps)
    with open(os.path.join(args.out, "config.json"), "w", encoding="utf-8") as fh:
        json.dump(cfg.to_dict(), fh, indent=2, sort_keys=True)
    print(f"manifest: {result['manifest']}")
    print(f"oracle report: {result['oracle_report']}")
    for split, stats in result["report"]["splits"].items():
        bayes = stats["bayes_anticipation_accuracy"]
        print(f"  {split}: {stats['videos']} videos, {stats['frames']} frames, "
              f"bayes@steps {bayes}")
    return EXIT_OK


def _build_pool(cfg: RunConfig, manifest: str):
    videos = load_manifest_videos(manifest, split="train")
    if not videos:
        raise DataFormatError(f"manifest {manifest} has no train videos")
    pool = []
    for video in videos:
        pool.extend(make_samples(video, cfg.model.long_len, cfg.model.short_len,
                                 cfg.model.num_future_steps, stride=1))
    if not pool:
        raise DataFormatError("no usable training windows (videos too short?)")
    return pool


def cmd_train(args) -> int:
    cfg = load_config(args.config, args.set)
    model = MATModel(cfg.model)
    optimizer = Adam(model.parameters(), lr=cfg.model.lr)
    start_step = 0
    if args.resume:
        echo, blobs = load_checkpoint(args.resume)
        model.load_blobs(blobs)
        optimizer.load_blobs(blobs)
        start_step = optimizer.step_count
        print(f"resumed from {args.resume} at step {start_step}")
    pool = _build_pool(cfg, args.manifest)

    def on_log(row):
        text = " ".join(f"{k}={v:.4f}" for k, v in row.items() if k != "step")
        print(f"step {row['step']}: {text}")

    history = train_model(model, optimizer, pool, cfg.model,
                          start_step=start_step, on_log=on_log)

    blobs = model.export_blobs()
    blobs.update(optimizer.export_blobs())
    save_checkpoint(args.out, cfg.to_dict(), blobs)
    log_path = args.loss_log or args.out + ".loss.csv"
    columns = ["step", "total"]
    columns += [f"loss_short_{i}" for i in range(cfg.model.num_rounds + 1)]
    columns += [f"loss_future_{i}" for i in range(cfg.model.num_rounds + 1)]
    with open(log_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns)
        writer.writeheader()
        for row in history:
            writer.writerow({k: row.get(k, "") for k in columns})
    with open(args.out + ".config.json", "w", encoding="utf-8") as fh:
        json.dump(cfg.to_dict(), fh, indent=2, sort_keys=True)
    print(f"checkpoint: {args.out}")
    print(f"loss log: {log_path}")
    return EXIT_OK


def _model_from_checkpoint(path: str, config_path, overrides):
    echo, blobs = load_checkpoint(path)
    if config_path is not None or overrides:
        cfg = load_config(config_path, overrides)
    else:
        cfg = config_from_dict(echo)
    model = MATModel(cfg.model)
    model.load_blobs(blobs)
    return cfg, model


def cmd_eval(args) -> int:
    cfg, model = _model_from_checkpoint(args.checkpoint, args.config, args.set)
    videos = load_manifest_videos(args.manifest, split=args.split)
    if not videos:
        raise DataFormatError(f"no videos in split {args.split!r}")
    taus = _parse_taus(args.taus)
    report, _, _ = evaluate_videos(model, videos, taus, config_echo=cfg.to_dict(),
                                   use_streaming=args.streaming)
    report.to_json(args.out)
    print(f"report: {args.out}")
    print(f"frames={report.frame_count} mAP={report.mean_ap:.4f} "
          f"mcAP={report.mean_cap:.4f} top{report.recall_k}R={report.mean_recall:.4f} "
          f"detection_acc={report.detection_accuracy:.4f}")
    for tau, acc in report.anticipation_accuracy.items():
        print(f"anticipation tau={tau}s accuracy={acc:.4f}")
    return EXIT_OK


def cmd_stream(args) -> int:
    cfg, model = _model_from_checkpoint(args.checkpoint, args.config, args.set)
    video = load_video_pair(args.features, args.labels)
    taus = _parse_taus(args.taus)
    report = replay_file(model, video, taus, args.report,
                         curves_dir=args.curves_dir, config_echo=cfg.to_dict())
    if args.attn_csv:
        window, valid = extract_window(video.features, video.frames - 1,
                                       cfg.model.window_len)
        export = AttentionExport()
        model.infer(window, valid, export=export)
        export.write_csv(args.attn_csv)
        print(f"attention weights: {args.attn_csv}")
    print(f"report: {args.report}")
    print(f"frames={report.frame_count} mAP={report.mean_ap:.4f} "
          f"detection_acc={report.detection_accuracy:.4f}")
    for tau, acc in report.anticipation_accuracy.items():
        print(f"anticipation tau={tau}s accuracy={acc:.4f}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    if args.config is not None or args.set:
        cfg = load_config(args.config, args.set)
        model_cfg = cfg.model
    else:
        model_cfg = tiny_config()
    rows, ok = run_gradcheck(model_cfg)
    print(format_gradcheck_table(rows))
    if not ok:
        raise CheckFailure("gradient check failed")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mat",
        description="online action detection and anticipation over feature streams")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default=None, help="JSON config file")
        p.add_argument("--set", action="append", default=[], metavar="SEC.KEY=VAL",
                       help="override config values")

    p = sub.add_parser("gen-data", help="generate a synthetic dataset + oracle report")
    common(p)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model on a dataset manifest")
    common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.add_argument("--loss-log", default=None, help="CSV path (default <out>.loss.csv)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a manifest split")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="eval")
    p.add_argument("--taus", default="1.0", help="comma-separated gap seconds")
    p.add_argument("--out", required=True, help="report JSON path")
    p.add_argument("--streaming", action="store_true",
                   help="use the streaming engine instead of sliding windows")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("stream", help="replay one video through the streaming engine")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--taus", default="1.0")
    p.add_argument("--report", required=True, help="report JSON path")
    p.add_argument("--curves-dir", default=None, help="write per-class score CSVs here")
    p.add_argument("--attn-csv", default=None,
                   help="export final-frame attention weights to this CSV")
    p.set_defaults(func=cmd_stream)

    p = sub.add_parser("gradcheck", help="finite-difference check of every parameter group")
    common(p)
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ArgumentError, ShapeError, LabelError, MaskError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataFormatError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as exc:
        print(f"divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except CheckFailure as exc:
        print(f"check failed: {exc}", file=sys.stderr)
        return EXIT_CHECK
    except MatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
