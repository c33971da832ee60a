"""コマンドライン

    samplecnn train --config run.json [--out DIR]
    samplecnn eval --checkpoint best.ckpt --manifest manifest.jsonl --split test [--threshold 0.5]
    samplecnn predict --checkpoint best.ckpt --wav clip.wav [--topk 5]
    samplecnn visualize --checkpoint best.ckpt --layer 6 --out DIR
    samplecnn inspect --config run.json | --preset dcase [--block-kind rese2]

ログは stderr、結果は stdout に key=value 形式で出す
終了コードは成功 0、実行時エラー 1、使い方の誤り 2
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import math
import sys
from collections.abc import Sequence
from pathlib import Path

import numpy as np

from .audio import read_wav
from .checkpoint import Checkpoint, load_checkpoint
from .config import load_run_config, model_from_dict
from .dataset import Split, TaskKind, load_clips, load_manifest
from .layers import ConfigError
from .model import ModelConfig, OutputKind, extent_trace, receptive_field
from .presets import PRESETS
from .tensor import NonFiniteError
from .training import MetricRow, evaluate, predict_clip, train, write_metric_log
from .viz import VizConfig, check_viz_geometry, emit_sheet, visualize_layer

logger = logging.getLogger(__name__)

__all__ = ["main", "run"]

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_USAGE = 2


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="samplecnn", description="sample-level raw waveform CNN (SampleCNN / ReSE-2-Multi)"
    )
    verbosity = parser.add_mutually_exclusive_group()
    verbosity.add_argument("-v", "--verbose", action="store_true", help="DEBUG ログを出す")
    verbosity.add_argument("-q", "--quiet", action="store_true", help="WARNING 以上だけを出す")
    commands = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = commands.add_parser("train", help="学習してチェックポイントと指標ログを書く")
    p.add_argument("--config", required=True, type=Path)
    p.add_argument("--out", type=Path, help="出力ディレクトリ (既定は設定の output_dir)")
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int)

    p = commands.add_parser("eval", help="チェックポイントを評価する")
    p.add_argument("--checkpoint", required=True, type=Path)
    p.add_argument("--manifest", required=True, type=Path)
    p.add_argument("--split", default="test", choices=[s.value for s in Split])
    p.add_argument("--threshold", type=float)
    p.add_argument("--segments", type=int, default=1)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", type=Path, help="指標 CSV の出力先 (既定はチェックポイントのディレクトリ)")

    p = commands.add_parser("predict", help="1 クリップのクラススコアを出す")
    p.add_argument("--checkpoint", required=True, type=Path)
    p.add_argument("--wav", required=True, type=Path)
    p.add_argument("--topk", type=int)
    p.add_argument("--segments", type=int, default=1)

    p = commands.add_parser("visualize", help="層のフィルタを可視化する")
    p.add_argument("--checkpoint", required=True, type=Path)
    p.add_argument("--layer", required=True, type=int)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--config", type=Path, help="viz セクションを既定値に使う実行設定")
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int, default=1)

    p = commands.add_parser("inspect", help="時間長の推移と受容野を表示する")
    source = p.add_mutually_exclusive_group(required=True)
    source.add_argument("--config", type=Path)
    source.add_argument("--preset", choices=sorted(PRESETS))
    p.add_argument("--block-kind", default="basic", choices=["basic", "rese2"])
    return parser


def _emit(key: str, value: object) -> None:
    print(f"{key}={value}")


def _task_of(checkpoint: Checkpoint) -> TaskKind:
    if "task" in checkpoint.metadata:
        return TaskKind(checkpoint.metadata["task"])
    if checkpoint.config.head.output is OutputKind.SOFTMAX_MULTICLASS:
        return TaskKind.MULTICLASS
    return TaskKind.MULTILABEL


def _labels_of(checkpoint: Checkpoint) -> list[str]:
    vocabulary = checkpoint.metadata.get("vocabulary")
    if vocabulary:
        return [str(v) for v in vocabulary]
    return [f"class{i}" for i in range(checkpoint.config.head.n_classes)]


def _cmd_train(args: argparse.Namespace) -> int:
    config = load_run_config(args.config)
    config.check_files()
    if args.seed is not None:
        config = dataclasses.replace(config, train=dataclasses.replace(config.train, seed=args.seed))
    workers = args.workers or config.data.workers
    manifest = load_manifest(config.data.manifest, config.data.task)
    out_dir = args.out or Path(config.output_dir)
    result = train(
        config.model,
        config.train,
        manifest,
        out_dir,
        eval_segments=config.data.segments,
        threshold=config.data.threshold,
        workers=workers,
    )
    _emit("checkpoint", result.checkpoint_path)
    _emit("metrics", result.log_path)
    _emit("best_epoch", result.best.metadata["epoch"])
    _emit(result.best.metadata["metric"], repr(result.best.metadata["best_metric"]))
    return EXIT_OK


def _cmd_eval(args: argparse.Namespace) -> int:
    checkpoint = load_checkpoint(args.checkpoint)
    task = _task_of(checkpoint)
    manifest = load_manifest(args.manifest, task)
    expected = checkpoint.metadata.get("vocabulary")
    if expected and list(manifest.vocabulary) != list(expected):
        raise ConfigError("マニフェストのラベル語彙がチェックポイントと一致しません")
    records = manifest.split(args.split)
    if not records:
        raise ValueError(f"split {args.split} のクリップがありません")
    model = checkpoint.to_model()
    clips = load_clips(records, model.config.sample_rate, args.workers)
    metrics = evaluate(
        model,
        clips,
        task,
        n_segments=args.segments,
        threshold=args.threshold,
        workers=args.workers,
    )
    for name, value in metrics.items():
        _emit(name, repr(value))
    out_dir = args.out or args.checkpoint.parent
    out_dir.mkdir(parents=True, exist_ok=True)
    epoch = int(checkpoint.metadata.get("epoch", 0))
    path = out_dir / f"eval_{args.split}.csv"
    write_metric_log([MetricRow(epoch, args.split, k, v) for k, v in metrics.items()], path)
    logger.info("metrics written: %s", path)
    return EXIT_OK


def _cmd_predict(args: argparse.Namespace) -> int:
    checkpoint = load_checkpoint(args.checkpoint)
    model = checkpoint.to_model()
    scores = predict_clip(model, read_wav(args.wav), args.segments)
    labels = _labels_of(checkpoint)
    order = np.argsort(-scores, kind="stable")
    if args.topk is not None:
        if args.topk < 1:
            raise ValueError(f"--topk は 1 以上です: {args.topk}")
        order = order[: args.topk]
    for i in order:
        _emit(labels[i], repr(float(scores[i])))
    return EXIT_OK


def _cmd_visualize(args: argparse.Namespace) -> int:
    checkpoint = load_checkpoint(args.checkpoint)
    check_viz_geometry(checkpoint.config)
    cfg = load_run_config(args.config).viz if args.config else VizConfig()
    overrides: dict[str, int] = {"layer": args.layer}
    if args.steps is not None:
        overrides["steps"] = args.steps
    if args.seed is not None:
        overrides["seed"] = args.seed
    cfg = dataclasses.replace(cfg, **overrides)
    cfg.validate()
    sheet = visualize_layer(checkpoint.to_model(), args.layer, cfg, args.workers)
    csv_path, pgm_path = emit_sheet(sheet, args.out)
    _emit("csv", csv_path)
    _emit("pgm", pgm_path)
    _emit("dead_filters", sum(sheet.dead))
    return EXIT_OK


def _inspect_config(args: argparse.Namespace) -> ModelConfig:
    if args.preset:
        return model_from_dict({"preset": args.preset, "block_kind": args.block_kind})
    raw = json.loads(args.config.read_text(encoding="utf-8"))
    if isinstance(raw, dict) and "version" in raw:
        return load_run_config(args.config).model
    return model_from_dict(raw)


def _cmd_inspect(args: argparse.Namespace) -> int:
    config = _inspect_config(args)
    trace = extent_trace(config)
    _emit("input_len", config.input_len)
    for depth, extent in enumerate(trace):
        stage = "stem" if depth == 0 else f"block{depth - 1}"
        print(f"stage={stage} extent={extent} receptive_field={receptive_field(config, depth)}")
    downsampling = config.stem.stride * math.prod(b.pool_size for b in config.blocks)
    _emit("blocks", len(config.blocks))
    _emit("final_extent", trace[-1])
    _emit("total_downsampling", downsampling)
    _emit("concat_taps", ",".join(str(t) for t in config.concat_taps))
    _emit("head_width", config.head_width)
    return EXIT_OK


COMMANDS = {
    "train": _cmd_train,
    "eval": _cmd_eval,
    "predict": _cmd_predict,
    "visualize": _cmd_visualize,
    "inspect": _cmd_inspect,
}


def _configure_logging(args: argparse.Namespace) -> None:
    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    logging.basicConfig(stream=sys.stderr, format=LOG_FORMAT, level=level)
    logging.getLogger("samplecnn").setLevel(level)


def run(argv: Sequence[str] | None = None) -> int:
    """サブコマンドを実行して終了コードを返す"""
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code in (0, None) else EXIT_USAGE
    _configure_logging(args)
    try:
        return COMMANDS[args.command](args)
    except (OSError, ValueError, RuntimeError, NonFiniteError) as e:
        print(f"samplecnn {args.command}: error: {e}", file=sys.stderr)
        return EXIT_ERROR


def main() -> None:
    sys.exit(run())
