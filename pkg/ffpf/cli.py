"""
Command-line interface for ffpf.
"""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Iterable

from pydantic import BaseModel, ValidationError

from ffpf._version import VERSION
from ffpf.checkpoint import load_checkpoint, save_checkpoint
from ffpf.data import box_area_fractions, generate_dataset, load_dataset
from ffpf.detect import write_detections
from ffpf.exceptions import FFPFError
from ffpf.gradcheck import grad_check_suite
from ffpf.models import (
    SHAPE_CLASSES,
    AblationRow,
    BenchRow,
    EvaluationResult,
    GradCheckReport,
    ModelConfig,
    SceneSpec,
    TrainConfig,
)
from ffpf.settings import get_settings
from ffpf.spectral import bench_fft
from ffpf.tensor import set_debug
from ffpf.train import ablate, evaluate, restore_model, train

SMALL_OBJECT_AREA = 0.03


def _write_jsonl(path: Path, rows: Iterable[BaseModel | dict]) -> None:
    lines = [r.model_dump_json() if isinstance(r, BaseModel) else json.dumps(r) for r in rows]
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(line + "\n" for line in lines))


def _split_dir(root: Path, split: str) -> Path:
    """``root/split`` when it exists, else ``root`` itself."""
    candidate = root / split
    return candidate if candidate.is_dir() else root


def _class_name(class_id: int) -> str:
    return SHAPE_CLASSES[class_id] if class_id < len(SHAPE_CLASSES) else str(class_id)


def _format_ap_table(result: EvaluationResult) -> str:
    lines = [f"{'class':<10} {'AP@0.5':>8}"]
    for k, ap in sorted(result.per_class_ap.items()):
        lines.append(f"{_class_name(k):<10} {ap:>8.4f}")
    lines.append(f"{'mAP':<10} {result.map:>8.4f}")
    lines.append(f"Detections: {result.num_detections}")
    return "\n".join(lines)


def _format_ablation(rows: list[AblationRow]) -> str:
    lines = [f"{'config':<12} {'F-ResNet':>9} {'BS-FPN':>7} {'AP@0.5':>8}"]
    for r in rows:
        fu = "yes" if r.fu else "-"
        bs = "yes" if r.bs_fpn else "-"
        lines.append(f"{r.name:<12} {fu:>9} {bs:>7} {r.ap50:>8.4f}")
    return "\n".join(lines)


def _format_grad_check(report: GradCheckReport) -> str:
    lines = [f"{'check':<22} {'max rel err':>12} {'threshold':>10}  status"]
    for e in report.entries:
        status = "ok" if e.passed else f"FAIL at {e.location}"
        lines.append(f"{e.name:<22} {e.max_rel_error:>12.3e} {e.threshold:>10.0e}  {status}")
    lines.append("PASSED" if report.passed else "FAILED")
    return "\n".join(lines)


def _format_bench(rows: list[BenchRow]) -> str:
    lines = [f"{'size':>6} {'rfft2 ms':>10} {'irfft2 ms':>10} {'roundtrip':>11} {'vs DFT':>11}"]
    for r in rows:
        lines.append(
            f"{r.size:>6} {r.rfft2_ms:>10.3f} {r.irfft2_ms:>10.3f} "
            f"{r.roundtrip_max_abs:>11.2e} {r.dft_max_abs:>11.2e}"
        )
    return "\n".join(lines)


def _gen_data(args: argparse.Namespace) -> str:
    spec = SceneSpec(image_size=args.size)
    n_test = args.n_test if args.n_test is not None else max(1, args.n // 4)
    train_records = generate_dataset(spec, args.n, args.seed, args.out / "train")
    test_records = generate_dataset(spec, n_test, args.seed + 1, args.out / "test")
    areas = box_area_fractions(train_records + test_records, spec.image_size)
    summary = {
        "out": str(args.out),
        "train_images": len(train_records),
        "test_images": len(test_records),
        "boxes": int(len(areas)),
        "mean_area_fraction": float(areas.mean()),
        "max_area_fraction": float(areas.max()),
        "small_objects": bool(areas.max() < SMALL_OBJECT_AREA),
    }
    _write_jsonl(args.out / "gen-data.jsonl", [summary])
    return "\n".join(
        [
            f"Dataset: {args.out}",
            f"Images: {summary['train_images']} train / {summary['test_images']} test",
            f"Boxes: {summary['boxes']}",
            f"Box area / image area: mean {summary['mean_area_fraction']:.4f}, "
            f"max {summary['max_area_fraction']:.4f}",
        ]
    )


def _train(args: argparse.Namespace) -> str:
    train_data = load_dataset(_split_dir(args.data, "train"))
    test_dir = args.data / "test"
    eval_data = load_dataset(test_dir) if test_dir.is_dir() else None
    resume = load_checkpoint(args.resume) if args.resume is not None else None
    if resume is not None:
        model_config = resume.config
    else:
        model_config = ModelConfig(seed=args.seed).variant(
            fu=not args.no_fu, bs_fpn=not args.no_bsfpn
        )
    train_config = TrainConfig(
        epochs=args.epochs, lr=args.lr, seed=args.seed, batch_size=args.batch_size
    )
    metrics_path = args.out.with_suffix(".metrics.jsonl")
    result = train(train_data, model_config, train_config, eval_data, metrics_path, resume)
    save_checkpoint(args.out, result.checkpoint)
    lines = [f"{'epoch':>5} {'lr':>10} {'loss':>10} {'AP@0.5':>8}"]
    for m in result.metrics:
        ap = "-" if m.ap50 is None else f"{m.ap50:.4f}"
        lines.append(f"{m.epoch:>5} {m.lr:>10.2e} {m.mean_loss:>10.5f} {ap:>8}")
    lines.append(f"Checkpoint: {args.out}")
    return "\n".join(lines)


def _eval(args: argparse.Namespace) -> str:
    dataset = load_dataset(_split_dir(args.data, "test"))
    model = restore_model(load_checkpoint(args.ckpt))
    result, detections = evaluate(model, dataset)
    if args.dump is not None:
        write_detections(args.dump, detections)
    _write_jsonl(args.ckpt.with_suffix(".eval.jsonl"), [result])
    return _format_ap_table(result)


def _ablate(args: argparse.Namespace) -> str:
    train_data = load_dataset(_split_dir(args.data, "train"))
    test_dir = args.data / "test"
    eval_data = load_dataset(test_dir) if test_dir.is_dir() else None
    rows = ablate(train_data, TrainConfig(epochs=args.epochs, seed=args.seed), eval_data)
    table = _format_ablation(rows)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    args.out.write_text(table + "\n")
    _write_jsonl(args.out.with_suffix(".jsonl"), rows)
    return table


def _parse_sizes(value: str) -> list[int]:
    try:
        sizes = [int(s) for s in value.split(",") if s.strip()]
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"sizes must be comma-separated integers: {value}") from e
    if not sizes or any(s < 1 for s in sizes):
        raise argparse.ArgumentTypeError(f"sizes must be positive: {value}")
    return sizes


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ffpf", description="FFPF detector CLI")
    parser.add_argument("--version", action="version", version=f"ffpf {VERSION}")
    subparsers = parser.add_subparsers(dest="command")

    # gen-data
    sp_gen = subparsers.add_parser("gen-data", help="Generate a synthetic dataset")
    sp_gen.add_argument("--out", type=Path, required=True, help="Output directory")
    sp_gen.add_argument("--n", type=int, required=True, help="Number of training images")
    sp_gen.add_argument("--seed", type=int, default=0)
    sp_gen.add_argument("--size", type=int, default=64, help="Image side in pixels")
    sp_gen.add_argument(
        "--n-test", type=int, default=None, help="Number of test images (default n/4)"
    )

    # train
    sp_train = subparsers.add_parser("train", help="Train a detector")
    sp_train.add_argument("--data", type=Path, required=True)
    sp_train.add_argument("--out", type=Path, required=True, help="Checkpoint path")
    sp_train.add_argument("--epochs", type=int, default=12)
    sp_train.add_argument("--lr", type=float, default=0.01)
    sp_train.add_argument("--seed", type=int, default=0)
    sp_train.add_argument("--batch-size", type=int, default=8)
    sp_train.add_argument("--no-fu", action="store_true", help="Disable Fourier Units")
    sp_train.add_argument("--no-bsfpn", action="store_true", help="Use the plain FPN neck")
    sp_train.add_argument(
        "--resume",
        type=Path,
        default=None,
        help="Continue from this checkpoint (its config wins over --no-fu/--no-bsfpn)",
    )

    # eval
    sp_eval = subparsers.add_parser("eval", help="Evaluate a checkpoint (AP@0.5)")
    sp_eval.add_argument("--data", type=Path, required=True)
    sp_eval.add_argument("--ckpt", type=Path, required=True)
    sp_eval.add_argument("--dump", type=Path, default=None, help="Write detections here")

    # ablate
    sp_ablate = subparsers.add_parser("ablate", help="Run the four-way ablation")
    sp_ablate.add_argument("--data", type=Path, required=True)
    sp_ablate.add_argument("--out", type=Path, required=True, help="Table path")
    sp_ablate.add_argument("--epochs", type=int, default=12)
    sp_ablate.add_argument("--seed", type=int, default=0)

    # grad-check
    sp_grad = subparsers.add_parser("grad-check", help="Finite-difference gradient checks")
    sp_grad.add_argument("--config", choices=["tiny", "default"], default="tiny")
    sp_grad.add_argument("--seed", type=int, default=0)
    sp_grad.add_argument("--out", type=Path, default=Path("grad-check.jsonl"))

    # bench-fft
    sp_bench = subparsers.add_parser("bench-fft", help="Time and verify the FFT")
    sp_bench.add_argument("--sizes", type=_parse_sizes, default=[8, 16, 32, 64])
    sp_bench.add_argument("--out", type=Path, default=Path("bench-fft.jsonl"))

    return parser


def _run(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)

    if args.command is None:
        parser.print_help()
        return 1

    settings = get_settings()
    logging.basicConfig(
        level=settings.LOG_LEVEL.upper(),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    set_debug(settings.DEBUG)

    try:
        if args.command == "gen-data":
            print(_gen_data(args))
        elif args.command == "train":
            print(_train(args))
        elif args.command == "eval":
            print(_eval(args))
        elif args.command == "ablate":
            print(_ablate(args))
        elif args.command == "grad-check":
            config = ModelConfig.tiny() if args.config == "tiny" else ModelConfig()
            report = grad_check_suite(config, seed=args.seed)
            _write_jsonl(args.out, report.entries)
            print(_format_grad_check(report))
            if not report.passed:
                return 1
        elif args.command == "bench-fft":
            rows = bench_fft(args.sizes)
            _write_jsonl(args.out, rows)
            print(_format_bench(rows))
    except ValidationError as e:
        print(f"Error: invalid configuration: {e}", file=sys.stderr)
        return 1
    except FFPFError as e:
        print(f"Error: {e.message}", file=sys.stderr)
        return 1

    return 0


def main() -> None:
    raise SystemExit(_run())


if __name__ == "__main__":
    main()
