"""Command-line entry point.

Subcommands: generate-data, train, evaluate, inspect-prototype, gradcheck,
ablate. Exit codes are 0 on success, 1 on runtime failure and 2 on usage
errors (unknown flags, missing input files).
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

from .checkpoint import build_model, load_checkpoint
from .evaluation import compare_runs, evaluate_split, read_report, write_report
from .exceptions import ProtoMTLError
from .experiments import DEFAULT_DIMS, inspect_prototype, run_ablation
from .gradcheck import DEFAULT_TOLERANCE, run_gradient_suite
from .logging import setup_logger
from .models import GenConfig, LabelProtocol
from .synthdata import assign_labels, generate_dataset, load_manifest, load_split, save_manifest
from .training import load_config, train
from .utils import configure_threads, write_csv

logger = logging.getLogger("protomtl.cli")

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2


def _int_list(text: str) -> List[int]:
    try:
        return [int(part) for part in text.split(",") if part.strip()]
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got '{text}'") from e


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="protomtl",
        description="Prototype-based knowledge retrieval for partially labeled "
        "multi-task dense prediction.",
    )
    parser.add_argument("--log-file", help="Also write log messages to this file")
    parser.add_argument(
        "-v", "--verbose", action="store_true", help="Log at DEBUG level"
    )
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    gen = sub.add_parser("generate-data", help="Render a synthetic dataset")
    gen.add_argument("--out", required=True, type=Path, help="Dataset directory")
    gen.add_argument("--n", type=int, default=600, help="Training samples")
    gen.add_argument("--n-test", type=int, default=200, help="Test samples")
    gen.add_argument("--hw", type=int, default=32, help="Image height and width")
    gen.add_argument("--tasks", type=int, default=3, choices=(3, 5))
    gen.add_argument("--shapes", type=int, default=3, help="Max primitives per scene")
    gen.add_argument("--classes", type=int, default=4, help="Segmentation classes")
    gen.add_argument(
        "--protocol", default="one-label", choices=("one-label", "random-label", "full")
    )
    gen.add_argument("--max-labels", type=int, help="Label cap for random-label")
    gen.add_argument("--seed", type=int, default=0)

    tr = sub.add_parser("train", help="Train a model")
    tr.add_argument("--config", type=Path, help="key = value config file")
    tr.add_argument("--preset", help="desk or paper-scale")
    tr.add_argument("--data", required=True, type=Path, help="Dataset directory")
    tr.add_argument("--out", required=True, type=Path, help="Run directory")
    tr.add_argument("--resume", type=Path, help="Checkpoint to continue from")
    tr.add_argument("--epochs", type=int, help="Override the configured epochs")
    tr.add_argument("--seed", type=int, help="Override the configured seed")

    ev = sub.add_parser("evaluate", help="Evaluate a checkpoint")
    ev.add_argument("--checkpoint", required=True, type=Path)
    ev.add_argument("--data", required=True, type=Path)
    ev.add_argument("--out", required=True, type=Path, help="Report CSV")
    ev.add_argument("--split", default="test", choices=("train", "test"))
    ev.add_argument("--baseline", type=Path, help="Report CSV to compare against")

    ins = sub.add_parser("inspect-prototype", help="Dump prototype and affinity data")
    ins.add_argument("--checkpoint", required=True, type=Path)
    ins.add_argument("--data", required=True, type=Path)
    ins.add_argument("--out", required=True, type=Path, help="Output directory")
    ins.add_argument(
        "--attention", action="store_true", help="Also dump cross-attention weights"
    )

    gc = sub.add_parser("gradcheck", help="Run the finite-difference gradient suite")
    gc.add_argument("--seed", type=int, default=0)
    gc.add_argument("--tolerance", type=float, default=DEFAULT_TOLERANCE)

    ab = sub.add_parser("ablate", help="Run an ablation study")
    ab.add_argument("--config", type=Path)
    ab.add_argument("--preset")
    ab.add_argument("--data", required=True, type=Path)
    ab.add_argument("--out", required=True, type=Path)
    ab.add_argument("--seeds", type=_int_list, default=[0, 1, 2])
    ab.add_argument("--study", default="losses", choices=("losses", "dimension"))
    ab.add_argument("--dims", type=_int_list, default=list(DEFAULT_DIMS))
    ab.add_argument("--epochs", type=int, help="Override the configured epochs")
    return parser


def _input_paths(args: argparse.Namespace) -> List[Path]:
    paths = []
    for name in ("config", "checkpoint", "resume", "baseline"):
        value = getattr(args, name, None)
        if value is not None:
            paths.append(value)
    if getattr(args, "data", None) is not None:
        paths.append(args.data / "manifest.txt")
    return paths


def _usage_problem(args: argparse.Namespace) -> Optional[str]:
    if args.command != "generate-data":
        return None
    if args.protocol == "random-label":
        if args.max_labels is None:
            return "--protocol random-label requires --max-labels"
        if not 1 <= args.max_labels <= args.tasks:
            return f"--max-labels must be in 1..{args.tasks}, got {args.max_labels}"
    elif args.max_labels is not None:
        return f"--max-labels only applies to random-label, not {args.protocol}"
    return None


def _overrides(args: argparse.Namespace, protocol: str) -> Dict[str, object]:
    values: Dict[str, object] = {"protocol": protocol}
    for name in ("epochs", "seed"):
        if getattr(args, name, None) is not None:
            values[name] = getattr(args, name)
    return values


def cmd_generate_data(args: argparse.Namespace) -> int:
    config = GenConfig(
        n_samples=args.n,
        n_test=args.n_test,
        height=args.hw,
        width=args.hw,
        n_shapes=args.shapes,
        n_tasks=args.tasks,
        seg_classes=args.classes,
        seed=args.seed,
    )
    protocol = LabelProtocol(name=args.protocol, max_labels=args.max_labels)
    manifest = generate_dataset(config, args.out)
    if protocol.name != "full":
        manifest = assign_labels(manifest, protocol, args.seed)
        save_manifest(manifest)
    logger.info(f"Dataset with protocol {protocol} written to {args.out}")
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    manifest = load_manifest(args.data)
    config = load_config(args.config, args.preset, _overrides(args, str(manifest.protocol)))
    resume = load_checkpoint(args.resume) if args.resume is not None else None
    result = train(config, manifest, out_dir=args.out, resume=resume)
    if result.history:
        logger.info(f"Final training loss {result.history[-1]['total']:.6f}")
    return EXIT_OK


def cmd_evaluate(args: argparse.Namespace) -> int:
    checkpoint = load_checkpoint(args.checkpoint)
    model = build_model(checkpoint)
    manifest = load_manifest(args.data)
    report = evaluate_split(model, manifest, args.split, checkpoint.config.protocol)
    write_report(report, args.out)
    if report.notes:
        logger.info(report.notes)
    if args.baseline is not None:
        comparison = compare_runs(read_report(args.baseline), report)
        rows = [(task, delta) for task, delta in comparison.deltas.items()]
        rows += [("mean_rank_baseline", comparison.mean_rank_a)]
        rows += [("mean_rank_this", comparison.mean_rank_b)]
        path = args.out.with_name(args.out.stem + "_comparison.csv")
        write_csv(path, ["task", "delta"], rows)
        logger.info(
            f"Mean rank {comparison.mean_rank_b:.2f} vs baseline "
            f"{comparison.mean_rank_a:.2f}; deltas written to {path}"
        )
    return EXIT_OK


def cmd_inspect_prototype(args: argparse.Namespace) -> int:
    model = build_model(load_checkpoint(args.checkpoint))
    manifest = load_manifest(args.data)
    split = "test" if manifest.test_count else "train"
    inspect_prototype(model, load_split(manifest, split), args.out, args.attention)
    return EXIT_OK


def cmd_gradcheck(args: argparse.Namespace) -> int:
    results = run_gradient_suite(args.seed, args.tolerance)
    for result in results:
        status = "ok" if result.passed else "FAIL"
        print(f"{result.name:<32} {result.rel_error:.3e}  {status}")
    return EXIT_OK if all(r.passed for r in results) else EXIT_FAILURE


def cmd_ablate(args: argparse.Namespace) -> int:
    manifest = load_manifest(args.data)
    config = load_config(args.config, args.preset, _overrides(args, str(manifest.protocol)))
    result = run_ablation(config, manifest, args.seeds, args.study, args.out, args.dims)
    for name, rank in result.mean_ranks.items():
        print(f"{name:<16} mean rank {rank:.2f}")
    return EXIT_OK


COMMANDS: Dict[str, Callable[[argparse.Namespace], int]] = {
    "generate-data": cmd_generate_data,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "inspect-prototype": cmd_inspect_prototype,
    "gradcheck": cmd_gradcheck,
    "ablate": cmd_ablate,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Run the command line and return its exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code in (0, None) else EXIT_USAGE
    if args.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE

    missing = [str(p) for p in _input_paths(args) if not p.exists()]
    if missing:
        parser.print_usage(sys.stderr)
        print(f"protomtl: error: no such file: {', '.join(missing)}", file=sys.stderr)
        return EXIT_USAGE
    problem = _usage_problem(args)
    if problem is not None:
        parser.print_usage(sys.stderr)
        print(f"protomtl: error: {problem}", file=sys.stderr)
        return EXIT_USAGE

    setup_logger(level=logging.DEBUG if args.verbose else None, log_file=args.log_file)
    configure_threads()
    try:
        return COMMANDS[args.command](args)
    except ProtoMTLError as e:
        logger.error(f"{args.command} failed: {e}")
        print(f"protomtl: error: {e}", file=sys.stderr)
        return EXIT_FAILURE
