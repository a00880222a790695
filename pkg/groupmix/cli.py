"""
GroupMix command-line interface.

Reports go to stdout as CSV or key=value lines; log records go to stderr.

Exit codes: 0 success, 1 gradient check failed, 2 configuration or usage
error, 3 I/O or archive error, 4 numeric divergence.
"""
import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Tuple

from pydantic import ValidationError

from .analysis.ablation import ablation_grid, make_ablation_variant
from .analysis.bench import DEFAULT_TOKENS, bench_attention, bench_to_csv, fit_loglog_slope
from .analysis.cost import count_params, estimate_flops
from .analysis.gradients import SCALES, run_gradcheck
from .config import Settings, configure_logging
from .core.errors import ConfigurationError, ContractError, DimensionError, DivergenceError, FormatError
from .models.backbone import check_resolution
from .models.configs import ModelConfig
from .models.presets import get_preset, list_presets
from .schemas.config_file import ConfigFile, config_json_schema, load_config_file
from .training.data import SyntheticTask
from .training.loop import TrainOptions, train_toy

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_DIVERGED = 4


class UsageError(Exception):
    """Raised by the argument parser instead of exiting."""


class GmxArgumentParser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def emit(line: str = ""):
    print(line, file=sys.stdout)


def resolve_config(args, settings: Settings, default_preset: Optional[str] = None) -> Tuple[ModelConfig, int]:
    """
    Model configuration and seed from ``--preset`` / ``--config``.

    Seed precedence: ``--seed``, then ``GMX_SEED``, then the file's seed.
    """
    file_seed = 0
    if getattr(args, "config", None):
        config_file = load_config_file(args.config)
        config = config_file.to_model_config()
        file_seed = config_file.seed
    else:
        config = get_preset(args.preset or default_preset or "T").validate()
    seed = file_seed
    if settings.SEED is not None:
        seed = settings.SEED
    if getattr(args, "seed", None) is not None:
        seed = args.seed
    return config, seed


def cmd_describe(args, settings: Settings):
    """Print per-stage D/R/L/heads, output sizes and branch plan."""
    config, seed = resolve_config(args, settings)
    height = args.res
    check_resolution(height, height)
    emit(f"model={config.name} classes={config.num_classes} drop_path_rate={config.drop_path_rate} "
         f"attention={config.attention.value} patch_embed={config.patch_embed.value} "
         f"softmax_on_context={str(config.softmax_on_context).lower()} "
         f"conv_before_attention={str(config.conv_before_attention).lower()} seed={seed}")
    side = height // 4
    for index, stage in enumerate(config.stages):
        if index:
            side //= 2
        pre = ",".join(spec.label() for spec in stage.pre_attention)
        emit(f"stage={index + 1} dim={stage.dim} ratio={stage.ffn_ratio:g} depth={stage.depth} "
             f"heads={stage.heads} out={side}x{side} pre_attention={pre} "
             f"non_attention={stage.non_attention.label()}")
    emit(f"params={count_params(config).params}")


def cmd_cost(args, settings: Settings):
    """Params and FLOPs breakdown as CSV."""
    config, _ = resolve_config(args, settings)
    report = estimate_flops(config, args.res, args.batch)
    emit(report.to_csv().rstrip("\n"))
    logger.info(f"{config.name} @ {args.res}: {report.mparams:.2f}M params, {report.gflops:.2f} GFLOPs ({report.convention})")


def cmd_gradcheck(args, settings: Settings):
    """Run the finite-difference suites; fails when any check does."""
    seed = args.seed if args.seed is not None else (settings.SEED or 0)
    result = run_gradcheck(args.scale, seed, h=settings.GRADCHECK_STEP, rtol=settings.GRADCHECK_RTOL,
                           fault=args.inject_fault)
    for line in result.to_lines():
        emit(line)
    if not result.passed:
        worst = result.worst()
        logger.warning(
            f"gradient check failed: {worst.name} tensor={worst.worst_tensor} "
            f"index={worst.worst_index} rel_err={worst.max_rel_err:.3e}"
        )
        return False


def cmd_train(args, settings: Settings):
    """Train on the synthetic task, writing metrics.csv and final.gmxw."""
    config, seed = resolve_config(args, settings, default_preset="toy")
    out_dir = Path(args.out_dir or settings.OUTPUT_DIR)
    out_dir.mkdir(parents=True, exist_ok=True)
    task = SyntheticTask(height=args.image_size, width=args.image_size, patch_size=args.patch_size,
                         num_classes=config.num_classes)
    options = TrainOptions(
        steps=args.steps,
        batch_size=args.batch_size,
        train_size=args.train_size,
        base_lr=args.lr,
        warmup=args.warmup,
        log_every=args.log_every,
        stop_after=args.stop_after,
    )
    metrics_path = out_dir / "metrics.csv"
    weights_path = out_dir / "final.gmxw"
    result = train_toy(config, task, seed=seed, options=options, metrics_path=metrics_path,
                       checkpoint_path=weights_path, checkpoint_dtype=args.checkpoint_dtype,
                       resume=args.resume)
    emit(f"steps={result.state.step} final_accuracy={result.final_accuracy:.6f} "
         f"metrics={metrics_path} weights={weights_path}")


def cmd_bench(args, settings: Settings):
    """Attention wall time and MACs versus N as CSV."""
    reps = args.reps or settings.BENCH_REPS
    rows = bench_attention(args.tokens, d=args.dim, heads=args.heads, reps=reps,
                           seed=args.seed if args.seed is not None else (settings.SEED or 0))
    emit(bench_to_csv(rows).rstrip("\n"))
    for kernel in sorted({row.kernel for row in rows}):
        subset = [row for row in rows if row.kernel == kernel]
        if len(subset) >= 2:
            slope = fit_loglog_slope([r.tokens for r in subset], [r.wall_time for r in subset])
            logger.info(f"{kernel}: wall-time log-log slope {slope:.2f}")


def cmd_ablate(args, settings: Settings):
    """Write one JSON config per ablation variant and list them as CSV."""
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    seed = settings.SEED or 0
    emit("name,file,params,flops")
    for variant in ablation_grid(args.base):
        config = make_ablation_variant(variant)
        path = out_dir / f"{variant.label()}.json"
        path.write_text(ConfigFile.from_model_config(config, seed).to_json() + "\n", encoding="utf-8")
        report = estimate_flops(config, args.res)
        emit(f"{variant.label()},{path},{report.params},{report.flops}")


def cmd_schema(args, settings: Settings):
    """Print the JSON schema of configuration files."""
    emit(json.dumps(config_json_schema(), indent=2))


def _add_model_args(parser, preset_default: Optional[str] = None):
    group = parser.add_mutually_exclusive_group()
    group.add_argument("--preset", default=preset_default,
                       help=f"Named configuration ({', '.join(list_presets())})")
    group.add_argument("--config", help="JSON configuration file")


def build_parser() -> argparse.ArgumentParser:
    parser = GmxArgumentParser(
        prog="gmx",
        description="GroupMix - GroupMix attention and GroupMixFormer toolkit",
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("--log-level", help="Log level (default: GMX_LOG_LEVEL or INFO)")

    subparsers = parser.add_subparsers(dest="command", help="Available commands", parser_class=GmxArgumentParser)

    describe_parser = subparsers.add_parser("describe", help="Describe a model configuration")
    _add_model_args(describe_parser)
    describe_parser.add_argument("--res", type=int, default=224, help="Input resolution for output sizes")
    describe_parser.add_argument("--seed", type=int)

    cost_parser = subparsers.add_parser("cost", help="Parameter and FLOP breakdown (CSV)")
    _add_model_args(cost_parser)
    cost_parser.add_argument("--res", type=int, default=224, help="Input resolution, multiple of 32")
    cost_parser.add_argument("--batch", type=int, default=1, help="Batch size")

    check_parser = subparsers.add_parser("gradcheck", help="Finite-difference gradient suites")
    check_parser.add_argument("--scale", choices=SCALES, default="tiny")
    check_parser.add_argument("--seed", type=int)
    check_parser.add_argument("--inject-fault", metavar="OP", help="Negate the backward of a registered op")

    train_parser = subparsers.add_parser("train", help="Train on the synthetic group-pattern task")
    _add_model_args(train_parser)
    train_parser.add_argument("--steps", type=int, default=2000)
    train_parser.add_argument("--seed", type=int)
    train_parser.add_argument("--batch-size", type=int, default=32)
    train_parser.add_argument("--train-size", type=int, default=4096)
    train_parser.add_argument("--lr", type=float, default=1e-3)
    train_parser.add_argument("--warmup", type=int, default=100)
    train_parser.add_argument("--log-every", type=int, default=10)
    train_parser.add_argument("--image-size", type=int, default=32)
    train_parser.add_argument("--patch-size", type=int, default=3)
    train_parser.add_argument("--out-dir", help="Output directory (default: GMX_OUTPUT_DIR)")
    train_parser.add_argument(
        "--resume",
        help="Checkpoint to continue from; the resumed run matches an uninterrupted one bit for bit "
             "only if the checkpoint was written with --checkpoint-dtype f64 (f32 rounds weights and moments)",
    )
    train_parser.add_argument("--stop-after", type=int, help="Stop (and checkpoint) after this step")
    train_parser.add_argument("--checkpoint-dtype", choices=("f32", "f64"), default="f32",
                              help="Archive precision (default: f32, lossy; f64 for exact resume)")

    bench_parser = subparsers.add_parser("bench", help="Attention scaling benchmark (CSV)")
    bench_parser.add_argument("--tokens", type=int, nargs="+", default=list(DEFAULT_TOKENS))
    bench_parser.add_argument("--dim", type=int, default=64)
    bench_parser.add_argument("--heads", type=int, default=1)
    bench_parser.add_argument("--reps", type=int)
    bench_parser.add_argument("--seed", type=int)

    ablate_parser = subparsers.add_parser("ablate", help="Write the ablation config grid")
    ablate_parser.add_argument("--base", default="T", help="Preset the variants derive from")
    ablate_parser.add_argument("--res", type=int, default=224)
    ablate_parser.add_argument("--out-dir", required=True)

    subparsers.add_parser("schema", help="Print the configuration JSON schema")
    return parser


commands = {
    "describe": cmd_describe,
    "cost": cmd_cost,
    "gradcheck": cmd_gradcheck,
    "train": cmd_train,
    "bench": cmd_bench,
    "ablate": cmd_ablate,
    "schema": cmd_schema,
}


def run(argv=None) -> int:
    """Parse ``argv``, dispatch, and map errors onto exit codes."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE

    try:
        settings = Settings()
    except ValidationError as exc:
        print(f"invalid GMX_ environment settings: {exc}", file=sys.stderr)
        return EXIT_USAGE
    configure_logging(args.log_level or ("DEBUG" if settings.DEBUG else settings.LOG_LEVEL), settings.LOG_FILE)
    if not args.command:
        parser.print_help(sys.stderr)
        return EXIT_USAGE

    try:
        result = commands[args.command](args, settings)
    except DivergenceError as exc:
        logger.error(f"training diverged at step {exc.step}: {exc}")
        return EXIT_DIVERGED
    except (ConfigurationError, ContractError, DimensionError, ValidationError, json.JSONDecodeError) as exc:
        logger.error(f"{args.command}: {exc}")
        return EXIT_USAGE
    except (FormatError, OSError) as exc:
        logger.error(f"{args.command}: {exc}")
        return EXIT_IO
    return EXIT_CHECK_FAILED if result is False else EXIT_OK


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
