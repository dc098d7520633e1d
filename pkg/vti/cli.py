"""
VTI Command Line
Subcommands: synth | train | generate | evaluate

Exit codes: 0 success, 1 usage/contract/parse/training errors, 2 I/O errors.
"""

import argparse
import sys
from pathlib import Path
from typing import Callable

from rich.console import Console
from rich.table import Table

from vti import __version__
from vti.core.config import Settings, load_settings
from vti.core.errors import ContractViolation, DatasetIOError, VtiError
from vti.core.logger import log, log_error, setup_logging
from vti.schemas.records import SPLITS
from vti.services.checkpoint_service import load_checkpoint, model_from_checkpoint, save_checkpoint
from vti.services.dataset_service import (
    MANIFEST_NAME,
    VOCAB_NAME,
    Vocabulary,
    assign_splits,
    load_dataset,
    read_manifest,
    split_records,
    synth_generate,
    vocab_from_records,
    write_dataset,
    write_manifest,
)
from vti.services.generation_service import generate_for_records
from vti.services.metrics_service import evaluate_reports, write_eval_report
from vti.services.model_service import VtiModel
from vti.services.training_service import fit, write_history

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_IO = 2

console = Console()


class UsageError(VtiError):
    """Bad command line"""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="flat key=value configuration file")
    common.add_argument("--log-level", help="DEBUG, INFO, WARNING or ERROR")

    parser = _Parser(prog="vti", description="Variational topic inference report generator")
    parser.add_argument("--version", action="version", version=f"vti {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    synth = sub.add_parser("synth", parents=[common], help="write a synthetic dataset")
    synth.add_argument("--out", required=True, help="dataset directory")
    synth.add_argument("--n", type=int)
    synth.add_argument("--seed", type=int)
    synth.add_argument("--style-count", type=int, dest="style_count")
    synth.add_argument("--min-freq", type=int, dest="min_freq")

    train = sub.add_parser("train", parents=[common], help="fit a model")
    train.add_argument("--data", required=True, help="dataset directory")
    train.add_argument("--out", required=True, help="checkpoint path for the best model")
    train.add_argument("--resume", action="store_true", help="continue from <out>.last")
    train.add_argument("--seed", type=int)
    train.add_argument("--max-epochs", type=int, dest="max_epochs")

    generate = sub.add_parser("generate", parents=[common], help="generate reports")
    generate.add_argument("--ckpt", required=True)
    generate.add_argument("--data", required=True, help="dataset directory")
    generate.add_argument("--split", default="test", choices=SPLITS)
    generate.add_argument("--out", required=True, help="output directory")
    generate.add_argument("--variants", type=int)
    generate.add_argument("--temperature", type=float)
    generate.add_argument("--topk", type=int, dest="top_k")
    generate.add_argument("--seed", type=int)
    generate.add_argument("--best", action="store_true", help="combine variants by model-averaged rescoring")
    generate.add_argument("--limit", type=int, default=0, help="only the first N records of the split")
    generate.add_argument("--attention-records", type=int, default=8, dest="attention_records",
                          help="export attention maps for the first N records")

    evaluate = sub.add_parser("evaluate", parents=[common], help="score generated reports")
    evaluate.add_argument("--generated", required=True, help="generated manifest")
    evaluate.add_argument("--reference", required=True, help="reference manifest")
    evaluate.add_argument("--out", required=True, help="output directory")
    return parser


OVERRIDE_KEYS = {
    "synth": ("n", "seed", "style_count", "min_freq"),
    "train": ("seed", "max_epochs"),
    "generate": ("variants", "temperature", "top_k", "seed"),
    "evaluate": (),
}


def print_config(settings: Settings) -> None:
    table = Table(title="Resolved configuration", show_header=True, header_style="bold cyan")
    table.add_column("key")
    table.add_column("value", justify="right")
    for line in settings.to_flat_text().splitlines():
        key, value = line.split("=", 1)
        table.add_row(key, value)
    console.print(table)


def _print_rows(title: str, rows: list[tuple[str, object]]) -> None:
    table = Table(title=title, show_header=True, header_style="bold cyan")
    table.add_column("metric")
    table.add_column("value", justify="right")
    for name, value in rows:
        table.add_row(name, f"{value:.4f}" if isinstance(value, float) else str(value))
    console.print(table)


# ============================================================================
# Subcommands
# ============================================================================

def cmd_synth(args, settings: Settings) -> int:
    cfg = settings.synth_config
    records = synth_generate(cfg.n, cfg.seed, cfg.style_count, cfg.image_size)
    splits = assign_splits(len(records), cfg.seed)
    vocab = vocab_from_records((r for r, s in zip(records, splits) if s == "train"), cfg.min_freq)
    written = write_dataset(records, args.out, seed=cfg.seed, vocab=vocab)
    _print_rows("Synthetic dataset", [
        ("records", len(written)),
        *((f"{name} split", sum(r.split == name for r in written)) for name in SPLITS),
        ("vocabulary", len(vocab)),
    ])
    return EXIT_OK


def _load_vocab(data: Path, records, min_freq: int) -> Vocabulary:
    path = data / VOCAB_NAME
    if path.is_file():
        return Vocabulary.load(path)
    log.warning(f"{path} not found; building the vocabulary from the train split")
    return vocab_from_records(split_records(records, "train"), min_freq)


def cmd_train(args, settings: Settings) -> int:
    data = Path(args.data)
    records = load_dataset(data / MANIFEST_NAME, settings.image_size)
    vocab = _load_vocab(data, records, settings.min_freq)
    train = [vocab.encode_record(r, settings.max_positions) for r in split_records(records, "train")]
    val = [vocab.encode_record(r, settings.max_positions) for r in split_records(records, "val")]

    net = settings.network_config.model_copy(update={"vocab_size": len(vocab)})
    model = VtiModel(net, seed=settings.seed)
    out = Path(args.out)
    last_path = out.with_name(out.name + ".last")
    history_path = out.with_name(out.stem + ".history.csv")

    resume = resume_best = None
    if args.resume:
        resume = load_checkpoint(last_path)
        resume_best = load_checkpoint(out) if out.is_file() else None

    def on_epoch(stats, last):
        save_checkpoint(last, last_path)

    result = fit(model, train, val, settings.train_config, resume=resume, resume_best=resume_best,
                 config_snapshot={"settings": settings.model_dump(mode="json")}, on_epoch=on_epoch)
    save_checkpoint(result.best, out)
    save_checkpoint(result.last, last_path)
    write_history(result.history, history_path)
    best = result.history[result.best.best_epoch - 1] if result.best.best_epoch else result.history[-1]
    _print_rows("Training", [
        ("epochs", len(result.history)),
        ("best epoch", result.best.best_epoch),
        ("best val loss", result.best.best_val_loss),
        ("val KL per sentence", best.val_kl),
        ("val token accuracy", best.val_accuracy),
        ("stopped early", str(result.stopped_early)),
    ])
    return EXIT_OK


def cmd_generate(args, settings: Settings) -> int:
    model = model_from_checkpoint(load_checkpoint(args.ckpt))
    data = Path(args.data)
    records = load_dataset(data / MANIFEST_NAME, model.cfg.image_size)
    vocab = Vocabulary.load(data / VOCAB_NAME)
    if len(vocab) != model.vocab_size:
        raise ContractViolation(f"vocabulary has {len(vocab)} entries, checkpoint expects {model.vocab_size}")
    selected = split_records(records, args.split)
    if args.limit > 0:
        selected = selected[: args.limit]
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise DatasetIOError(f"cannot create output directory ({e.strerror})", out) from e
    entries = generate_for_records(
        model, selected, vocab, settings.generation_config, best=args.best,
        attention_dir=out / "attention", attention_records=args.attention_records,
    )
    write_manifest(entries, out / MANIFEST_NAME)
    _print_rows("Generation", [("images", len(selected)), ("reports", len(entries))])
    return EXIT_OK


def cmd_evaluate(args, settings: Settings) -> int:
    report = evaluate_reports(read_manifest(args.generated), read_manifest(args.reference))
    write_eval_report(report, args.out)
    _print_rows("Evaluation", report.metric_rows())
    return EXIT_OK


COMMANDS: dict[str, Callable[[argparse.Namespace, Settings], int]] = {
    "synth": cmd_synth,
    "train": cmd_train,
    "generate": cmd_generate,
    "evaluate": cmd_evaluate,
}


def run_cli(argv: list[str] | None = None) -> int:
    """Parse argv, run one subcommand and map failures to exit codes"""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        console.print(f"[red]{e}[/red]")
        return EXIT_ERROR
    except SystemExit as e:  # --help / --version
        return int(e.code or 0)

    try:
        overrides = {key: getattr(args, key) for key in OVERRIDE_KEYS[args.command]}
        overrides["log_level"] = args.log_level
        settings = load_settings(args.config, overrides)
        setup_logging(settings.log_level, settings.log_format, settings.log_file)
        print_config(settings)
        return COMMANDS[args.command](args, settings)
    except (DatasetIOError, OSError) as e:
        log_error(str(e))
        return EXIT_IO
    except (VtiError, ValueError) as e:
        log_error(str(e))
        return EXIT_ERROR


def main() -> None:
    sys.exit(run_cli())
