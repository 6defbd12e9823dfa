#!/usr/bin/env python3
"""
npr command-line tool: train, evaluate, fine-tune, render heatmaps and
print parameter counts.

Exit codes: 0 success, 2 configuration error, 3 numeric divergence,
4 I/O or checkpoint format error.
"""

import logging
from contextlib import contextmanager
from enum import Enum
from pathlib import Path
from typing import Iterator, List, NamedTuple, Optional, Tuple

import typer
from pydantic import ValidationError
from rich.console import Console
from rich.logging import RichHandler
from rich.table import Table

from artifacts import FieldCsvError, ProgressCsv, read_field_csv, write_field_csv, write_metrics_csv, write_pgm
from checkpoint import CheckpointFormatError, ModelKind, load_checkpoint, save_checkpoint
from deeponet import DeepONetSpec, deeponet_param_counts
from eval_finetune import MetricsReport, evaluate_fields, finetune as finetune_dense, unfold
from nets import ABLATION_TARGETS, HypernetSpec, dense_param_count, lowrank_param_count
from problems import ICExpressionError, evaluation_ics, resolve_ic
from reference import ICFamilyError, ShockRegionError
from settings import ConfigError, NprSettings, RunConfig, format_validation_error, load_config
from training import ProgressRecord, train as train_model

logger = logging.getLogger(__name__)

app = typer.Typer(add_completion=False, help="Neural parameter regression for 1-D IBVPs.")
console = Console()

EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_IO = 4


class ModelChoice(str, Enum):
    NPR = "npr"
    DEEPONET = "deeponet"


def setup_logging(level: str) -> None:
    logging.basicConfig(
        level=level.upper(),
        format="%(message)s",
        datefmt="[%X]",
        handlers=[RichHandler(console=Console(stderr=True), show_path=False)],
        force=True,
    )


@app.callback()
def main(verbose: bool = typer.Option(False, "--verbose", "-v", help="Debug logging")) -> None:
    settings = NprSettings()
    setup_logging("DEBUG" if verbose else settings.log_level)


@contextmanager
def exit_codes() -> Iterator[None]:
    """Map library exceptions onto the documented exit codes."""
    try:
        yield
    except ValidationError as e:
        console.print(f"[red]Invalid configuration:[/red]\n{format_validation_error(e)}")
        raise typer.Exit(EXIT_CONFIG)
    except (ConfigError, ICExpressionError) as e:
        console.print(f"[red]Configuration error:[/red] {e}")
        raise typer.Exit(EXIT_CONFIG)
    except (ICFamilyError, ShockRegionError) as e:
        console.print(f"[red]Unsupported initial condition:[/red] {e}")
        raise typer.Exit(EXIT_CONFIG)
    except CheckpointFormatError as e:
        console.print(f"[red]Checkpoint error:[/red] {e}")
        raise typer.Exit(EXIT_IO)
    except FieldCsvError as e:
        console.print(f"[red]Malformed field file:[/red] {e}")
        raise typer.Exit(EXIT_IO)
    except (FloatingPointError, ArithmeticError) as e:
        console.print(f"[red]Numeric failure:[/red] {e}")
        raise typer.Exit(EXIT_NUMERIC)
    except OSError as e:
        console.print(f"[red]I/O error:[/red] {e}")
        raise typer.Exit(EXIT_IO)


def parse_grid(text: Optional[str]) -> Optional[Tuple[int, int]]:
    """``"500x500"`` -> (500, 500)"""
    if text is None:
        return None
    try:
        nt, nx = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise ConfigError(f"Grid must look like <nt>x<nx>, got {text!r}") from None
    if nt < 2 or nx < 2:
        raise ConfigError(f"Grid needs at least 2x2 points, got {text!r}")
    return nt, nx


def metrics_table(report: MetricsReport, title: str) -> Table:
    table = Table(title=title)
    for column in ("initial condition", "L1", "L2", "Linf", "RMS"):
        table.add_column(column, justify="left" if column == "initial condition" else "right")
    for row in report.per_ic:
        table.add_row(row.label, f"{row.l1:.3e}", f"{row.l2:.3e}", f"{row.linf:.3e}", f"{row.rms:.3e}")
    table.add_row("[bold]mean[/bold]", f"{report.l1:.3e}", f"{report.l2:.3e}",
                  f"{report.linf:.3e}", f"{report.rms:.3e}")
    return table


class TrainOutputs(NamedTuple):
    checkpoint: Path
    progress: Path
    final: Optional[ProgressRecord]


def run_train(config: RunConfig, out: Path) -> TrainOutputs:
    """Train per ``config``; writes ``checkpoint.npr`` and ``progress.csv`` into ``out``."""
    model = config.build_model()
    checkpoint_path, progress_path = out / "checkpoint.npr", out / "progress.csv"
    with ProgressCsv(progress_path) as sink:
        checkpoint = train_model(config.problem, model, config.train_config(), config.sampler, sink=sink)
    save_checkpoint(checkpoint, checkpoint_path)
    return TrainOutputs(checkpoint_path, progress_path, sink.last)


def final_losses_table(record: ProgressRecord) -> Table:
    table = Table(title=f"Final losses (step {record.step})")
    for column in ("component", "weight", "loss"):
        table.add_column(column, justify="left" if column == "component" else "right")
    for component in ("pde", "ic", "bc"):
        table.add_row(component, f"{getattr(record, f'lambda_{component}'):.4g}",
                      f"{getattr(record, f'loss_{component}'):.4e}")
    table.add_row("[bold]total[/bold]", "", f"{record.loss_total:.4e}")
    return table


def export_fields(evaluation, out: Path) -> None:
    for i, comparison in enumerate(evaluation.fields):
        stem = f"ic{i:02d}"
        write_field_csv(comparison.model, out / f"{stem}_model.csv")
        write_field_csv(comparison.reference, out / f"{stem}_reference.csv")
        write_field_csv(comparison.difference, out / f"{stem}_abs_diff.csv")


@app.command("train")
def train_cmd(
    config: Optional[Path] = typer.Option(None, "--config", help="TOML run config"),
    seed: Optional[int] = typer.Option(None, "--seed"),
    steps: Optional[int] = typer.Option(None, "--steps", help="Override training.n_steps"),
    model: Optional[ModelChoice] = typer.Option(None, "--model"),
    no_hardcode_baseline: bool = typer.Option(False, "--no-hardcode-baseline",
                                              help="Train the DeepONet baseline with soft IC/BC losses"),
    deterministic: bool = typer.Option(
        False, "--deterministic",
        help="Training is always single-threaded and seeded; accepted so every command takes the flag"),
    out: Optional[Path] = typer.Option(None, "--out", help="Output directory"),
) -> None:
    """Train a hypernetwork (or the DeepONet baseline).

    Training runs on one thread in a fixed order, so the same config and
    seed always give a byte-identical checkpoint.
    """
    with exit_codes():
        run_config = load_config(config).with_overrides(**{
            "seed": seed,
            "training.n_steps": steps,
            "model.kind": model.value if model else None,
            "constraints.hardcode_baseline": False if no_hardcode_baseline else None,
        })
        if deterministic:
            logger.info("Deterministic run: seed %d", run_config.seed)
        out_dir = out or run_config.output_dir
        outputs = run_train(run_config, out_dir)
        if outputs.final is not None:
            console.print(final_losses_table(outputs.final))
        else:
            console.print("No optimization steps were run")
        console.print(f"Checkpoint: {outputs.checkpoint}\nProgress:   {outputs.progress}")


@app.command("eval")
def eval_cmd(
    checkpoint: Path = typer.Option(..., "--checkpoint"),
    config: Optional[Path] = typer.Option(None, "--config", help="Evaluation settings"),
    grid: Optional[str] = typer.Option(None, "--grid", help="<nt>x<nx>, default 500x500"),
    seed: Optional[int] = typer.Option(None, "--seed", help="Seed of the evaluation conditions"),
    ic: Optional[str] = typer.Option(None, "--ic", help="Evaluate a single expression or named condition"),
    deterministic: bool = typer.Option(False, "--deterministic"),
    out: Optional[Path] = typer.Option(None, "--out"),
) -> None:
    """Evaluate a checkpoint against reference solutions."""
    with exit_codes():
        run_config = load_config(config).with_overrides(**{"evaluation.seed": seed})
        ckpt = load_checkpoint(checkpoint)
        section = run_config.evaluation
        nt, nx = parse_grid(grid) or (section.nt, section.nx)
        if ic is not None:
            ics = [resolve_ic(ic)]
        elif ckpt.kind == ModelKind.DENSE_PINN:
            ics = [ckpt.ic]
        else:
            ics = evaluation_ics(ckpt.problem, run_config.sampler, section.n_ics, section.seed)
        workers = 1 if deterministic else NprSettings().threads
        evaluation = evaluate_fields(ckpt, ics, nt, nx, workers=workers, substeps=section.substeps)

        out_dir = out or run_config.output_dir / "eval"
        write_metrics_csv(evaluation.report, out_dir / "metrics.csv")
        export_fields(evaluation, out_dir)
        console.print(metrics_table(evaluation.report, f"{ckpt.kind.value} on {nt}x{nx}"))


@app.command("finetune")
def finetune_cmd(
    checkpoint: Path = typer.Option(..., "--checkpoint"),
    ic: str = typer.Option(..., "--ic", help='Expression such as "5*x + 3*sin(4*pi*x)" or a named condition'),
    steps: Optional[int] = typer.Option(None, "--steps", help="Fine-tuning steps, default 200"),
    config: Optional[Path] = typer.Option(None, "--config"),
    grid: Optional[str] = typer.Option(None, "--grid"),
    seed: Optional[int] = typer.Option(None, "--seed"),
    deterministic: bool = typer.Option(False, "--deterministic"),
    out: Optional[Path] = typer.Option(None, "--out"),
) -> None:
    """Unfold a checkpoint for one initial condition and fine-tune it as a PINN."""
    with exit_codes():
        run_config = load_config(config).with_overrides(**{"finetune.steps": steps, "finetune.seed": seed})
        condition = resolve_ic(ic)
        ckpt = load_checkpoint(checkpoint)
        if ckpt.kind != ModelKind.NPR:
            raise ConfigError(f"Only npr checkpoints can be fine-tuned, got {ckpt.kind.value}")
        nt, nx = parse_grid(grid) or (run_config.evaluation.nt, run_config.evaluation.nx)
        substeps = run_config.evaluation.substeps

        dense = unfold(ckpt, condition)
        before = evaluate_fields(dense, [condition], nt, nx, substeps=substeps)
        tuned = finetune_dense(dense, run_config.finetune)
        after = evaluate_fields(tuned, [condition], nt, nx, substeps=substeps)

        out_dir = out or run_config.output_dir / "finetune"
        save_checkpoint(tuned, out_dir / "finetuned.npr")
        write_metrics_csv(before.report, out_dir / "metrics_before.csv")
        write_metrics_csv(after.report, out_dir / "metrics_after.csv")
        write_field_csv(before.fields[0].reference, out_dir / "reference.csv")
        write_field_csv(before.fields[0].model, out_dir / "before.csv")
        write_field_csv(after.fields[0].model, out_dir / "after.csv")
        console.print(metrics_table(before.report, "before fine-tuning"))
        console.print(metrics_table(after.report, "after fine-tuning"))


@app.command("render")
def render_cmd(
    field: Path = typer.Argument(..., help="Field CSV"),
    out: Optional[Path] = typer.Option(None, "--out", help="PGM path, default next to the CSV"),
) -> None:
    """Render a field CSV as an 8-bit grayscale PGM heatmap."""
    with exit_codes():
        grid = read_field_csv(field)
        image, sidecar = write_pgm(grid, out or field.with_suffix(".pgm"))
        console.print(f"Heatmap: {image} ({grid.nx}x{grid.nt}), range in {sidecar}")


class CountRow(NamedTuple):
    model: str
    hidden: str
    rank: str
    first: int
    second: int


def count_rows(d_enc: int = 32) -> List[CountRow]:
    """NPR rows are (target, hyper) counts; DeepONet rows are (trunk, branch)."""
    rows = []
    for hidden, rank in ABLATION_TARGETS:
        spec = HypernetSpec.build(d_enc=d_enc, target_hidden=hidden, rank=rank)
        rows.append(CountRow("npr", str(hidden), str(rank), lowrank_param_count(spec.target),
                             dense_param_count(spec.hyper)))
    for equation, branch_hidden, trunk_hidden in (("heat", 64, 32), ("burgers", 128, 64)):
        spec = DeepONetSpec.build(d_enc=d_enc, branch_hidden=branch_hidden, trunk_hidden=trunk_hidden)
        rows.append(CountRow(f"deeponet-{equation}", f"{branch_hidden}/{trunk_hidden}", "-",
                             *deeponet_param_counts(spec)))
    return rows


@app.command("counts")
def counts_cmd(d_enc: int = typer.Option(32, "--d-enc")) -> None:
    """Print target/hypernetwork parameter counts of the ablation configs and the baselines."""
    table = Table(title="Parameter counts")
    for column in ("model", "hidden", "rank", "# target / trunk", "# hyper / branch"):
        table.add_column(column, justify="right")
    for row in count_rows(d_enc):
        table.add_row(row.model, row.hidden, row.rank, str(row.first), str(row.second))
    console.print(table)


if __name__ == "__main__":
    app()
