#!/usr/bin/env python3
"""
MCP server for neural parameter regression using FastMCP
Exposes training, evaluation, fine-tuning and rendering as tools
"""

import asyncio
import logging
from pathlib import Path
from typing import Any, Dict, List, Optional

from mcp.server.fastmcp import FastMCP

from artifacts import read_field_csv, write_field_csv, write_metrics_csv, write_pgm
from checkpoint import ModelKind, load_checkpoint, save_checkpoint
from cli import count_rows, parse_grid, run_train
from eval_finetune import MetricsReport, evaluate_fields, finetune, unfold
from problems import evaluation_ics, resolve_ic
from settings import NprSettings, load_config

logger = logging.getLogger(__name__)

# Create the MCP server instance
mcp = FastMCP("npr")

# Global base directory (current working directory); all tool paths resolve inside it
BASE_DIR = Path.cwd()


def is_safe_path(path: Path) -> bool:
    """Check if a path is safe to access (no directory traversal)"""
    try:
        resolved = path.resolve()
        return resolved.is_relative_to(BASE_DIR.resolve())
    except (ValueError, RuntimeError):
        return False


def resolve_path(path: str) -> Path:
    """
    Resolve a path relative to BASE_DIR and reject anything outside it.

    Args:
        path: Input path (can be relative or absolute)

    Returns:
        Resolved Path object
    """
    path_obj = Path(path)
    if not path_obj.is_absolute():
        path_obj = BASE_DIR / path_obj
    if not is_safe_path(path_obj):
        raise ValueError("Invalid path: directory traversal detected")
    return path_obj


def _optional_path(path: Optional[str]) -> Optional[Path]:
    return None if path is None else resolve_path(path)


def _report_dict(report: MetricsReport) -> Dict[str, Any]:
    return report.model_dump(mode="json")


@mcp.tool()
async def train_operator(
    config: Optional[str] = None,
    out_dir: str = "runs",
    seed: Optional[int] = None,
    steps: Optional[int] = None,
    model: Optional[str] = None,
) -> Dict[str, Any]:
    """
    Train a hypernetwork (or DeepONet baseline) on a TOML run config.

    Args:
        config: Config file path (default: built-in defaults)
        out_dir: Directory for checkpoint.npr and progress.csv
        seed: Override the run seed
        steps: Override the number of optimization steps
        model: "npr" or "deeponet"

    Returns:
        Dictionary with checkpoint and progress paths and the losses of the last step
    """
    run_config = load_config(_optional_path(config)).with_overrides(**{
        "seed": seed, "training.n_steps": steps, "model.kind": model,
    })
    out = resolve_path(out_dir)
    outputs = await asyncio.to_thread(run_train, run_config, out)
    return {
        "checkpoint": str(outputs.checkpoint.relative_to(BASE_DIR)),
        "progress": str(outputs.progress.relative_to(BASE_DIR)),
        "steps": run_config.training.n_steps,
        "seed": run_config.seed,
        "final_losses": outputs.final._asdict() if outputs.final is not None else None,
    }


@mcp.tool()
async def evaluate_checkpoint(
    checkpoint: str,
    config: Optional[str] = None,
    grid: Optional[str] = None,
    ic: Optional[str] = None,
    out_dir: Optional[str] = None,
) -> Dict[str, Any]:
    """
    Evaluate a checkpoint against reference solutions.

    Args:
        checkpoint: Checkpoint file path
        config: Config file with evaluation settings
        grid: Grid size as "<nt>x<nx>" (default: 500x500)
        ic: Single expression or named initial condition instead of the seeded set
        out_dir: Write metrics.csv and field CSVs here when given

    Returns:
        Dictionary with the mean metrics and one row per initial condition
    """
    run_config = load_config(_optional_path(config))
    ckpt = await asyncio.to_thread(load_checkpoint, resolve_path(checkpoint))
    section = run_config.evaluation
    nt, nx = parse_grid(grid) or (section.nt, section.nx)
    if ic is not None:
        ics = [resolve_ic(ic)]
    elif ckpt.kind == ModelKind.DENSE_PINN:
        ics = [ckpt.ic]
    else:
        ics = evaluation_ics(ckpt.problem, run_config.sampler, section.n_ics, section.seed)

    evaluation = await asyncio.to_thread(
        evaluate_fields, ckpt, ics, nt, nx, NprSettings().threads, section.substeps)
    if out_dir is not None:
        out = resolve_path(out_dir)
        write_metrics_csv(evaluation.report, out / "metrics.csv")
        for i, comparison in enumerate(evaluation.fields):
            write_field_csv(comparison.model, out / f"ic{i:02d}_model.csv")
            write_field_csv(comparison.reference, out / f"ic{i:02d}_reference.csv")
    return _report_dict(evaluation.report)


@mcp.tool()
async def finetune_checkpoint(
    checkpoint: str,
    ic: str,
    steps: Optional[int] = None,
    grid: Optional[str] = None,
    out_dir: str = "runs/finetune",
) -> Dict[str, Any]:
    """
    Unfold a checkpoint for one initial condition and fine-tune it.

    Args:
        checkpoint: npr checkpoint file path
        ic: Expression such as "5*x + 3*sin(4*pi*x)" or a named condition
        steps: Fine-tuning steps (default: 200)
        grid: Grid size as "<nt>x<nx>" for the before/after metrics
        out_dir: Directory for finetuned.npr

    Returns:
        Dictionary with metrics before and after fine-tuning
    """
    run_config = load_config(None).with_overrides(**{"finetune.steps": steps})
    condition = resolve_ic(ic)
    ckpt = await asyncio.to_thread(load_checkpoint, resolve_path(checkpoint))
    nt, nx = parse_grid(grid) or (run_config.evaluation.nt, run_config.evaluation.nx)
    out = resolve_path(out_dir)

    def work():
        dense = unfold(ckpt, condition)
        before = evaluate_fields(dense, [condition], nt, nx)
        tuned = finetune(dense, run_config.finetune)
        after = evaluate_fields(tuned, [condition], nt, nx)
        path = save_checkpoint(tuned, out / "finetuned.npr")
        return before.report, after.report, path

    before, after, path = await asyncio.to_thread(work)
    return {
        "checkpoint": str(path.relative_to(BASE_DIR)),
        "before": _report_dict(before),
        "after": _report_dict(after),
    }


@mcp.tool()
async def render_field(field_csv: str, out: Optional[str] = None) -> Dict[str, Any]:
    """
    Render a field CSV as a grayscale PGM heatmap.

    Args:
        field_csv: Field CSV path
        out: PGM path (default: next to the CSV)

    Returns:
        Dictionary with image and sidecar paths and the value range
    """
    source = resolve_path(field_csv)
    target = resolve_path(out) if out else source.with_suffix(".pgm")
    grid = await asyncio.to_thread(read_field_csv, source)
    image, sidecar = await asyncio.to_thread(write_pgm, grid, target)
    return {
        "image": str(image.relative_to(BASE_DIR)),
        "sidecar": str(sidecar.relative_to(BASE_DIR)),
        "min": float(grid.values.min()),
        "max": float(grid.values.max()),
        "shape": [grid.nt, grid.nx],
    }


@mcp.tool()
async def parameter_counts(d_enc: int = 32) -> List[Dict[str, Any]]:
    """
    Parameter counts of the ablation target networks and the DeepONet baselines.

    Args:
        d_enc: Number of sensors

    Returns:
        List of rows; npr rows carry (target, hyper) counts, deeponet rows (trunk, branch)
    """
    return [row._asdict() for row in count_rows(d_enc)]


# Run the server
if __name__ == "__main__":
    mcp.run()
