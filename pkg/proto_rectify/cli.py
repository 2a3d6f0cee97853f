"""
Command-line entry points.

Usage:
    proto-rectify train --config run.json --out runs/a [--seed N] [--ablate NAME ...] [--r N] [--xi X]
    proto-rectify eval --checkpoint runs/a/checkpoint [--data-dir DIR] [--strides 8 8 8]
    proto-rectify rectify-report --checkpoint runs/a [--plot curves.png]
    proto-rectify generate --out data/synthetic [--seed N]
    proto-rectify experiment components --seed 0 --seed 1 --seed 2 --out experiments/

Exit codes: 0 success, 2 configuration error, 3 data error, 4 non-finite loss, 1 anything else.
"""

import json
import os
from contextlib import contextmanager
from pathlib import Path
from typing import Any, Iterator

import typer
from pydantic import BaseModel

from .data.storage import load_split, save_split
from .data.synthetic import dataset_from_config
from .data.volume import DatasetSplit
from .errors import ConfigurationError, ContractViolation, DataError, NumericalError, ShapeMismatchError, exit_code_for
from .settings import ExperimentSettings, apply_ablations, load_settings
from .util import append_jsonl, get_basic_logger, package_source_hash, remove_file_logging, setup_file_logging

logger = get_basic_logger(__name__)

app = typer.Typer(help="Prototype-rectified semi-supervised 3D segmentation.", no_args_is_help=True)

LOCK_NAME = "run.lock"
_HANDLED = (ConfigurationError, DataError, NumericalError, ContractViolation, ShapeMismatchError)


class RunManifest(BaseModel):
    seed: int
    config_hash: str
    code_hash: str
    config: dict[str, Any]
    layout: dict[str, str]


@contextmanager
def handle_errors() -> Iterator[None]:
    """Turn package errors into a one-line diagnosis and the matching exit code."""
    try:
        yield
    except _HANDLED as e:
        typer.echo(f"Error: {type(e).__name__}: {e}".splitlines()[0], err=True)
        raise typer.Exit(exit_code_for(e))


@contextmanager
def run_lock(directory: Path) -> Iterator[Path]:
    """
    Hold `run.lock` in `directory` for the duration of the block.

    Raises:
        ConfigurationError: If another process holds the lock.
    """
    directory.mkdir(parents=True, exist_ok=True)
    lock_path = directory / LOCK_NAME
    try:
        descriptor = os.open(lock_path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError as e:
        raise ConfigurationError(f"Run directory {directory} is in use (remove {lock_path} if stale)") from e
    try:
        os.write(descriptor, str(os.getpid()).encode())
        os.close(descriptor)
        yield lock_path
    finally:
        lock_path.unlink(missing_ok=True)


def parse_assignments(assignments: list[str] | None) -> dict[str, Any]:
    """`key.sub=value` pairs; values are parsed as JSON where possible."""
    overrides: dict[str, Any] = {}
    for assignment in assignments or []:
        key, sep, raw = assignment.partition("=")
        if not sep or not key:
            raise ConfigurationError(f"Expected KEY=VALUE, got '{assignment}'")
        try:
            overrides[key.strip()] = json.loads(raw)
        except json.JSONDecodeError:
            overrides[key.strip()] = raw
    return overrides


def resolve_settings(
    config: Path | None,
    seed: int | None = None,
    ablate: list[str] | None = None,
    prototypes: int | None = None,
    xi: float | None = None,
    start_iter: int | None = None,
    tau: float | None = None,
    tau_w: float | None = None,
    max_iters: int | None = None,
    assignments: list[str] | None = None,
) -> ExperimentSettings:
    flags = {
        "seed": seed,
        "model.num_prototypes": prototypes,
        "contrast.xi": xi,
        "rectify.start_iter": start_iter,
        "train.tau": tau,
        "contrast.tau_w": tau_w,
        "train.max_iters": max_iters,
    }
    overrides = {key: value for key, value in flags.items() if value is not None}
    overrides.update(parse_assignments(assignments))
    settings = load_settings(config, overrides)
    return apply_ablations(settings, ablate or [])


def resolve_split(data_dir: Path | None, settings: ExperimentSettings) -> DatasetSplit:
    if data_dir is not None:
        return load_split(data_dir)
    return dataset_from_config(settings.seed, settings.data)


def write_run_manifest(out: Path, settings: ExperimentSettings) -> RunManifest:
    """Write `config.json` and `run.json` describing the settings a run trains under."""
    manifest = RunManifest(
        seed=settings.seed,
        config_hash=settings.config_hash(),
        code_hash=package_source_hash(),
        config=settings.model_dump(mode="json"),
        layout={
            "config": "config.json",
            "metrics": "metrics.jsonl",
            "log": "train.log",
            "checkpoints": "checkpoints/iter_NNNNNN",
            "final": "checkpoint",
        },
    )
    (out / "config.json").write_text(json.dumps(manifest.config, indent=2), encoding="utf-8")
    (out / "run.json").write_text(manifest.model_dump_json(indent=2), encoding="utf-8")
    return manifest


@app.command()
def train(
    config: Path = typer.Option(..., "--config", help="JSON config file mirroring the settings tree"),
    out: Path = typer.Option(Path("runs/train"), "--out", help="Run directory"),
    seed: int | None = typer.Option(None, "--seed", help="Seed for data, initialisation and sampling"),
    ablate: list[str] | None = typer.Option(None, "--ablate", help="Ablation switch (repeatable)"),
    prototypes: int | None = typer.Option(None, "--r", help="Prototype sets per class"),
    xi: float | None = typer.Option(None, "--xi", help="Positive-centre blend coefficient"),
    start_iter: int | None = typer.Option(None, "--s-iters", help="Iteration after which pseudo-labels are rectified"),
    tau: float | None = typer.Option(None, "--tau", help="Pseudo-label confidence threshold"),
    tau_w: float | None = typer.Option(None, "--tau-w", help="Contrastive set-membership threshold"),
    max_iters: int | None = typer.Option(None, "--max-iters", help="Number of training iterations"),
    assignments: list[str] | None = typer.Option(None, "--set", help="Extra override KEY=VALUE (repeatable)"),
    data_dir: Path | None = typer.Option(None, "--data-dir", help="Split written by `generate` (default: synthesise)"),
    resume: Path | None = typer.Option(
        None, "--resume", help="Checkpoint directory to continue from, under its own saved settings"
    ),
    progress: bool = typer.Option(True, "--progress/--no-progress", help="Show a progress bar"),
) -> None:
    """Train a student/teacher pair and write checkpoints plus a metrics log."""
    from .training import Trainer, load_checkpoint

    with handle_errors():
        settings = resolve_settings(
            config, seed, ablate, prototypes, xi, start_iter, tau, tau_w, max_iters, assignments
        )
        with run_lock(out):
            handler = setup_file_logging(out / "train.log")
            try:
                if resume is not None:
                    # a resumed run continues under the checkpoint's settings, not the command line's
                    checkpoint = load_checkpoint(resume)
                    split = resolve_split(data_dir, checkpoint.settings())
                    trainer = Trainer.from_checkpoint(checkpoint, split, out, progress=progress)
                else:
                    split = resolve_split(data_dir, settings)
                    trainer = Trainer(settings, split, out, progress=progress)
                write_run_manifest(out, trainer.settings)
                results = trainer.fit()
            finally:
                remove_file_logging(handler)
    if results:
        last = results[-1]
        typer.echo(f"Finished iteration {last.iteration + 1}: loss {last.loss_total:.4f}, mu {last.mu:.4f}")
    typer.echo(f"Run directory: {out}")


@app.command("eval")
def evaluate(
    checkpoint: Path = typer.Option(..., "--checkpoint", help="Checkpoint directory"),
    data_dir: Path | None = typer.Option(None, "--data-dir", help="Split written by `generate` (default: synthesise)"),
    strides: tuple[int, int, int] | None = typer.Option(None, "--strides", help="Sliding-window strides"),
    out: Path | None = typer.Option(None, "--out", help="Scores file (default: <checkpoint>/scores.jsonl)"),
    use_spacing: bool = typer.Option(False, "--spacing", help="Report distances in mm instead of voxels"),
    teacher: bool = typer.Option(False, "--teacher", help="Score the teacher instead of the student"),
) -> None:
    """Sliding-window inference and Dice/Jaccard/ASD/95HD on the validation split."""
    from .evaluation import network_predictor, score_cases, summarize
    from .training import load_checkpoint, restore_pair

    with handle_errors():
        pair = restore_pair(load_checkpoint(checkpoint))
        settings = pair.settings
        split = resolve_split(data_dir, settings)
        if not split.val:
            raise DataError("The split has no validation cases")
        network = pair.teacher if teacher else pair.student
        scores = score_cases(
            network_predictor(network),
            split.val,
            window=settings.augment.crop_size,
            strides=strides or settings.train.eval_strides,
            use_spacing=use_spacing,
        )
        out = out or checkpoint / "scores.jsonl"
        out.write_text("", encoding="utf-8")
        typer.echo(f"{'id':<12}{'dice':>10}{'jaccard':>10}{'asd':>10}{'hd95':>10}")
        for score in scores:
            append_jsonl(out, score.model_dump())
            typer.echo(f"{score.id:<12}{score.dice:>10.4f}{score.jaccard:>10.4f}{score.asd:>10.4f}{score.hd95:>10.4f}")
        summary = summarize(scores)
        typer.echo(
            f"{'mean':<12}" + "".join(f"{summary[name].mean:>10.4f}" for name in ("dice", "jaccard", "asd", "hd95"))
        )


@app.command("rectify-report")
def rectify_report(
    checkpoint: Path = typer.Option(..., "--checkpoint", help="Checkpoint or run directory (all checkpoints below)"),
    data_dir: Path | None = typer.Option(None, "--data-dir", help="Split with unlabelled ground truth"),
    out: Path | None = typer.Option(None, "--out", help="Records file (default: <checkpoint>/rectification.jsonl)"),
    plot: Path | None = typer.Option(None, "--plot", help="Also write the curves to this image file"),
    max_cases: int = typer.Option(8, "--max-cases", help="Unlabelled cases scored per checkpoint"),
) -> None:
    """Reliable-voxel fraction and pseudo-label Dice before and after rectification, per checkpoint."""
    from .evaluation import plot_rectification_report, rectification_report
    from .training import list_checkpoints, load_checkpoint

    with handle_errors():
        directories = list_checkpoints(checkpoint)
        if not directories:
            raise DataError(f"No checkpoints found under {checkpoint}")
        settings = load_checkpoint(directories[0]).settings()
        split = resolve_split(data_dir, settings)
        records = rectification_report(directories, split, max_cases=max_cases)
        out = out or checkpoint / "rectification.jsonl"
        out.write_text("", encoding="utf-8")
        for record in records:
            append_jsonl(out, record.model_dump())
            typer.echo(
                f"iter {record.iteration:>6}  mu {record.mu:.4f}  reliable {record.reliable_before:.4f} -> "
                f"{record.reliable_after:.4f}  dice {record.dice_before:.4f} -> {record.dice_after:.4f}"
            )
        if plot is not None:
            typer.echo(f"Plot written to {plot_rectification_report(records, plot)}")


@app.command()
def generate(
    out: Path = typer.Option(..., "--out", help="Output directory"),
    config: Path | None = typer.Option(None, "--config", help="JSON config file (data section is used)"),
    seed: int | None = typer.Option(None, "--seed", help="Generator seed"),
    assignments: list[str] | None = typer.Option(None, "--set", help="Override KEY=VALUE, e.g. data.n_val=4"),
) -> None:
    """Write a synthetic split in the raw + manifest volume format."""
    with handle_errors():
        settings = resolve_settings(config, seed=seed, assignments=assignments)
        split = dataset_from_config(settings.seed, settings.data)
        index = save_split(split, out)
    typer.echo(f"Wrote {len(split.ids())} cases, index {index}")


@app.command()
def experiment(
    name: str = typer.Argument(..., help="Sweep: components, aggregation, prototypes, rectifier, xi, start, centre"),
    seeds: list[int] = typer.Option([0, 1, 2], "--seed", help="Seeds to average over (repeatable)"),
    out: Path = typer.Option(Path("experiments"), "--out", help="Output directory"),
    config: Path | None = typer.Option(None, "--config", help="Base JSON config"),
    rows: list[str] | None = typer.Option(None, "--row", help="Restrict to these rows (repeatable)"),
    assignments: list[str] | None = typer.Option(None, "--set", help="Override KEY=VALUE (repeatable)"),
) -> None:
    """Run a desk-scale ablation sweep and print mean validation Dice per row."""
    from .experiments import run_ablation

    with handle_errors():
        settings = resolve_settings(config, assignments=assignments)
        with run_lock(out):
            table = run_ablation(name, seeds, settings, out, rows=rows)
    for row in table:
        typer.echo(f"{row.row:<24}{row.mean_dice:>10.4f} ± {row.std_dice:.4f}")


if __name__ == "__main__":
    app()
