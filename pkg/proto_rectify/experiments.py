"""
Desk-scale ablation sweeps on synthetic data.

Each sweep is a list of named rows (dotted-key setting overrides). Every row is trained for each
seed and scored on the validation split; results are appended to `<out>/<sweep>/results.jsonl`.
"""

from pathlib import Path
from typing import Any, Sequence

import numpy as np
from pydantic import BaseModel

from .data.synthetic import dataset_from_config
from .errors import ConfigurationError
from .settings import ExperimentSettings
from .training import Trainer
from .util import append_jsonl, get_basic_logger

logger = get_basic_logger(__name__)

_NO_CRLN = {"rectify.enabled": False}
_NO_CPS = {"contrast.enabled": False}

SWEEPS: dict[str, dict[str, dict[str, Any]]] = {
    "components": {
        "baseline": {**_NO_CRLN, **_NO_CPS, "augment.use_strong": False},
        "baseline+strong-aug": {**_NO_CRLN, **_NO_CPS},
        "+crln+dim": {**_NO_CPS},
        "+cps": {},
    },
    "aggregation": {
        "sum": {"model.aggregation": {"spatial_awareness": False, "conv_integration": False, "cross_class": False}},
        "sa": {"model.aggregation": {"spatial_awareness": True, "conv_integration": False, "cross_class": False}},
        "sa+ci": {"model.aggregation": {"spatial_awareness": True, "conv_integration": True, "cross_class": False}},
        "sa+ci+cr": {},
    },
    "prototypes": {f"r={r}": {"model.num_prototypes": r} for r in (1, 2, 4, 8, 16)},
    "rectifier": {
        "v1": {"rectify.mode": "v1_fixed"},
        "v2": {"rectify.mode": "v2_learnable_concat"},
        "v3": {"rectify.mode": "v3_learnable_additive"},
    },
    "xi": {
        **{f"xi={xi}": {"contrast.xi": xi} for xi in (0.2, 0.4, 0.6, 0.8, 1.0)},
        "xi=random": {"contrast.xi_mode": "random"},
    },
    "start": {f"s={s}": {"rectify.start_iter": s} for s in (0, 200, 400, 800, 1600)},
    "centre": {
        "mean": {"contrast.centre": "mean"},
        "prototype": {"contrast.centre": "prototype"},
        "blend": {"contrast.centre": "blend"},
    },
}


class AblationRow(BaseModel):
    sweep: str
    row: str
    seeds: list[int]
    dice: list[float]
    mean_dice: float
    std_dice: float


def run_row(settings: ExperimentSettings, out_dir: Path, progress: bool = False) -> float:
    """Train one configuration from scratch and return its validation Dice."""
    split = dataset_from_config(settings.seed, settings.data)
    trainer = Trainer(settings, split, out_dir, progress=progress)
    trainer.fit()
    return trainer.evaluate()["dice"]


def run_ablation(
    name: str,
    seeds: Sequence[int],
    settings: ExperimentSettings,
    out_dir: str | Path,
    rows: Sequence[str] | None = None,
    progress: bool = False,
) -> list[AblationRow]:
    """
    Run a sweep over `seeds`.

    Raises:
        ConfigurationError: For an unknown sweep or row name.
    """
    if name not in SWEEPS:
        raise ConfigurationError(f"Unknown experiment '{name}'. Available: {sorted(SWEEPS)}")
    sweep = SWEEPS[name]
    selected = list(rows) if rows else list(sweep)
    unknown = [row for row in selected if row not in sweep]
    if unknown:
        raise ConfigurationError(f"Unknown rows for '{name}': {unknown}. Available: {list(sweep)}")

    out_dir = Path(out_dir) / name
    out_dir.mkdir(parents=True, exist_ok=True)
    results_path = out_dir / "results.jsonl"

    table = []
    for row in selected:
        scores = []
        for seed in seeds:
            row_settings = settings.with_overrides({**sweep[row], "seed": seed})
            score = run_row(row_settings, out_dir / row.replace("=", "-") / f"seed{seed}", progress)
            logger.info("%s / %s / seed %d: dice %.4f", name, row, seed, score)
            scores.append(score)
        result = AblationRow(
            sweep=name,
            row=row,
            seeds=list(seeds),
            dice=scores,
            mean_dice=float(np.nanmean(scores)),
            std_dice=float(np.nanstd(scores)),
        )
        append_jsonl(results_path, result.model_dump())
        table.append(result)
    return table
