# Copyright 2024 The tsnet Authors
#
# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at
#
#      http://www.apache.org/licenses/LICENSE-2.0
#
# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.

"""Ablation grids: stream fusion points and loss counts, and the model comparison.

Each cell of a grid is a set of config overrides. Every cell is trained `runs` times with
seeds `seed, seed + 1, ...` and summarized by the mean ± std of the best validation
95% error rate.
"""

import dataclasses
import logging
import os
from typing import Any, Callable, Dict, List, Mapping, Optional, Tuple

import pandas as pd

from tsnet import config, datasets, models, training, util

ONE_ENTROPY = "1 Entropy loss"
THREE_ENTROPY = "3 Entropy losses"
ERR_COLUMN = "95%ErrRate"
# The fusion grid trains on cross-entropy terms alone.
ENTROPY_ONLY = {"loss.lambda": 0.0, "loss.beta": 0.0}


@dataclasses.dataclass(frozen=True)
class Cell:
    row: str
    column: str
    overrides: Mapping[str, Any]


def fusion_cells() -> List[Cell]:
    """Fusion point × loss count for TS-Net, plus the parameter-matched Siamese S*."""
    cells = []
    for point in models.FusionPoint:
        row = "Feature tower" if point == models.FusionPoint.FEATURE_TOWER else point.value
        modes = [(models.LossMode.ONE_ENTROPY, ONE_ENTROPY)]
        if point != models.FusionPoint.FEATURE_TOWER:
            modes.append((models.LossMode.THREE_ENTROPY, THREE_ENTROPY))
        for mode, column in modes:
            overrides = {
                "model.kind": models.ModelKind.TSNET.value,
                "model.fusion_point": point.value,
                "model.loss_mode": mode.value,
                **ENTROPY_ONLY,
            }
            cells.append(Cell(row, column, overrides))
    sstar = {
        "model.kind": models.ModelKind.SSTAR.value,
        "model.fusion_point": models.FusionPoint.FC3.value,
        "model.loss_mode": models.LossMode.ONE_ENTROPY.value,
        **ENTROPY_ONLY,
    }
    cells.append(Cell("S*", ONE_ENTROPY, sstar))
    return cells


def models_cells() -> List[Cell]:
    """S, PS and TS-Net, each without and with the contrastive terms."""
    names = {
        models.ModelKind.S: "S",
        models.ModelKind.PS: "PS",
        models.ModelKind.TSNET: "TS-Net",
    }
    cells = []
    for kind, name in names.items():
        for weight, suffix in ((0.0, ""), (1e-2, "+C")):
            overrides = {
                "model.kind": kind.value,
                "model.fusion_point": models.FusionPoint.FC3.value,
                "model.loss_mode": models.LossMode.THREE_ENTROPY.value,
                "loss.lambda": weight,
                "loss.beta": weight,
            }
            cells.append(Cell(name + suffix, ERR_COLUMN, overrides))
    return cells


TABLES: Dict[str, Callable[[], List[Cell]]] = {"fusion": fusion_cells, "models": models_cells}


def cell_config(base: config.ExperimentConfig, cell: Cell, run: int) -> config.ExperimentConfig:
    return base.replace(**cell.overrides, **{"train.seed": base.train.seed + run})


def run_cell(
    cfg: config.ExperimentConfig,
    splits: Mapping[str, datasets.PatchDataset],
    stats: datasets.ModalityStats,
    epochs: int,
    out_dir: Optional[str] = None,
) -> Dict[str, Any]:
    """Trains one configuration and reports its best validation error rate."""
    init_rng, _ = training.make_rngs(cfg.train.seed)
    model = models.build_model(cfg.model, init_rng)
    result = training.train(
        model,
        splits,
        cfg.loss,
        cfg.train,
        epochs=epochs,
        stats=stats,
        config=cfg.as_strings(),
        out_dir=out_dir,
    )
    return {
        "seed": cfg.train.seed,
        "config_hash": cfg.hash(),
        "n_params": model.num_parameters(),
        "best_epoch": result.best.best_epoch,
        "val_err95": result.best.best_val_err,
    }


def run_ablation(
    table: str,
    base: config.ExperimentConfig,
    splits: Mapping[str, datasets.PatchDataset],
    stats: datasets.ModalityStats,
    epochs: int,
    parallelism: Optional[int] = 1,
    out_dir: Optional[str] = None,
) -> pd.DataFrame:
    """Trains every cell of `table` `base.runs` times.

    Args:
        table: `fusion` or `models`.
        base: Configuration shared by every cell.
        splits: Normalized `train` and `val` splits.
        stats: Normalization statistics of the training split.
        epochs: Training epochs per run.
        parallelism: Runs trained concurrently in threads; None for one per CPU.
        out_dir: If set, each run writes checkpoints under `<out_dir>/<hash>/run<i>`.

    Returns:
        One row per run, with its cell, seed, config hash and validation error rate.
    """
    if table not in TABLES:
        raise ValueError(f"unknown ablation table '{table}', expected one of {sorted(TABLES)}")
    tasks: List[Tuple[Cell, int]] = [
        (cell, run) for cell in TABLES[table]() for run in range(base.runs)
    ]

    def run_task(task: Tuple[Cell, int]) -> Dict[str, Any]:
        cell, run = task
        cfg = cell_config(base, cell, run)
        run_dir = None
        if out_dir is not None:
            run_dir = os.path.join(out_dir, cfg.hash(), f"run{run}")
        logging.info(f"Training {cell.row} / {cell.column}, run {run} ({cfg.hash()})")
        stats_row = run_cell(cfg, splits, stats, epochs, run_dir)
        return {"row": cell.row, "column": cell.column, "run": run, **stats_row}

    return pd.DataFrame(util.parallel_map(run_task, tasks, parallelism=parallelism))


def summarize(runs: pd.DataFrame) -> pd.DataFrame:
    """Mean and population std of the validation error rate per cell, in grid order."""
    order = list(dict.fromkeys(zip(runs["row"], runs["column"])))
    rows = []
    for row, column in order:
        group = runs[(runs["row"] == row) & (runs["column"] == column)]
        mean, std = util.mean_std(group["val_err95"].astype(float))
        rows.append(
            {
                "row": row,
                "column": column,
                "mean": mean,
                "std": std,
                "runs": len(group),
                "config_hash": group["config_hash"].iloc[0],
            }
        )
    return pd.DataFrame(rows)


def format_table(summary: pd.DataFrame) -> pd.DataFrame:
    """Lays out a summary as the grid: rows × loss columns of `mean ± std [hash]`."""
    cells = summary.assign(
        text=[
            f"{mean:.2f} ± {std:.2f} [{digest}]"
            for mean, std, digest in zip(summary["mean"], summary["std"], summary["config_hash"])
        ]
    )
    grid = cells.pivot(index="row", columns="column", values="text")
    grid = grid.reindex(index=list(dict.fromkeys(summary["row"])))
    grid = grid.reindex(columns=list(dict.fromkeys(summary["column"])))
    grid.index.name = None
    grid.columns.name = None
    return grid.fillna("n/a")
