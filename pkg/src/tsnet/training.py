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

"""SGD with momentum and the mini-batch training loop with validation-based selection."""

import dataclasses
import logging
import os
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from tsnet import datasets, evaluation, losses, models, serialize, tensor
from tsnet.tensor import Tensor

SYNTH_EPOCHS = 40
DATASET_EPOCHS = 150

METRIC_COLUMNS = ("epoch", "total") + losses.LossBreakdown.COMPONENTS + ("val_err95",)


class TrainingDivergedError(RuntimeError):
    """The loss became NaN or infinite."""

    def __init__(self, message: str, lr: float, epoch: int, batch: int):
        super().__init__(f"{message} (lr={lr}, epoch={epoch}, batch={batch})")
        self.lr = lr
        self.epoch = epoch
        self.batch = batch


@dataclasses.dataclass(frozen=True)
class TrainConfig:
    """Optimizer and schedule hyperparameters.

    Attributes:
        lr: Learning rate.
        momentum: Momentum coefficient, in [0, 1).
        l2: L2 regularization strength, added to the gradient as `l2·w`.
        batch_size: Pairs per mini-batch.
        epochs: Passes over the training split. None selects 40 for synthetic data and
            150 for a dataset directory.
        seed: Seeds parameter initialization and batch shuffling.
        log_interval: Batches between DEBUG progress lines.
    """

    lr: float = 1e-3
    momentum: float = 0.95
    l2: float = 1e-3
    batch_size: int = 32
    epochs: Optional[int] = None
    seed: int = 0
    log_interval: int = 10

    def __post_init__(self):
        if self.lr < 0 or self.l2 < 0:
            raise ValueError(f"lr and l2 must be non-negative, got {self.lr} and {self.l2}")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.batch_size < 1 or (self.epochs is not None and self.epochs < 1):
            raise ValueError("batch_size and epochs must be positive")

    def resolve_epochs(self, synthetic: bool) -> int:
        if self.epochs is not None:
            return self.epochs
        return SYNTH_EPOCHS if synthetic else DATASET_EPOCHS


def make_rngs(seed: int) -> Tuple[np.random.Generator, np.random.Generator]:
    """Independent generators for parameter initialization and batch shuffling."""
    init_seq, shuffle_seq = np.random.SeedSequence(seed).spawn(2)
    return np.random.default_rng(init_seq), np.random.default_rng(shuffle_seq)


def sgd_momentum_step(
    params: Sequence[Tensor],
    grads: Sequence[Optional[np.ndarray]],
    velocities: Sequence[np.ndarray],
    cfg: TrainConfig,
) -> None:
    """In place: g' = g + l2·w; v ← momentum·v + g'; w ← w − lr·v.

    A missing gradient counts as zero.

    Raises:
        ContractError: if the sequences differ in length or an array differs in shape.
    """
    if not len(params) == len(grads) == len(velocities):
        raise tensor.ContractError(
            f"{len(params)} params, {len(grads)} grads and {len(velocities)} velocities"
        )
    for param, grad, velocity in zip(params, grads, velocities):
        if velocity.shape != param.shape or (grad is not None and grad.shape != param.shape):
            raise tensor.ContractError(
                f"parameter {param.shape}, gradient {None if grad is None else grad.shape}, "
                f"velocity {velocity.shape}"
            )
        update = cfg.l2 * param.data
        if grad is not None:
            update = grad + update
        velocity *= cfg.momentum
        velocity += update
        param.data -= cfg.lr * velocity


class SGDMomentum:
    """Momentum SGD over named parameters, keeping one velocity buffer per parameter."""

    def __init__(self, params: Mapping[str, Tensor], cfg: TrainConfig):
        self.params = dict(params)
        self.cfg = cfg
        self.velocities = {name: np.zeros_like(p.data) for name, p in self.params.items()}

    def step(self) -> None:
        names = list(self.params)
        sgd_momentum_step(
            [self.params[name] for name in names],
            [self.params[name].grad for name in names],
            [self.velocities[name] for name in names],
            self.cfg,
        )

    def zero_grad(self) -> None:
        for param in self.params.values():
            param.zero_grad()


@dataclasses.dataclass
class TrainResult:
    """Best-on-validation and final checkpoints and the per-epoch metrics log."""

    best: serialize.Checkpoint
    last: serialize.Checkpoint
    metrics: pd.DataFrame


class Trainer:
    """Trains a model on a normalized training split, validating after every epoch.

    Args:
        model: The variant to train; its parameters are updated in place.
        weights: Loss weights.
        cfg: Optimizer and schedule.
        train_data: Normalized training pairs.
        val_data: Normalized validation pairs; without it no model selection happens and the
            last epoch is also the best.
        stats: Normalization statistics, stored in checkpoints.
        config: Flat experiment configuration, stored in checkpoints.
        shuffle_rng: Generator of the batch order. Defaults to the one `make_rngs` derives
            from `cfg.seed`.
    """

    def __init__(
        self,
        model: models.PatchMatcher,
        weights: losses.LossWeights,
        cfg: TrainConfig,
        train_data: datasets.PatchDataset,
        val_data: Optional[datasets.PatchDataset] = None,
        *,
        stats: Optional[datasets.ModalityStats] = None,
        config: Optional[Dict[str, Any]] = None,
        shuffle_rng: Optional[np.random.Generator] = None,
    ):
        if len(train_data) == 0:
            raise ValueError("training split is empty")
        self.model = model
        self.weights = weights
        self.cfg = cfg
        self.train_data = train_data
        self.val_data = val_data
        self.stats = stats
        self.config = dict(config or {})
        self.rng = shuffle_rng if shuffle_rng is not None else make_rngs(cfg.seed)[1]
        self.optimizer = SGDMomentum(model.named_parameters(), cfg)
        self.epoch = 0
        self.best_val_err: Optional[float] = None
        self.best_epoch: Optional[int] = None
        self.history: List[Dict[str, Any]] = []
        self._best: Optional[serialize.Checkpoint] = None

    def train_step(self, index: np.ndarray, batch: int) -> losses.LossBreakdown:
        """One forward/backward/update on the pairs at `index`."""
        x1, x2 = self.train_data.inputs(index)
        labels = self.train_data.labels[index]
        self.optimizer.zero_grad()
        try:
            out = self.model(Tensor(x1), Tensor(x2))
            breakdown = losses.combined_loss(out, labels, self.weights, self.model.spec)
        except tensor.NonFiniteError as e:
            raise TrainingDivergedError(str(e), self.cfg.lr, self.epoch + 1, batch) from e
        if not np.isfinite(breakdown.total.item()):
            raise TrainingDivergedError("non-finite loss", self.cfg.lr, self.epoch + 1, batch)
        breakdown.total.backward()
        self.optimizer.step()
        return breakdown

    def run_epoch(self) -> Dict[str, Any]:
        """Trains on every pair once in a shuffled order and returns the epoch's metrics row."""
        n = len(self.train_data)
        order = self.rng.permutation(n)
        sums: Dict[str, float] = {}
        for batch, start in enumerate(range(0, n, self.cfg.batch_size)):
            index = order[start : start + self.cfg.batch_size]
            values = self.train_step(index, batch).to_floats()
            for name, value in values.items():
                if value is not None:
                    sums[name] = sums.get(name, 0.0) + value * len(index)
            if batch % self.cfg.log_interval == 0:
                logging.debug(f"epoch {self.epoch + 1} batch {batch}: loss {values['total']:.5f}")
        self.epoch += 1

        row: Dict[str, Any] = {"epoch": self.epoch}
        for name in METRIC_COLUMNS[1:-1]:
            row[name] = sums[name] / n if name in sums else None
        row["val_err95"] = None
        if self.val_data is not None:
            row["val_err95"] = evaluation.evaluate(self.model, self.val_data).err_rate_95
        self.history.append(row)

        described = ", ".join(
            f"{name}={value:.5f}"
            for name, value in row.items()
            if name != "epoch" and value is not None
        )
        logging.info(f"epoch {self.epoch}: {described}")
        return row

    def checkpoint(self) -> serialize.Checkpoint:
        return serialize.Checkpoint(
            spec=self.model.spec.to_dict(),
            config=self.config,
            params={name: p.data.copy() for name, p in self.model.named_parameters().items()},
            velocities={name: v.copy() for name, v in self.optimizer.velocities.items()},
            rng_state=self.rng.bit_generator.state,
            epoch=self.epoch,
            stats=self.stats.to_dict() if self.stats is not None else {},
            best_val_err=self.best_val_err,
            best_epoch=self.best_epoch,
            history=[dict(row) for row in self.history],
        )

    def restore(
        self, ckpt: serialize.Checkpoint, best: Optional[serialize.Checkpoint] = None
    ) -> None:
        """Continues from `ckpt`: parameters, velocities, shuffle state and history.

        `best` is the best-on-validation checkpoint of the interrupted run, if kept.
        """
        params = self.model.named_parameters()
        if set(params) != set(ckpt.params):
            raise serialize.IntegrityError("checkpoint parameters do not match the model")
        for name, param in params.items():
            param.data = np.array(ckpt.params[name], dtype=param.dtype)
            self.optimizer.velocities[name] = np.array(ckpt.velocities[name], dtype=param.dtype)
        self.rng.bit_generator.state = ckpt.rng_state
        self.epoch = ckpt.epoch
        self.best_val_err = ckpt.best_val_err
        self.best_epoch = ckpt.best_epoch
        self.history = [dict(row) for row in ckpt.history]
        self._best = best

    def _update_best(self, row: Mapping[str, Any]) -> bool:
        err = row["val_err95"]
        if err is None:
            improved = True
        else:
            improved = self.best_val_err is None or err < self.best_val_err
        if improved:
            self.best_val_err = err
            self.best_epoch = self.epoch
            self._best = self.checkpoint()
        return improved

    def fit(self, epochs: int, out_dir: Optional[str] = None) -> TrainResult:
        """Trains until `epochs` epochs are complete in total, counting restored ones.

        With `out_dir`, writes `best.tsck` whenever validation improves and `last.tsck`
        plus `metrics.csv` after every epoch.
        """
        if out_dir is not None:
            os.makedirs(out_dir, exist_ok=True)
        while self.epoch < epochs:
            row = self.run_epoch()
            improved = self._update_best(row)
            if out_dir is not None:
                if improved:
                    serialize.save_checkpoint(os.path.join(out_dir, "best.tsck"), self._best)
                serialize.save_checkpoint(os.path.join(out_dir, "last.tsck"), self.checkpoint())
                self.metrics().to_csv(os.path.join(out_dir, "metrics.csv"), index=False)
        last = self.checkpoint()
        return TrainResult(best=self._best or last, last=last, metrics=self.metrics())

    def metrics(self) -> pd.DataFrame:
        return pd.DataFrame(self.history, columns=list(METRIC_COLUMNS))


def prepare_splits(
    raw: Mapping[str, datasets.PatchDataset],
) -> Tuple[Dict[str, datasets.PatchDataset], datasets.ModalityStats]:
    """Normalizes every split with statistics of the training split."""
    stats = datasets.compute_stats(raw["train"])
    return {split: datasets.normalize(data, stats) for split, data in raw.items()}, stats


def train(
    model: models.PatchMatcher,
    splits: Mapping[str, datasets.PatchDataset],
    weights: losses.LossWeights,
    cfg: TrainConfig,
    *,
    epochs: int,
    stats: Optional[datasets.ModalityStats] = None,
    config: Optional[Dict[str, Any]] = None,
    out_dir: Optional[str] = None,
    resume_from: Optional[serialize.Checkpoint] = None,
    resume_best: Optional[serialize.Checkpoint] = None,
) -> TrainResult:
    """Trains `model` on normalized `splits["train"]`, selecting on `splits["val"]`."""
    trainer = Trainer(
        model,
        weights,
        cfg,
        splits["train"],
        splits.get("val"),
        stats=stats,
        config=config,
    )
    if resume_from is not None:
        trainer.restore(resume_from, resume_best)
        logging.info(f"Resumed from epoch {trainer.epoch}")
    return trainer.fit(epochs, out_dir=out_dir)
