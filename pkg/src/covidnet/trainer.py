"""Mini-batch training with zero padding and best-hold-out-UAR checkpointing."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from . import tensor as tn
from .dsp import InputBundle
from .metrics import MetricBundle, metric_bundle, uar
from .model import Batch, CovidNet, ModelConfig, build_model, collate, forward, predict_batch
from .splits import FoldPlan

logger = logging.getLogger(__name__)

# padded raw frames allowed in one forward pass; 30 s at 8 kHz fits
MAX_CHUNK_FRAMES = 240_000


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lam: float = 1.0
    lr: float = 1e-4
    batch_size: int = 16
    max_epochs: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.lam <= 0:
            raise ValueError("lam must be positive")
        if self.lr < 0:
            raise ValueError("lr must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be at least 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})


@dataclass
class Checkpoint:
    params: dict
    model_config: ModelConfig
    train_config: TrainConfig
    fold: int | None
    epoch: int
    val_uar: float

    def __post_init__(self):
        if not 0.0 <= self.val_uar <= 1.0:
            raise ValueError("validation UAR must lie in [0, 1]")

    def model(self) -> CovidNet:
        net = build_model(self.model_config, seed=0)
        net.load_arrays(self.params)
        return net

    def save(self, path) -> None:
        meta = {
            "model_config": self.model_config.to_dict(),
            "train_config": self.train_config.to_dict(),
            "fold": self.fold,
            "epoch": self.epoch,
            "val_uar": self.val_uar,
        }
        tn.save_arrays(path, self.params, meta)

    @classmethod
    def load(cls, path) -> "Checkpoint":
        arrays, meta = tn.load_arrays(path)
        return cls(
            params=arrays,
            model_config=ModelConfig.from_dict(meta["model_config"]),
            train_config=TrainConfig.from_dict(meta["train_config"]),
            fold=meta["fold"],
            epoch=meta["epoch"],
            val_uar=meta["val_uar"],
        )


def make_batches(bundles: Sequence[InputBundle], labels, batch_size: int = 16, rng=None) -> list[Batch]:
    """Shuffle (when ``rng`` is given) and cut into zero-padded batches."""
    if len(bundles) == 0:
        raise ValueError("cannot batch an empty dataset")
    labels = np.asarray(labels)
    order = rng.permutation(len(bundles)) if rng is not None else np.arange(len(bundles))
    batches = []
    for start in range(0, len(order), batch_size):
        idx = order[start : start + batch_size]
        batches.append(collate([bundles[i] for i in idx], labels[idx], idx))
    return batches


def _chunks(lengths: np.ndarray, max_frames: int) -> list[np.ndarray]:
    """Group batch positions, shortest first, so padded size stays under ``max_frames``."""
    order = np.argsort(lengths, kind="stable")
    chunks, current = [], []
    for i in order:
        if current and (len(current) + 1) * lengths[i] > max_frames:
            chunks.append(np.array(current))
            current = []
        current.append(i)
    chunks.append(np.array(current))
    return chunks


def accumulate_batch_gradient(
    model: CovidNet,
    bundles: Sequence[InputBundle],
    labels,
    lam: float,
    rng,
    max_chunk_frames: int = MAX_CHUNK_FRAMES,
) -> float:
    """Loss of one mini-batch, accumulating its gradient into the parameters.

    The batch is evaluated in padded chunks; each chunk's loss is scaled by
    its share of the batch so the summed gradient equals the full-batch one.
    """
    labels = np.asarray(labels, dtype=np.float64)
    n = len(bundles)
    lengths = np.array([b.raw.shape[0] for b in bundles])
    total = 0.0
    for chunk in _chunks(lengths, max_chunk_frames):
        batch = collate([bundles[i] for i in chunk])
        p = forward(model, batch, training=True, rng=rng)
        loss = tn.weighted_bce(labels[chunk], p, lam, scale=len(chunk) / n)
        loss.backward()
        total += float(loss.data)
    return total


@dataclass
class TrainingRun:
    """Resumable training state: model, optimiser, rng and best checkpoint so far."""

    model: CovidNet
    model_config: ModelConfig
    train_config: TrainConfig
    fold: int | None = None
    adam: tn.AdamState = field(default_factory=tn.AdamState)
    rng: np.random.Generator | None = None
    epoch: int = 0
    best: Checkpoint | None = None
    history: list = field(default_factory=list)

    @classmethod
    def start(cls, model_config: ModelConfig, train_config: TrainConfig, fold: int | None = None) -> "TrainingRun":
        seed = train_config.seed
        return cls(
            model=build_model(model_config, seed),
            model_config=model_config,
            train_config=train_config,
            fold=fold,
            rng=np.random.default_rng([seed, 1 if fold is None else 2 + fold]),
        )

    def run_epoch(self, bundles, labels) -> float:
        cfg = self.train_config
        params = {k: p.data for k, p in self.model.params.items()}
        losses, sizes = [], []
        for batch_idx in _epoch_order(len(bundles), cfg.batch_size, self.rng):
            self.model.zero_grad()
            loss = accumulate_batch_gradient(
                self.model, [bundles[i] for i in batch_idx], np.asarray(labels)[batch_idx], cfg.lam, self.rng
            )
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite training loss at epoch {self.epoch + 1}")
            grads = {k: p.grad for k, p in self.model.params.items()}
            tn.adam_step(params, grads, self.adam, cfg.lr)
            losses.append(loss)
            sizes.append(len(batch_idx))
        self.epoch += 1
        return float(np.average(losses, weights=sizes))

    def run_until(self, epochs: int, train_data, val_data, log: Callable[[dict], None] | None = None) -> Checkpoint:
        """Train until ``epochs`` total epochs have run; return the best checkpoint."""
        train_bundles, train_labels = train_data
        val_bundles, val_labels = val_data
        while self.epoch < epochs:
            try:
                loss = self.run_epoch(train_bundles, train_labels)
            except tn.NonFiniteError as exc:
                raise TrainingError(f"training diverged at epoch {self.epoch + 1}: {exc}") from exc
            score = uar(val_labels, predict_batch(self.model, val_bundles))
            record = {"epoch": self.epoch, "train_loss": loss, "holdout_uar": score}
            if self.fold is not None:
                record["fold"] = self.fold
            self.history.append(record)
            if log is not None:
                log(record)
            logger.debug("epoch %d loss %.5f holdout UAR %.4f", self.epoch, loss, score)
            # strict improvement keeps the earliest epoch on ties
            if self.best is None or score > self.best.val_uar:
                self.best = Checkpoint(
                    params={k: v.copy() for k, v in self.model.arrays().items()},
                    model_config=self.model_config,
                    train_config=self.train_config,
                    fold=self.fold,
                    epoch=self.epoch,
                    val_uar=score,
                )
        if self.best is None:
            raise TrainingError("no epoch was run")
        return self.best


def _epoch_order(n: int, batch_size: int, rng) -> list[np.ndarray]:
    order = rng.permutation(n)
    return [order[s : s + batch_size] for s in range(0, n, batch_size)]


class JsonlLog:
    """Append-only JSON-lines writer."""

    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.path.write_text("")

    def __call__(self, record: dict) -> None:
        with self.path.open("a", encoding="utf-8") as fh:
            fh.write(json.dumps(record, sort_keys=True) + "\n")


def fold_data(foldplan: FoldPlan, holdout_index: int, features: Mapping[str, InputBundle]):
    """((train bundles, labels), (hold-out bundles, labels)) for one fold."""
    train = foldplan.training(holdout_index)
    hold = foldplan.holdout(holdout_index)
    return (
        ([features[e.path] for e in train], np.array([e.label for e in train])),
        ([features[e.path] for e in hold], np.array([e.label for e in hold])),
    )


def train_on_fold(
    foldplan: FoldPlan,
    holdout_index: int,
    model_config: ModelConfig,
    train_config: TrainConfig,
    features: Mapping[str, InputBundle],
    log: Callable[[dict], None] | None = None,
) -> Checkpoint:
    """Train on every fold but ``holdout_index``; keep the epoch with the best hold-out UAR."""
    if not 0 <= holdout_index < foldplan.k:
        raise ValueError(f"holdout_index must lie in [0, {foldplan.k})")
    train_data, val_data = fold_data(foldplan, holdout_index, features)
    run = TrainingRun.start(model_config, train_config, fold=holdout_index)
    return run.run_until(train_config.max_epochs, train_data, val_data, log)


def evaluate(checkpoint: Checkpoint | CovidNet, bundles: Sequence[InputBundle], labels) -> tuple[list[float], MetricBundle]:
    """Eval-mode probabilities and the metric bundle at threshold 0.5."""
    if len(bundles) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    model = checkpoint.model() if isinstance(checkpoint, Checkpoint) else checkpoint
    probs = predict_batch(model, bundles)
    return probs, metric_bundle(labels, probs)


class CovidNetClassifier(ClassifierMixin, BaseEstimator):
    """Estimator wrapper around the three-branch network.

    ``X`` is a sequence of :class:`InputBundle`. When ``eval_set`` is passed to
    :meth:`fit`, the parameters from the epoch with the best hold-out UAR are
    kept; otherwise the final epoch's parameters are.
    """

    def __init__(
        self,
        n_blocks=3,
        channels=64,
        n_dense=1,
        lam=1.0,
        lr=1e-4,
        batch_size=16,
        max_epochs=10,
        seed=0,
    ):
        self.n_blocks = n_blocks
        self.channels = channels
        self.n_dense = n_dense
        self.lam = lam
        self.lr = lr
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.seed = seed

    def _configs(self):
        return (
            ModelConfig(self.n_blocks, self.channels, self.n_dense),
            TrainConfig(self.lam, self.lr, self.batch_size, self.max_epochs, self.seed),
        )

    def fit(self, X, y, eval_set=None):
        y = np.asarray(y).astype(int)
        if len(X) != len(y):
            raise ValueError("X and y differ in length")
        self.classes_ = np.array([0, 1])
        model_config, train_config = self._configs()
        run = TrainingRun.start(model_config, train_config)
        if eval_set is None:
            for _ in range(train_config.max_epochs):
                run.run_epoch(X, y)
            self.model_ = run.model
            self.best_epoch_ = run.epoch
            self.best_val_uar_ = None
        else:
            best = run.run_until(train_config.max_epochs, (X, y), (eval_set[0], np.asarray(eval_set[1])))
            self.model_ = best.model()
            self.best_epoch_ = best.epoch
            self.best_val_uar_ = best.val_uar
        self.history_ = run.history
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "model_")
        p = np.array(predict_batch(self.model_, X))
        return np.column_stack([1.0 - p, p])

    def predict(self, X):
        return (self.predict_proba(X)[:, 1] >= 0.5).astype(int)
