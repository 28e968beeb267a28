"""Probability-averaging ensembles and subset selection."""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .metrics import MetricBundle, auc, metric_bundle, uar

STRATEGIES = ("best-uar", "best-auc", "best-per-fold", "all")
MAX_EXHAUSTIVE = 20
ORACLE_TAG = "oracle selection on the evaluation set"


class EnsembleError(ValueError):
    pass


@dataclass(frozen=True)
class PredictionSet:
    model_id: int
    fold: int
    val_uar: float
    probabilities: tuple
    entry_ids: tuple | None = None

    def __post_init__(self):
        p = np.asarray(self.probabilities, dtype=np.float64)
        if p.ndim != 1 or not np.all((p > 0.0) & (p < 1.0)):
            raise EnsembleError(f"model {self.model_id}: probabilities must lie strictly inside (0, 1)")
        if self.entry_ids is not None and len(self.entry_ids) != len(p):
            raise EnsembleError(f"model {self.model_id}: entry ids and probabilities differ in length")

    @property
    def p(self) -> np.ndarray:
        return np.asarray(self.probabilities, dtype=np.float64)

    def to_json(self) -> dict:
        d = {
            "model_id": self.model_id,
            "fold": self.fold,
            "val_uar": self.val_uar,
            "probabilities": list(self.probabilities),
        }
        if self.entry_ids is not None:
            d["entry_ids"] = list(self.entry_ids)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "PredictionSet":
        ids = d.get("entry_ids")
        return cls(
            int(d["model_id"]),
            int(d["fold"]),
            float(d["val_uar"]),
            tuple(float(x) for x in d["probabilities"]),
            None if ids is None else tuple(ids),
        )


def _check_aligned(members: Sequence[PredictionSet]) -> None:
    if not members:
        raise EnsembleError("an ensemble needs at least one member")
    first = members[0]
    for m in members[1:]:
        if len(m.probabilities) != len(first.probabilities):
            raise EnsembleError(f"models {first.model_id} and {m.model_id} cover different numbers of entries")
        if first.entry_ids is not None and m.entry_ids is not None and m.entry_ids != first.entry_ids:
            raise EnsembleError(f"models {first.model_id} and {m.model_id} order their entries differently")


def average_probabilities(members: Sequence[PredictionSet]) -> np.ndarray:
    _check_aligned(members)
    return np.mean(np.stack([m.p for m in members]), axis=0)


def best_per_fold(pool: Sequence[PredictionSet], folds: Sequence[int] | None = None) -> list[PredictionSet]:
    """Highest validation UAR in each fold; ties go to the lowest model id."""
    folds = sorted({m.fold for m in pool}) if folds is None else list(folds)
    out = []
    for f in folds:
        group = [m for m in pool if m.fold == f]
        if not group:
            raise EnsembleError(f"fold {f} has no models")
        out.append(min(group, key=lambda m: (-m.val_uar, m.model_id)))
    return out


def _metric(name: str):
    if name == "uar":
        return uar
    if name == "auc":
        return auc
    raise EnsembleError(f"unknown selection metric {name!r}")


def search_best_subset(pool: Sequence[PredictionSet], labels, metric: str = "uar", greedy: bool = False):
    """Subset whose averaged probabilities score best on ``labels``.

    Returns ``(members, score)``. Ties prefer the smaller subset, then the
    lexicographically smaller sorted id tuple. Exhaustive up to
    ``MAX_EXHAUSTIVE`` members; pass ``greedy=True`` for forward selection.
    """
    pool = sorted(pool, key=lambda m: m.model_id)
    _check_aligned(pool)
    score_fn = _metric(metric)
    y = np.asarray(labels)
    if greedy:
        return _greedy(pool, y, score_fn)
    if len(pool) > MAX_EXHAUSTIVE:
        raise EnsembleError(f"{len(pool)} members is too many for exhaustive search; use greedy=True")
    P = np.stack([m.p for m in pool])
    best_key, best = None, None
    for size in range(1, len(pool) + 1):
        for combo in itertools.combinations(range(len(pool)), size):
            score = score_fn(y, P[list(combo)].mean(axis=0))
            # combinations come out in lexicographic order, so strict > keeps the first tie
            if best_key is None or score > best_key:
                best_key, best = score, combo
    return [pool[i] for i in best], float(best_key)


def _greedy(pool, y, score_fn):
    chosen: list[int] = []
    best_score = -np.inf
    remaining = list(range(len(pool)))
    while remaining:
        trial = [(score_fn(y, np.mean([pool[i].p for i in chosen + [j]], axis=0)), j) for j in remaining]
        score, j = max(trial, key=lambda t: (t[0], -t[1]))
        if score <= best_score:
            break
        chosen.append(j)
        remaining.remove(j)
        best_score = score
    return [pool[i] for i in sorted(chosen)], float(best_score)


@dataclass
class EnsembleReport:
    strategy: str
    members: list
    metrics: MetricBundle
    oracle: bool
    note: str = ""
    probabilities: list = field(default_factory=list)

    def to_json(self) -> dict:
        d = {
            "strategy": self.strategy,
            "members": self.members,
            "metrics": self.metrics.as_percent(),
            "oracle": self.oracle,
            "probabilities": self.probabilities,
        }
        if self.note:
            d["note"] = self.note
        return d


def select(pool: Sequence[PredictionSet], strategy: str, labels=None, greedy: bool = False) -> list[PredictionSet]:
    if strategy == "best-per-fold":
        return best_per_fold(pool)
    if strategy == "all":
        return sorted(pool, key=lambda m: m.model_id)
    if strategy in ("best-uar", "best-auc"):
        if labels is None:
            raise EnsembleError(f"{strategy} needs evaluation labels")
        members, _ = search_best_subset(pool, labels, strategy.split("-")[1], greedy=greedy)
        return members
    raise EnsembleError(f"unknown strategy {strategy!r}; choose from {', '.join(STRATEGIES)}")


def build_report(pool: Sequence[PredictionSet], labels, strategy: str, greedy: bool = False) -> EnsembleReport:
    members = select(pool, strategy, labels, greedy)
    p = average_probabilities(members)
    oracle = strategy in ("best-uar", "best-auc")
    return EnsembleReport(
        strategy=strategy,
        members=[m.model_id for m in members],
        metrics=metric_bundle(labels, p),
        oracle=oracle,
        note=ORACLE_TAG if oracle else "",
        probabilities=[float(x) for x in p],
    )


def write_report(path, report: EnsembleReport) -> None:
    from .tensor import atomic_write_text

    atomic_write_text(path, json.dumps(report.to_json(), indent=2, sort_keys=True) + "\n")
