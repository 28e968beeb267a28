"""Binary screening metrics: UAR, AUC, accuracy and class-wise recalls."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from decimal import ROUND_HALF_UP, Decimal

import numpy as np


class UndefinedMetricError(ValueError):
    """The metric needs both classes (or a non-empty set) and did not get them."""


@dataclass(frozen=True)
class Confusion:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def positives(self) -> int:
        return self.tp + self.fn

    @property
    def negatives(self) -> int:
        return self.tn + self.fp

    @property
    def n(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


def _arrays(labels, probabilities):
    y = np.asarray(labels).astype(int).reshape(-1)
    p = np.asarray(probabilities, dtype=np.float64).reshape(-1)
    if y.size != p.size:
        raise ValueError("labels and probabilities differ in length")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be 0 or 1")
    return y, p


def confusion(labels, probabilities, threshold: float = 0.5) -> Confusion:
    """Counts at ``probability >= threshold`` -> positive."""
    y, p = _arrays(labels, probabilities)
    pred = p >= threshold
    return Confusion(
        tp=int(np.sum(pred & (y == 1))),
        fp=int(np.sum(pred & (y == 0))),
        tn=int(np.sum(~pred & (y == 0))),
        fn=int(np.sum(~pred & (y == 1))),
    )


def _require_both(c: Confusion, name: str) -> None:
    if c.positives == 0 or c.negatives == 0:
        raise UndefinedMetricError(f"{name} is undefined unless both classes are present")


def uar(labels, probabilities, threshold: float = 0.5) -> float:
    c = confusion(labels, probabilities, threshold)
    _require_both(c, "UAR")
    return 0.5 * (c.tp / c.positives + c.tn / c.negatives)


def auc(labels, probabilities) -> float:
    """Mann-Whitney statistic: P(score+ > score-) with ties counted one half."""
    y, p = _arrays(labels, probabilities)
    pos = p[y == 1]
    neg = p[y == 0]
    if pos.size == 0 or neg.size == 0:
        raise UndefinedMetricError("AUC is undefined unless both classes are present")
    neg = np.sort(neg)
    below = np.searchsorted(neg, pos, side="left")
    not_above = np.searchsorted(neg, pos, side="right")
    # counts are integers, so twice the statistic is exact before the final division
    twice = np.sum(below + not_above)
    return float(twice) / (2.0 * pos.size * neg.size)


def acc_and_class_recalls(labels, probabilities, threshold: float = 0.5) -> tuple[float, float, float]:
    """(ACC, recall of positives, recall of negatives)."""
    c = confusion(labels, probabilities, threshold)
    if c.n == 0:
        raise UndefinedMetricError("accuracy is undefined on an empty set")
    acc = (c.tp + c.tn) / c.n
    rec_pos = c.tp / c.positives if c.positives else float("nan")
    rec_neg = c.tn / c.negatives if c.negatives else float("nan")
    return acc, rec_pos, rec_neg


@dataclass(frozen=True)
class MetricBundle:
    uar: float
    auc: float
    acc: float
    acc_pos: float
    acc_neg: float
    n: int

    def as_percent(self) -> dict:
        """Percentages at one decimal place (the reporting precision)."""
        out = {k: percent(v) for k, v in asdict(self).items() if k != "n"}
        out["n"] = self.n
        return out

    @classmethod
    def from_percent(cls, d: dict) -> "MetricBundle":
        return cls(
            **{k: float(d[k]) / 100.0 for k in ("uar", "auc", "acc", "acc_pos", "acc_neg")},
            n=int(d.get("n", 0)),
        )


def round_half_up(x: float, places: int = 1) -> float:
    q = Decimal(1).scaleb(-places)
    return float(Decimal(repr(round(float(x), 9))).quantize(q, rounding=ROUND_HALF_UP))


def percent(x: float) -> float:
    return round_half_up(100.0 * x, 1)


def metric_bundle(labels, probabilities, threshold: float = 0.5) -> MetricBundle:
    y, p = _arrays(labels, probabilities)
    acc, rp, rn = acc_and_class_recalls(y, p, threshold)
    return MetricBundle(
        uar=uar(y, p, threshold),
        auc=auc(y, p),
        acc=acc,
        acc_pos=rp,
        acc_neg=rn,
        n=int(y.size),
    )


def metrics_by_modality(labels, probabilities, modalities, threshold: float = 0.5) -> dict:
    """Full bundle per modality subset.

    Each value is a :class:`MetricBundle`, or a dict ``{"undefined": reason}``
    when the subset is empty or holds a single class.
    """
    y, p = _arrays(labels, probabilities)
    mods = np.asarray(modalities)
    if mods.shape != y.shape:
        raise ValueError("one modality tag per entry is required")
    out = {}
    for name in ("breath", "cough"):
        sel = mods == name
        if not sel.any():
            out[name] = {"undefined": "no entries"}
            continue
        try:
            out[name] = metric_bundle(y[sel], p[sel], threshold)
        except UndefinedMetricError as exc:
            out[name] = {"undefined": str(exc)}
    return out
