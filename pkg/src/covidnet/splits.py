"""Stratified, subject-independent partitioning.

Subjects are packed greedily, largest first, into the part whose entry count
for the subject's class lags furthest behind its target. A deterministic
repair pass then moves or swaps subjects until every part's positive ratio
is within tolerance of the corpus ratio, when that is achievable.
"""

from __future__ import annotations

import csv
import io
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .corpus import Corpus, ManifestEntry

PRIMARY_RATIOS = (0.45, 0.21, 0.34)
PART_NAMES = ("train", "dev", "test")
RATIO_TOLERANCE = 0.03
MIN_SUBJECTS_FOR_TOLERANCE = 30


class SplitError(ValueError):
    pass


class StratificationWarning(UserWarning):
    pass


@dataclass(frozen=True)
class _Subject:
    sid: str
    label: int
    n: int


def _subjects(entries: Sequence[ManifestEntry]) -> list[_Subject]:
    counts: dict[str, list[int]] = {}
    for e in entries:
        counts.setdefault(e.subject_id, []).append(e.label)
    # a subject counts as positive if any of its recordings is
    return [_Subject(sid, int(max(labels)), len(labels)) for sid, labels in sorted(counts.items())]


def _ratio_error(pos: np.ndarray, size: np.ndarray, target: float) -> np.ndarray:
    with np.errstate(invalid="ignore", divide="ignore"):
        r = np.where(size > 0, pos / np.maximum(size, 1), np.nan)
    return np.where(np.isnan(r), 1.0, np.abs(r - target))


def pack_subjects(
    subjects: list[_Subject],
    ratios: Sequence[float],
    seed: int,
    target_ratio: float | None = None,
    tolerance: float = RATIO_TOLERANCE,
) -> tuple[list[int], bool]:
    """Assign each subject a bin index. Returns (assignment, tolerance_met)."""
    k = len(ratios)
    ratios = np.asarray(ratios, dtype=np.float64) / np.sum(ratios)
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(subjects))
    order = sorted(order, key=lambda i: -subjects[i].n)  # stable: ties keep the shuffled order

    n = np.array([s.n for s in subjects])
    lab = np.array([s.label for s in subjects])
    total = np.array([n[lab == 0].sum(), n[lab == 1].sum()], dtype=np.float64)
    targets = ratios[:, None] * total[None, :]  # (k, class)
    size_targets = ratios * n.sum()
    if target_ratio is None:
        target_ratio = total[1] / total.sum()

    counts = np.zeros((k, 2))
    assign = np.full(len(subjects), -1)
    for i in order:
        c = lab[i]
        with np.errstate(divide="ignore", invalid="ignore"):
            deficit = np.where(targets[:, c] > 0, (targets[:, c] - counts[:, c]) / targets[:, c], -np.inf)
        size_def = (size_targets - counts.sum(axis=1)) / size_targets
        # largest class deficit first, then largest size deficit, then lowest index
        best = max(range(k), key=lambda b: (deficit[b], size_def[b], -b))
        assign[i] = best
        counts[best, c] += n[i]

    def cost(cnt):
        size = cnt.sum(axis=1)
        err = _ratio_error(cnt[:, 1], size, target_ratio)
        excess = np.maximum(err - tolerance, 0).sum()
        size_dev = np.abs(size - size_targets).sum() / n.sum()
        empty = np.sum(size == 0)
        return (empty, round(excess, 12), round(size_dev, 12))

    best_cost = cost(counts)
    improved = True
    while improved and best_cost[:2] != (0, 0.0):
        improved = False
        # single moves
        for i in range(len(subjects)):
            a = assign[i]
            for b in range(k):
                if b == a:
                    continue
                trial = counts.copy()
                trial[a, lab[i]] -= n[i]
                trial[b, lab[i]] += n[i]
                tc = cost(trial)
                if tc < best_cost:
                    counts, best_cost = trial, tc
                    assign[i] = b
                    a = b
                    improved = True
        if improved:
            continue
        # pairwise swaps of subjects with different class or size
        for i in range(len(subjects)):
            for j in range(i + 1, len(subjects)):
                a, b = assign[i], assign[j]
                if a == b or (lab[i] == lab[j] and n[i] == n[j]):
                    continue
                trial = counts.copy()
                trial[a, lab[i]] -= n[i]
                trial[b, lab[i]] += n[i]
                trial[b, lab[j]] -= n[j]
                trial[a, lab[j]] += n[j]
                tc = cost(trial)
                if tc < best_cost:
                    counts, best_cost = trial, tc
                    assign[i], assign[j] = b, a
                    improved = True
                    break
            if improved:
                break
    return assign.tolist(), best_cost[:2] == (0, 0.0)


def _positive_ratio(entries) -> float:
    entries = list(entries)
    return sum(e.label for e in entries) / len(entries) if entries else float("nan")


@dataclass(frozen=True)
class SplitPlan:
    train: tuple[ManifestEntry, ...]
    dev: tuple[ManifestEntry, ...]
    test: tuple[ManifestEntry, ...]
    within_tolerance: bool = True

    def part(self, name: str) -> tuple[ManifestEntry, ...]:
        return getattr(self, name)

    def subjects(self, name: str) -> set[str]:
        return {e.subject_id for e in self.part(name)}

    @property
    def sizes(self) -> tuple[int, int, int]:
        return len(self.train), len(self.dev), len(self.test)

    def positive_ratio(self, name: str) -> float:
        return _positive_ratio(self.part(name))

    @property
    def corpus_ratio(self) -> float:
        return _positive_ratio(self.train + self.dev + self.test)

    def assignment(self) -> dict[str, str]:
        return {e.subject_id: name for name in PART_NAMES for e in self.part(name)}


@dataclass(frozen=True)
class FoldPlan:
    folds: tuple[tuple[ManifestEntry, ...], ...]
    test: tuple[ManifestEntry, ...]
    within_tolerance: bool = True

    @property
    def k(self) -> int:
        return len(self.folds)

    def subjects(self, i: int) -> set[str]:
        return {e.subject_id for e in self.folds[i]}

    def holdout(self, i: int) -> tuple[ManifestEntry, ...]:
        return self.folds[i]

    def training(self, i: int) -> tuple[ManifestEntry, ...]:
        """Entries of every fold except ``i``, in fold order."""
        return tuple(e for j, fold in enumerate(self.folds) if j != i for e in fold)

    def assignment(self) -> dict[str, str]:
        out = {e.subject_id: f"fold{i + 1}" for i, fold in enumerate(self.folds) for e in fold}
        out.update({e.subject_id: "test" for e in self.test})
        return out


def _check_counts(subjects: list[_Subject], k: int, what: str) -> None:
    if len(subjects) < k:
        raise SplitError(f"{what}: {len(subjects)} subjects cannot fill {k} parts")
    for c, name in ((1, "positive"), (0, "negative")):
        if sum(s.label == c for s in subjects) < k:
            raise SplitError(f"{what}: fewer than {k} {name} subjects")


def _group(entries, subjects, assign, k):
    by_sid = {s.sid: a for s, a in zip(subjects, assign)}
    parts = [[] for _ in range(k)]
    for e in entries:
        parts[by_sid[e.subject_id]].append(e)
    return [tuple(p) for p in parts]


def _warn_if_loose(met: bool, n_subjects: int, what: str) -> None:
    if not met:
        qualifier = "" if n_subjects >= MIN_SUBJECTS_FOR_TOLERANCE else f" (only {n_subjects} subjects)"
        warnings.warn(
            f"{what}: positive ratio could not be held within ±{RATIO_TOLERANCE:.0%} of the corpus ratio{qualifier}",
            StratificationWarning,
            stacklevel=3,
        )


def make_primary_split(corpus: Corpus, ratios: Sequence[float] = PRIMARY_RATIOS, seed: int = 0) -> SplitPlan:
    entries = list(corpus.usable())
    subjects = _subjects(entries)
    _check_counts(subjects, len(ratios), "primary split")
    assign, met = pack_subjects(subjects, ratios, seed)
    _warn_if_loose(met, len(subjects), "primary split")
    parts = _group(entries, subjects, assign, len(ratios))
    return SplitPlan(*parts, within_tolerance=met)


def make_folds(split: SplitPlan, k: int = 3, seed: int = 0) -> FoldPlan:
    entries = list(split.train + split.dev)
    subjects = _subjects(entries)
    _check_counts(subjects, k, "fold split")
    assign, met = pack_subjects(subjects, [1.0] * k, seed, target_ratio=split.corpus_ratio)
    _warn_if_loose(met, len(subjects), "fold split")
    folds = _group(entries, subjects, assign, k)
    return FoldPlan(tuple(folds), split.test, within_tolerance=met)


def split_from_assignment(corpus: Corpus, assignment: dict[str, str]) -> SplitPlan:
    """Rebuild a primary split from an explicit subject -> part mapping."""
    parts = {name: [] for name in PART_NAMES}
    for e in corpus.usable():
        part = assignment.get(e.subject_id)
        if part is None:
            raise SplitError(f"subject {e.subject_id!r} has no assigned part")
        if part not in parts:
            raise SplitError(f"unknown part {part!r} for subject {e.subject_id!r}")
        parts[part].append(e)
    return SplitPlan(*(tuple(parts[n]) for n in PART_NAMES))


def folds_from_assignment(corpus: Corpus, assignment: dict[str, str]) -> FoldPlan:
    names = sorted({v for v in assignment.values() if v.startswith("fold")}, key=lambda s: int(s[4:]))
    folds = {n: [] for n in names}
    test = []
    for e in corpus.usable():
        part = assignment.get(e.subject_id)
        if part == "test":
            test.append(e)
        elif part in folds:
            folds[part].append(e)
        else:
            raise SplitError(f"subject {e.subject_id!r} has no fold or test assignment")
    return FoldPlan(tuple(tuple(folds[n]) for n in names), tuple(test))


def format_assignment(assignment: dict[str, str]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("subject_id", "part"))
    for sid in sorted(assignment):
        w.writerow((sid, assignment[sid]))
    return buf.getvalue()


def write_assignment(path, assignment: dict[str, str]) -> None:
    Path(path).write_text(format_assignment(assignment), encoding="utf-8")


def read_assignment(path) -> dict[str, str]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"subject_id", "part"} <= set(reader.fieldnames):
            raise SplitError(f"{path}: expected columns subject_id,part")
        return {row["subject_id"]: row["part"] for row in reader}
