"""Classical baseline: frame descriptors, statistical functionals, PCA, linear SVM."""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
from scipy.stats import kurtosis, skew
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.pipeline import Pipeline
from sklearn.utils.validation import check_is_fitted

from .corpus import TARGET_RATE
from .dsp import hann, mel_filterbank, one_sided_weights
from .metrics import MetricBundle, metric_bundle, uar

FRAME = 200  # 25 ms at 8 kHz
HOP = 80  # 10 ms
N_MEL_BANDS = 8
ENERGY_FLOOR = 1e-10
LLD_NAMES = (
    "log_energy",
    "zcr",
    "spectral_centroid",
    "spectral_flux",
    "spectral_rolloff85",
    "spectral_flatness",
    "mel_log_energy_1",
    "mel_log_energy_2",
)
FUNCTIONAL_NAMES = ("mean", "std", "min", "max", "range", "median", "q1", "q3", "iqr", "skewness", "kurtosis", "slope")
N_FEATURES = len(LLD_NAMES) * len(FUNCTIONAL_NAMES)
SVM_GRID = (1e-5, 1e-4, 1e-3, 1e-2, 1e-1, 1.0)


def feature_names() -> list[str]:
    return [f"{lld}.{fn}" for lld in LLD_NAMES for fn in FUNCTIONAL_NAMES]


def _frames(x: np.ndarray) -> np.ndarray:
    if x.size < FRAME:
        raise ValueError(f"clip has {x.size} samples; at least {FRAME} are needed for one frame")
    n = 1 + (x.size - FRAME) // HOP
    idx = np.arange(FRAME)[None, :] + HOP * np.arange(n)[:, None]
    return x[idx]


def low_level_descriptors(clip) -> np.ndarray:
    """(frames, 8) descriptor matrix, columns in ``LLD_NAMES`` order."""
    x = np.asarray(getattr(clip, "samples", clip), dtype=np.float64)
    frames = _frames(x)
    log_energy = np.log(np.sum(frames**2, axis=1) + ENERGY_FLOOR)
    signs = np.signbit(frames)
    zcr = np.mean(signs[:, 1:] != signs[:, :-1], axis=1)

    spec = np.fft.rfft(frames * hann(FRAME), axis=1)
    power = (spec.real**2 + spec.imag**2) * one_sided_weights(FRAME)
    freqs = np.arange(power.shape[1]) * TARGET_RATE / FRAME
    total = power.sum(axis=1)
    safe = np.where(total > 0, total, 1.0)
    centroid = np.where(total > 0, power @ freqs / safe, 0.0)

    mag = np.sqrt(power)
    norm = mag / np.where(mag.sum(axis=1, keepdims=True) > 0, mag.sum(axis=1, keepdims=True), 1.0)
    flux = np.zeros(len(frames))
    flux[1:] = np.sum((norm[1:] - norm[:-1]) ** 2, axis=1)

    cum = np.cumsum(power, axis=1)
    rolloff_bin = np.argmax(cum >= 0.85 * cum[:, -1:], axis=1)
    rolloff = np.where(total > 0, freqs[rolloff_bin], 0.0)

    p = power + ENERGY_FLOOR
    flatness = np.exp(np.mean(np.log(p), axis=1)) / np.mean(p, axis=1)

    mel = np.log(power @ mel_filterbank(FRAME, n_mels=N_MEL_BANDS) + ENERGY_FLOOR)
    return np.column_stack([log_energy, zcr, centroid, flux, rolloff, flatness, mel[:, 0], mel[:, 1]])


def functionals(values: np.ndarray) -> np.ndarray:
    """The 12 statistics of one descriptor track, in ``FUNCTIONAL_NAMES`` order."""
    v = np.asarray(values, dtype=np.float64)
    q1, med, q3 = np.percentile(v, [25, 50, 75])
    std = v.std()
    flat = std <= 1e-12 * max(1.0, np.abs(v).max())
    sk = 0.0 if flat else float(skew(v))
    ku = 0.0 if flat else float(kurtosis(v))
    slope = 0.0 if v.size < 2 else float(np.polyfit(np.arange(v.size), v, 1)[0])
    return np.array([v.mean(), std, v.min(), v.max(), v.max() - v.min(), med, q1, q3, q3 - q1, sk, ku, slope])


def extract_functionals(clip) -> np.ndarray:
    lld = low_level_descriptors(clip)
    return np.concatenate([functionals(lld[:, j]) for j in range(lld.shape[1])])


class FunctionalsExtractor(TransformerMixin, BaseEstimator):
    """Maps a sequence of clips (or sample arrays) to an (n, 96) matrix."""

    def fit(self, X, y=None):
        return self

    def transform(self, X):
        return np.stack([extract_functionals(c) for c in X])


# ------------------------------------------------------------------ PCA


@dataclass(frozen=True)
class PcaModel:
    mean: np.ndarray
    scale: np.ndarray
    components: np.ndarray  # (k, d), rows orthonormal
    variances: np.ndarray  # (k,), non-increasing

    def transform(self, X) -> np.ndarray:
        return ((np.asarray(X, dtype=np.float64) - self.mean) / self.scale) @ self.components.T

    def inverse_transform(self, Z) -> np.ndarray:
        return (np.asarray(Z) @ self.components) * self.scale + self.mean


def fit_pca(X, k: int | None = None, std_floor: float = 1e-8, standardize: bool = True) -> PcaModel:
    """Z-score each feature, then keep the top ``min(100, d, n-1)`` covariance eigenvectors.

    With ``standardize=False`` features are only centred.
    """
    X = np.asarray(X, dtype=np.float64)
    n, d = X.shape
    if n < 2:
        raise ValueError("PCA needs at least two rows")
    k = min(100, d, n - 1) if k is None else min(k, d, n - 1)
    mean = X.mean(axis=0)
    scale = np.maximum(X.std(axis=0), std_floor) if standardize else np.ones(d)
    Z = (X - mean) / scale
    cov = Z.T @ Z / (n - 1)
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(vals)[::-1][:k]
    comps = vecs[:, order].T
    # fix each component's sign so its largest entry is positive
    signs = np.sign(comps[np.arange(k), np.argmax(np.abs(comps), axis=1)])
    comps = comps * np.where(signs == 0, 1.0, signs)[:, None]
    return PcaModel(mean, scale, comps, np.maximum(vals[order], 0.0))


class StandardPCA(TransformerMixin, BaseEstimator):
    def __init__(self, n_components=100):
        self.n_components = n_components

    def fit(self, X, y=None):
        self.model_ = fit_pca(X, self.n_components)
        return self

    def transform(self, X):
        check_is_fitted(self, "model_")
        return self.model_.transform(X)

    def inverse_transform(self, Z):
        check_is_fitted(self, "model_")
        return self.model_.inverse_transform(Z)


# ------------------------------------------------------------------ SVM


@dataclass(frozen=True)
class SvmModel:
    w: np.ndarray
    b: float
    complexity: float

    def decision_function(self, X) -> np.ndarray:
        return np.asarray(X, dtype=np.float64) @ self.w + self.b


def svm_objective(w, b, X, y_pm, complexity: float) -> float:
    margins = y_pm * (X @ w + b)
    return 0.5 * float(w @ w) + complexity * float(np.maximum(0.0, 1.0 - margins).sum())


def best_bias(scores, y_pm) -> float:
    """Exact minimiser over ``b`` of ``sum(hinge(y * (scores + b)))``.

    The sum is convex and piecewise linear with kinks where a margin equals
    one; the smallest kink at which the right slope turns non-negative wins.
    """
    pos = np.sort(1.0 - scores[y_pm > 0])
    neg = np.sort(-1.0 - scores[y_pm < 0])
    kinks = np.sort(np.concatenate([pos, neg]))
    slope = np.searchsorted(neg, kinks, side="right") - (pos.size - np.searchsorted(pos, kinks, side="right"))
    return float(kinks[np.argmax(slope >= 0)])


def fit_svm(X, labels, complexity: float, n_iter: int = 2000) -> SvmModel:
    """Primal linear SVM, ``0.5*|w|^2 + C * sum(hinge)``.

    ``w`` follows full-batch subgradient steps of size ``1 / (t + 1)`` (the
    objective is 1-strongly convex in ``w``); after each step the unregularised
    bias is set to its exact minimiser. The best iterate by objective is kept.
    No randomness is involved, so the fit is bit-reproducible.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(labels).astype(int)
    if set(np.unique(y)) != {0, 1}:
        raise ValueError("the SVM needs both classes")
    if complexity <= 0:
        raise ValueError("complexity must be positive")
    y_pm = np.where(y == 1, 1.0, -1.0)
    w = np.zeros(X.shape[1])
    b = best_bias(np.zeros(len(y)), y_pm)
    best = (svm_objective(w, b, X, y_pm, complexity), w.copy(), b)
    for t in range(n_iter):
        active = y_pm * (X @ w + b) < 1.0
        w = w - (w - complexity * (y_pm[active] @ X[active])) / (t + 1.0)
        b = best_bias(X @ w, y_pm)
        obj = svm_objective(w, b, X, y_pm, complexity)
        if obj < best[0]:
            best = (obj, w.copy(), b)
    return SvmModel(best[1], float(best[2]), complexity)


class LinearSVM(ClassifierMixin, BaseEstimator):
    def __init__(self, complexity=1e-3, n_iter=2000):
        self.complexity = complexity
        self.n_iter = n_iter

    def fit(self, X, y):
        self.model_ = fit_svm(X, y, self.complexity, self.n_iter)
        self.classes_ = np.array([0, 1])
        return self

    def decision_function(self, X):
        check_is_fitted(self, "model_")
        return self.model_.decision_function(X)

    def predict_proba(self, X):
        """Logistic squashing of the margin: a score for ranking, not a calibrated probability."""
        p = 1.0 / (1.0 + np.exp(-np.clip(self.decision_function(X), -500, 500)))
        return np.column_stack([1.0 - p, p])

    def predict(self, X):
        return (self.decision_function(X) >= 0).astype(int)


def make_pipeline(complexity: float) -> Pipeline:
    return Pipeline([("pca", StandardPCA()), ("svm", LinearSVM(complexity))])


# -------------------------------------------------------------- end to end


@dataclass
class BaselineResult:
    complexity: float
    dev_uar: dict
    metrics: MetricBundle
    probabilities: list

    def to_json(self) -> dict:
        return {
            "complexity": self.complexity,
            "dev_uar": {repr(c): u for c, u in self.dev_uar.items()},
            "metrics": self.metrics.as_percent(),
            "probabilities": self.probabilities,
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n"


def run_baseline(features: Mapping[str, np.ndarray], split, grid: Sequence[float] = SVM_GRID) -> BaselineResult:
    """Select the SVM complexity on dev, refit on train + dev, score the test part.

    ``features`` maps manifest paths to functionals vectors.
    """

    def xy(entries):
        return np.stack([features[e.path] for e in entries]), np.array([e.label for e in entries])

    Xtr, ytr = xy(split.train)
    Xdv, ydv = xy(split.dev)
    Xte, yte = xy(split.test)
    pca = StandardPCA().fit(Xtr)
    Ztr, Zdv = pca.transform(Xtr), pca.transform(Xdv)
    dev_uar = {}
    for c in grid:
        svm = LinearSVM(c).fit(Ztr, ytr)
        dev_uar[c] = uar(ydv, svm.predict_proba(Zdv)[:, 1])
    # ascending grid with strict > keeps the smaller complexity on ties
    chosen = None
    for c in sorted(grid):
        if chosen is None or dev_uar[c] > dev_uar[chosen]:
            chosen = c
    pipe = make_pipeline(chosen).fit(np.vstack([Xtr, Xdv]), np.concatenate([ytr, ydv]))
    p = pipe.predict_proba(Xte)[:, 1]
    return BaselineResult(chosen, dev_uar, metric_bundle(yte, p), [float(v) for v in p])
