"""BOHB: HyperBand brackets with a kernel-density proposal model.

Configurations live in a unit hypercube ("transformed space"); integer
dimensions are rounded only when a point is turned back into a config, and
the density model always sees the unrounded point.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.stats import truncnorm

logger = logging.getLogger(__name__)


# ------------------------------------------------------------------ space


@dataclass(frozen=True)
class Dimension:
    name: str
    low: float
    high: float
    integer: bool = False
    log: bool = False

    def _span(self):
        lo, hi = (self.low - 0.5, self.high + 0.5) if self.integer else (self.low, self.high)
        if self.log:
            return math.log10(lo), math.log10(hi)
        return lo, hi

    def to_unit(self, value: float) -> float:
        lo, hi = self._span()
        v = math.log10(value) if self.log else float(value)
        return (v - lo) / (hi - lo)

    def from_unit(self, u: float):
        lo, hi = self._span()
        v = lo + float(np.clip(u, 0.0, 1.0)) * (hi - lo)
        if self.log:
            v = 10.0**v
        if self.integer:
            return int(min(max(round(v), self.low), self.high))
        return float(min(max(v, self.low), self.high))

    def contains(self, value) -> bool:
        if self.integer and int(value) != value:
            return False
        return self.low <= value <= self.high


@dataclass(frozen=True)
class SearchSpace:
    dims: tuple[Dimension, ...]

    @classmethod
    def default(cls) -> "SearchSpace":
        """Blocks N, channels C, dense layers F, learning rate and class weight."""
        return cls(
            (
                Dimension("n_blocks", 2, 6, integer=True),
                Dimension("channels", 64, 512, integer=True),
                Dimension("n_dense", 1, 2, integer=True),
                Dimension("lr", 1e-7, 1e-3, log=True),
                Dimension("lam", 0.5, 2.2, log=True),
            )
        )

    @property
    def names(self) -> list[str]:
        return [d.name for d in self.dims]

    def __len__(self):
        return len(self.dims)

    def from_unit(self, u) -> dict:
        return {d.name: d.from_unit(x) for d, x in zip(self.dims, u)}

    def to_unit(self, config: dict) -> np.ndarray:
        return np.array([d.to_unit(config[d.name]) for d in self.dims])

    def contains(self, config: dict) -> bool:
        return all(d.contains(config[d.name]) for d in self.dims)


# --------------------------------------------------------------- schedule


@dataclass(frozen=True)
class Bracket:
    n: int
    budget: float
    rungs: tuple[tuple[int, float], ...]


def hyperband_schedule(R: float = 27, eta: int = 3) -> list[Bracket]:
    """Brackets s = s_max..0; bracket s starts ceil((s_max+1)/(s+1) * eta^s) configs at R * eta^-s."""
    if R < 1:
        raise ValueError("R must be at least 1")
    if eta < 2:
        raise ValueError("eta must be at least 2")
    s_max = 0
    while eta ** (s_max + 1) <= R:
        s_max += 1
    brackets = []
    for s in range(s_max, -1, -1):
        n = -(-((s_max + 1) * eta**s) // (s + 1))
        r = R / eta**s
        rungs = tuple((n // eta**i, r * eta**i) for i in range(s + 1))
        brackets.append(Bracket(n, r, rungs))
    return brackets


def promote(scores: Sequence[float], eta: int) -> list[int]:
    """Positions of the top floor(n/eta) scores; ties go to the earlier position."""
    keep = len(scores) // eta
    order = sorted(range(len(scores)), key=lambda i: -scores[i])
    return sorted(order[:keep])


# -------------------------------------------------------------------- KDE


@dataclass(frozen=True)
class KDE:
    points: np.ndarray  # (n, d) in unit space
    bandwidth: np.ndarray  # (d,)

    def pdf(self, x) -> np.ndarray:
        x = np.atleast_2d(x)
        z = (x[:, None, :] - self.points[None, :, :]) / self.bandwidth
        k = np.exp(-0.5 * z**2) / (np.sqrt(2 * np.pi) * self.bandwidth)
        return k.prod(axis=2).mean(axis=1)


def scott_bandwidth(points: np.ndarray, floor: float = 1e-3) -> np.ndarray:
    n, d = points.shape
    std = points.std(axis=0, ddof=1) if n > 1 else np.zeros(d)
    return np.maximum(std * n ** (-1.0 / (d + 4)), floor)


def fit_kde(vectors, scores, n_min: int | None = None, top_fraction: float = 0.15, min_bandwidth: float = 1e-3):
    """Split observations into good/bad sets and fit one density to each.

    Returns ``(good, bad)``, or ``None`` when fewer than ``n_min + 2``
    observations are available (the caller then samples uniformly).
    """
    x = np.asarray(vectors, dtype=np.float64)
    s = np.asarray(scores, dtype=np.float64)
    n = len(s)
    if n == 0:
        return None
    d = x.shape[1]
    n_min = d + 1 if n_min is None else n_min
    if n < n_min + 2:
        return None
    n_good = max(n_min, math.ceil(top_fraction * n))
    order = sorted(range(n), key=lambda i: -s[i])
    good = x[order[:n_good]]
    bad = x[order[n_good:]]
    return (
        KDE(good, scott_bandwidth(good, min_bandwidth)),
        KDE(bad, scott_bandwidth(bad, min_bandwidth)),
    )


def good_set_size(n: int, d: int = 5, top_fraction: float = 0.15) -> int:
    return max(d + 1, math.ceil(top_fraction * n))


# ------------------------------------------------------------------ state


@dataclass
class Observation:
    config_id: int
    config: dict
    vector: tuple
    budget: float
    score: float
    failed: bool = False
    wall_time: float | None = None

    def to_json(self, timing: bool = False) -> dict:
        d = asdict(self)
        d["vector"] = list(self.vector)
        if not timing:
            d.pop("wall_time")
        return d

    @classmethod
    def from_json(cls, d: dict) -> "Observation":
        return cls(
            config_id=int(d["config_id"]),
            config=dict(d["config"]),
            vector=tuple(d["vector"]),
            budget=float(d["budget"]),
            score=float(d["score"]),
            failed=bool(d.get("failed", False)),
            wall_time=d.get("wall_time"),
        )


@dataclass
class BohbSettings:
    rho_random: float = 1.0 / 3.0
    top_fraction: float = 0.15
    n_candidates: int = 24
    bandwidth_factor: float = 3.0
    min_bandwidth: float = 1e-3
    n_min: int | None = None


@dataclass
class BohbState:
    space: SearchSpace
    settings: BohbSettings = field(default_factory=BohbSettings)
    observations: dict = field(default_factory=dict)  # budget -> list[Observation]
    models: dict = field(default_factory=dict)  # budget -> (good, bad)

    def add(self, obs: Observation) -> None:
        bucket = self.observations.setdefault(obs.budget, [])
        bucket.append(obs)
        st = self.settings
        model = fit_kde(
            [o.vector for o in bucket],
            [o.score for o in bucket],
            n_min=st.n_min if st.n_min is not None else len(self.space) + 1,
            top_fraction=st.top_fraction,
            min_bandwidth=st.min_bandwidth,
        )
        if model is not None:
            self.models[obs.budget] = model

    def model(self):
        """KDE pair of the largest budget that has one."""
        if not self.models:
            return None
        return self.models[max(self.models)]


def sample_config(state: BohbState, rng: np.random.Generator) -> tuple[dict, np.ndarray, bool]:
    """Propose ``(config, unit_vector, from_model)``."""
    space, st = state.space, state.settings
    model = state.model()
    if model is None or rng.random() < st.rho_random:
        u = rng.random(len(space))
        return space.from_unit(u), u, False
    good, bad = model
    best_u, best_ratio = None, -np.inf
    for _ in range(st.n_candidates):
        centre = good.points[rng.integers(len(good.points))]
        bw = np.maximum(good.bandwidth, st.min_bandwidth) * st.bandwidth_factor
        a = (0.0 - centre) / bw
        b = (1.0 - centre) / bw
        u = truncnorm.rvs(a, b, loc=centre, scale=bw, random_state=rng)
        ratio = good.pdf(u)[0] / max(bad.pdf(u)[0], 1e-32)
        if ratio > best_ratio:
            best_u, best_ratio = u, ratio
    return space.from_unit(best_u), best_u, True


# -------------------------------------------------------------------- run


@dataclass
class BohbResult:
    ranked: list  # (config, score, budget, config_id)
    observations: list


def _config_key(config: dict) -> str:
    return json.dumps(config, sort_keys=True)


def run_bohb(
    objective: Callable[[dict, float], float],
    space: SearchSpace | None = None,
    max_evaluations: int = 200,
    seed: int = 0,
    R: float = 27,
    eta: int = 3,
    settings: BohbSettings | None = None,
    history: Sequence[Observation] | None = None,
    log: Callable[[Observation], None] | None = None,
) -> BohbResult:
    """Maximise ``objective(config, budget)`` over repeated HyperBand iterations.

    Stops after ``max_evaluations`` objective evaluations (a bracket in
    progress is cut short). Observations found in ``history`` (an earlier
    log from the same seed) are replayed instead of re-evaluated.
    """
    space = space or SearchSpace.default()
    state = BohbState(space, settings or BohbSettings())
    rng = np.random.default_rng(seed)
    replay = {(o.config_id, o.budget): o for o in (history or [])}
    observations: list[Observation] = []
    next_id = 0
    schedule = hyperband_schedule(R, eta)

    def evaluate(cid, config, vector, budget):
        prior = replay.get((cid, budget))
        if prior is not None:
            if _config_key(prior.config) != _config_key(config):
                raise ValueError(f"history does not match this search at config {cid}; was it run with another seed?")
            obs = prior
        else:
            start = time.perf_counter()
            try:
                score = float(objective(config, budget))
                failed = not np.isfinite(score)
                score = score if not failed else 0.0
            except Exception as exc:  # noqa: BLE001 - a failed trial must not stop the search
                logger.warning("objective failed for config %d at budget %g: %s", cid, budget, exc)
                score, failed = 0.0, True
            obs = Observation(cid, config, tuple(float(v) for v in vector), budget, score, failed, time.perf_counter() - start)
            if not 0.0 <= obs.score <= 1.0:
                raise ValueError(f"objective returned {obs.score}, outside [0, 1]")
        state.add(obs)
        observations.append(obs)
        if log is not None:
            log(obs)
        return obs.score

    while len(observations) < max_evaluations:
        for bracket in schedule:
            if len(observations) >= max_evaluations:
                break
            configs = []
            scores = []
            n0, r0 = bracket.rungs[0]
            for _ in range(n0):
                if len(observations) >= max_evaluations:
                    break
                config, vector, _ = sample_config(state, rng)
                cid = next_id
                next_id += 1
                configs.append((cid, config, vector))
                scores.append(evaluate(cid, config, vector, r0))
            for n_i, r_i in bracket.rungs[1:]:
                if len(observations) >= max_evaluations or len(configs) < n0:
                    break
                configs = [configs[i] for i in promote(scores, eta)][:n_i]
                scores = []
                for cid, config, vector in configs:
                    if len(observations) >= max_evaluations:
                        break
                    scores.append(evaluate(cid, config, vector, r_i))
                n0 = len(configs)
                if len(scores) < len(configs):
                    break

    ordered = sorted(observations, key=lambda o: (-o.budget, -o.score, o.config_id))
    return BohbResult([(o.config, o.score, o.budget, o.config_id) for o in ordered], ordered)


def finalists(result: BohbResult, k: int = 4) -> list[dict]:
    """Distinct configs with the best score at the largest budget each reached."""
    seen = set()
    out = []
    for config, score, budget, cid in result.ranked:
        key = _config_key(config)
        if key in seen:
            continue
        seen.add(key)
        out.append({"config_id": cid, "config": config, "score": score, "budget": budget})
        if len(out) == k:
            break
    return out


def read_log(path) -> list[Observation]:
    path = Path(path)
    if not path.exists():
        return []
    return [Observation.from_json(json.loads(line)) for line in path.read_text().splitlines() if line.strip()]


class ObservationLog:
    def __init__(self, path, timing: bool = False):
        self.path = Path(path)
        self.timing = timing
        self.path.write_text("")

    def __call__(self, obs: Observation) -> None:
        with self.path.open("a", encoding="utf-8") as fh:
            fh.write(json.dumps(obs.to_json(self.timing), sort_keys=True) + "\n")


class FoldObjective:
    """Mean best hold-out UAR over all folds after ``budget`` epochs.

    Runs are cached per configuration, so a promoted config resumes training
    from where its lower-budget evaluation stopped.
    """

    def __init__(self, foldplan, features, seed: int = 0, batch_size: int = 16):
        from .trainer import fold_data

        self.foldplan = foldplan
        self.seed = seed
        self.batch_size = batch_size
        self._data = [fold_data(foldplan, i, features) for i in range(foldplan.k)]
        self._runs: dict[str, list] = {}

    def __call__(self, config: dict, budget: float) -> float:
        from .model import ModelConfig
        from .trainer import TrainConfig, TrainingRun

        epochs = max(1, int(round(budget)))
        key = _config_key(config)
        if key not in self._runs:
            mc = ModelConfig(config["n_blocks"], config["channels"], config["n_dense"])
            tc = TrainConfig(config["lam"], config["lr"], self.batch_size, epochs, self.seed)
            self._runs[key] = [TrainingRun.start(mc, tc, fold=i) for i in range(self.foldplan.k)]
        scores = []
        for run, (train, val) in zip(self._runs[key], self._data):
            scores.append(run.run_until(epochs, train, val).val_uar)
        return float(np.mean(scores))
