"""Command-line orchestration: ``covidnet <command> [options]``.

Every command writes its outputs under ``--out`` through a staging
directory, so a failed command leaves nothing half-written, and records a
``run_manifest.json`` describing inputs, configuration and outputs.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import hashlib
import io
import json
import logging
import os
import shutil
import sys
import time
import warnings
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import baseline as bl
from . import ensemble as ens
from . import hpo
from .corpus import AudioClip, Corpus, ManifestError, WavFormatError, generate_synthetic_corpus, load_clip, load_manifest, write_manifest
from .dsp import build_input_bundle
from .metrics import UndefinedMetricError, metric_bundle, metrics_by_modality, round_half_up
from .model import ModelConfig, predict_batch
from .splits import (
    SplitError,
    folds_from_assignment,
    make_folds,
    make_primary_split,
    read_assignment,
    split_from_assignment,
    write_assignment,
)
from .tensor import atomic_write_text, load_arrays, save_arrays
from .trainer import Checkpoint, JsonlLog, TrainConfig, TrainingError, train_on_fold

logger = logging.getLogger("covidnet")

MANIFEST_NAME = "run_manifest.json"
STRATEGY_TITLES = {
    "best-uar": "Best test UAR",
    "best-auc": "Best test AUC",
    "best-per-fold": "Best model per fold",
    "all": "All",
}


class CliError(Exception):
    """A diagnostic for the user; the command exits with status 2."""


# ------------------------------------------------------------------ helpers


def _timestamp() -> str:
    # SOURCE_DATE_EPOCH pins timestamps so manifests can be compared byte for byte
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    t = float(epoch) if epoch else time.time()
    return datetime.fromtimestamp(t, tz=timezone.utc).isoformat(timespec="seconds")


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    if path.is_dir():
        for p in sorted(path.rglob("*")):
            if p.is_file() and p.name != MANIFEST_NAME:
                h.update(str(p.relative_to(path)).encode())
                h.update(p.read_bytes())
    else:
        h.update(path.read_bytes())
    return h.hexdigest()


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def load_config(path, defaults: dict) -> dict:
    """Defaults overlaid with a JSON object; unknown keys and wrong types are errors."""
    config = dict(defaults)
    if path is None:
        return config
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise CliError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise CliError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(data, dict):
        raise CliError(f"{path}: expected a JSON object")
    for key, value in data.items():
        if key not in defaults:
            raise CliError(f"{path}: unknown key {key!r} (allowed: {', '.join(sorted(defaults))})")
        want = defaults[key]
        ok = (
            value is None
            or want is None
            or isinstance(value, type(want))
            or (isinstance(want, float) and isinstance(value, int) and not isinstance(value, bool))
        )
        if not ok:
            raise CliError(f"{path}: {key!r} should be {type(want).__name__}, got {type(value).__name__}")
        config[key] = value
    return config


@contextlib.contextmanager
def staged_output(out: Path):
    """Yield a staging directory; on success move its contents into ``out``."""
    out.mkdir(parents=True, exist_ok=True)
    stage = out / f".staging-{os.getpid()}"
    if stage.exists():
        shutil.rmtree(stage)
    stage.mkdir()
    try:
        yield stage
        for item in sorted(stage.iterdir()):
            target = out / item.name
            if target.is_dir() and not target.is_symlink():
                shutil.rmtree(target)
            os.replace(item, target)
    finally:
        shutil.rmtree(stage, ignore_errors=True)


def write_run_manifest(stage: Path, out: Path, args, config: dict, inputs: list, started: str) -> None:
    outputs = sorted(p.name for p in stage.iterdir())
    manifest = {
        "command": args.command,
        "config": config,
        "seed": getattr(args, "seed", None),
        "inputs": {str(p): _sha256(Path(p)) for p in inputs if p is not None},
        "outputs": [str(out / name) for name in outputs],
        "started": started,
        "finished": _timestamp(),
    }
    atomic_write_text(stage / MANIFEST_NAME, _dump(manifest))


def _require_seed(args) -> int:
    if args.seed is None:
        raise CliError(f"{args.command} is stochastic; pass --seed")
    if args.seed < 0 or args.seed >= 2**64:
        raise CliError("--seed must be an unsigned 64-bit integer")
    return args.seed


def _require(args, *names):
    for n in names:
        if getattr(args, n, None) is None:
            raise CliError(f"{args.command} needs --{n.replace('_', '-')}")


# ---------------------------------------------------------------- prepared data


CLIPS_FILE = "clips.bin"


def load_prepared(prepared: Path) -> tuple[Corpus, dict]:
    """(corpus, path -> 8 kHz AudioClip) from a ``prepare`` output directory."""
    try:
        corpus = load_manifest(prepared / "manifest.csv")
        arrays, meta = load_arrays(prepared / CLIPS_FILE)
    except FileNotFoundError as exc:
        raise CliError(f"{prepared} is not a prepared directory ({exc.filename} missing)") from None
    clips = {p: AudioClip(arrays[f"c{i:05d}"], 8000) for i, p in enumerate(meta["paths"])}
    return corpus, clips


def _features(clips: dict, entries) -> dict:
    return {e.path: build_input_bundle(clips[e.path]) for e in entries}


def _load_split(split_dir: Path, corpus: Corpus):
    try:
        split = split_from_assignment(corpus, read_assignment(split_dir / "split.csv"))
        folds = folds_from_assignment(corpus, read_assignment(split_dir / "folds.csv"))
    except FileNotFoundError as exc:
        raise CliError(f"{split_dir} is not a split directory ({exc.filename} missing)") from None
    return split, folds


# ---------------------------------------------------------------- commands


SYNTH_DEFAULTS = {
    "n_subjects": 120,
    "positive_rate": 0.27,
    "clips_per_subject": 2,
    "duration_mean": 9.96,
    "duration_std": 6.02,
}


def cmd_synth(args, stage: Path) -> tuple[dict, list]:
    seed = _require_seed(args)
    cfg = load_config(args.config, SYNTH_DEFAULTS)
    generate_synthetic_corpus(
        stage,
        n_subjects=cfg["n_subjects"],
        positive_rate=cfg["positive_rate"],
        clips_per_subject=cfg["clips_per_subject"],
        seed=seed,
        duration_mean=cfg["duration_mean"],
        duration_std=cfg["duration_std"],
    )
    return cfg, []


def cmd_prepare(args, stage: Path) -> tuple[dict, list]:
    _require(args, "manifest")
    manifest = Path(args.manifest)
    root = Path(args.root) if args.root else manifest.parent
    corpus = load_manifest(manifest)
    usable = corpus.usable()
    arrays = {}
    for i, e in enumerate(usable):
        try:
            arrays[f"c{i:05d}"] = load_clip(e, root).samples
        except (WavFormatError, OSError) as exc:
            raise CliError(f"{e.path}: {exc}") from None
    save_arrays(stage / CLIPS_FILE, arrays, {"paths": [e.path for e in usable], "sample_rate": 8000})
    write_manifest(stage / "manifest.csv", corpus)
    logger.info("prepared %d clips (%d augmented rows skipped)", len(usable), len(corpus) - len(usable))
    return {"root": str(root)}, [manifest]


SPLIT_DEFAULTS = {"ratios": [0.45, 0.21, 0.34], "k": 3}


def cmd_split(args, stage: Path) -> tuple[dict, list]:
    seed = _require_seed(args)
    _require(args, "prepared")
    cfg = load_config(args.config, SPLIT_DEFAULTS)
    corpus, _ = load_prepared(Path(args.prepared))
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        split = make_primary_split(corpus, cfg["ratios"], seed)
        folds = make_folds(split, cfg["k"], seed)
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    write_assignment(stage / "split.csv", split.assignment())
    write_assignment(stage / "folds.csv", folds.assignment())
    return cfg, [Path(args.prepared) / "manifest.csv"]


BASELINE_DEFAULTS = {"grid": list(bl.SVM_GRID)}


def cmd_baseline(args, stage: Path) -> tuple[dict, list]:
    _require(args, "prepared", "split")
    cfg = load_config(args.config, BASELINE_DEFAULTS)
    corpus, clips = load_prepared(Path(args.prepared))
    split, _ = _load_split(Path(args.split), corpus)
    entries = list(corpus.usable())
    feats = {e.path: bl.extract_functionals(clips[e.path]) for e in entries}
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["path"] + bl.feature_names())
    for e in entries:
        w.writerow([e.path] + [repr(float(v)) for v in feats[e.path]])
    atomic_write_text(stage / "functionals.csv", buf.getvalue())
    result = bl.run_baseline(feats, split, cfg["grid"])
    atomic_write_text(stage / "baseline.json", result.dumps())
    return cfg, [Path(args.prepared) / "manifest.csv", Path(args.split)]


TUNE_DEFAULTS = {
    "max_evaluations": 200,
    "R": 27,
    "eta": 3,
    "batch_size": 16,
    "n_finalists": 4,
    "record_wall_time": False,
    "rho_random": 1.0 / 3.0,
    "top_fraction": 0.15,
    "n_candidates": 24,
    "bandwidth_factor": 3.0,
    "min_bandwidth": 1e-3,
    "space": {},
}


def _space(overrides: dict) -> hpo.SearchSpace:
    dims = []
    for d in hpo.SearchSpace.default().dims:
        if d.name in overrides:
            lo, hi = overrides[d.name]
            if not (d.low <= lo <= hi <= d.high):
                raise CliError(f"space.{d.name} must lie inside [{d.low}, {d.high}]")
            d = hpo.Dimension(d.name, lo, hi, d.integer, d.log)
        dims.append(d)
    unknown = set(overrides) - {d.name for d in dims}
    if unknown:
        raise CliError(f"unknown search dimensions: {', '.join(sorted(unknown))}")
    return hpo.SearchSpace(tuple(dims))


def cmd_tune(args, stage: Path) -> tuple[dict, list]:
    seed = _require_seed(args)
    _require(args, "prepared", "split")
    cfg = load_config(args.config, TUNE_DEFAULTS)
    corpus, clips = load_prepared(Path(args.prepared))
    _, folds = _load_split(Path(args.split), corpus)
    feats = _features(clips, [e for f in folds.folds for e in f])
    objective = hpo.FoldObjective(folds, feats, seed=seed, batch_size=cfg["batch_size"])
    history = hpo.read_log(Path(args.out) / "bohb_log.jsonl") if args.resume else []
    log = hpo.ObservationLog(stage / "bohb_log.jsonl", timing=cfg["record_wall_time"])
    settings = hpo.BohbSettings(
        rho_random=cfg["rho_random"],
        top_fraction=cfg["top_fraction"],
        n_candidates=cfg["n_candidates"],
        bandwidth_factor=cfg["bandwidth_factor"],
        min_bandwidth=cfg["min_bandwidth"],
    )
    result = hpo.run_bohb(
        objective,
        _space(cfg["space"]),
        max_evaluations=cfg["max_evaluations"],
        seed=seed,
        R=cfg["R"],
        eta=cfg["eta"],
        settings=settings,
        history=history,
        log=log,
    )
    finalists = hpo.finalists(result, cfg["n_finalists"])
    atomic_write_text(stage / "finalists.json", _dump({"finalists": finalists}))
    return cfg, [Path(args.prepared) / "manifest.csv", Path(args.split)]


TRAIN_DEFAULTS = {"models": [], "max_epochs": 27, "batch_size": 16}
MODEL_KEYS = ("n_blocks", "channels", "n_dense", "lam", "lr")


def _model_configs(args, cfg) -> list[dict]:
    configs = list(cfg["models"])
    if args.finalists:
        data = json.loads(Path(args.finalists).read_text(encoding="utf-8"))
        configs += [f["config"] for f in data["finalists"]]
    if not configs:
        raise CliError("train needs model configs (config 'models' or --finalists)")
    for c in configs:
        missing = [k for k in MODEL_KEYS if k not in c]
        if missing:
            raise CliError(f"model config {c} lacks {', '.join(missing)}")
    return configs


def cmd_train(args, stage: Path) -> tuple[dict, list]:
    seed = _require_seed(args)
    _require(args, "prepared", "split")
    cfg = load_config(args.config, TRAIN_DEFAULTS)
    configs = _model_configs(args, cfg)
    corpus, clips = load_prepared(Path(args.prepared))
    _, folds = _load_split(Path(args.split), corpus)
    feats = _features(clips, [e for f in folds.folds for e in f])
    log = JsonlLog(stage / "train_log.jsonl")
    trained = []
    for ci, c in enumerate(configs):
        mc = ModelConfig(c["n_blocks"], c["channels"], c["n_dense"])
        tc = TrainConfig(c["lam"], c["lr"], cfg["batch_size"], cfg["max_epochs"], seed)
        for k in range(folds.k):

            def record(r, ci=ci):
                log({"config": ci, **r})

            ck = train_on_fold(folds, k, mc, tc, feats, record)
            trained.append((k, -ck.val_uar, ci, ck, c))
    trained.sort(key=lambda t: t[:3])
    (stage / "models").mkdir()
    rows = []
    for i, (k, _, ci, ck, c) in enumerate(trained, start=1):
        name = f"model_{i:02d}.ckpt"
        ck.save(stage / "models" / name)
        rows.append(
            {
                "model_id": i,
                "checkpoint": f"models/{name}",
                "config": {key: c[key] for key in MODEL_KEYS},
                "fold": k + 1,
                "val_uar": ck.val_uar,
                "epoch": ck.epoch,
            }
        )
    atomic_write_text(stage / "models.json", _dump({"models": rows}))
    inputs = [Path(args.prepared) / "manifest.csv", Path(args.split)]
    if args.finalists:
        inputs.append(Path(args.finalists))
    return {**cfg, "models": configs}, inputs


def _predictions_from_models(args) -> dict:
    corpus, clips = load_prepared(Path(args.prepared))
    split, _ = _load_split(Path(args.split), corpus)
    models_dir = Path(args.models)
    try:
        rows = json.loads((models_dir / "models.json").read_text(encoding="utf-8"))["models"]
    except FileNotFoundError:
        raise CliError(f"{models_dir} has no models.json") from None
    test = list(split.test)
    bundles = [build_input_bundle(clips[e.path]) for e in test]
    out = []
    for r in rows:
        ck = Checkpoint.load(models_dir / r["checkpoint"])
        p = predict_batch(ck.model(), bundles)
        out.append({**r, "probabilities": p})
    return {
        "entry_ids": [e.path for e in test],
        "labels": [e.label for e in test],
        "modalities": [e.modality for e in test],
        "models": out,
    }


def _read_predictions(path) -> dict:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise CliError(f"predictions file not found: {path}") from None


def _pool(preds: dict) -> list[ens.PredictionSet]:
    ids = tuple(preds["entry_ids"])
    # probabilities that saturate in float64 are pulled just inside (0, 1)
    eps = np.finfo(float).eps
    return [
        ens.PredictionSet(
            int(m["model_id"]),
            int(m["fold"]),
            float(m["val_uar"]),
            tuple(float(np.clip(p, eps, 1 - eps)) for p in m["probabilities"]),
            ids,
        )
        for m in preds["models"]
    ]


def cmd_ensemble(args, stage: Path) -> tuple[dict, list]:
    if args.predictions:
        preds = _read_predictions(args.predictions)
        inputs = [Path(args.predictions)]
    else:
        _require(args, "prepared", "split", "models")
        preds = _predictions_from_models(args)
        inputs = [Path(args.prepared) / "manifest.csv", Path(args.split), Path(args.models)]
    atomic_write_text(stage / "predictions.json", _dump(preds))
    pool = _pool(preds)
    strategies = [args.strategy] if args.strategy else list(ens.STRATEGIES)
    for s in strategies:
        report = ens.build_report(pool, preds["labels"], s, greedy=args.greedy)
        ens.write_report(stage / f"ensemble_{s}.json", report)
        logger.info("%s: members %s", s, report.members)
    return {"strategies": strategies, "greedy": args.greedy}, inputs


def _bundle_json(labels, probs, modalities, by_modality: bool) -> dict:
    out = {"test": metric_bundle(labels, probs).as_percent()}
    if by_modality:
        mods = metrics_by_modality(labels, probs, modalities)
        out["by_modality"] = {k: (v if isinstance(v, dict) else v.as_percent()) for k, v in mods.items()}
    return out


def cmd_evaluate(args, stage: Path) -> tuple[dict, list]:
    _require(args, "predictions")
    preds = _read_predictions(args.predictions)
    y, mods = preds["labels"], preds["modalities"]
    models = []
    for m in preds["models"]:
        row = {k: m[k] for k in ("model_id", "fold", "val_uar") if k in m}
        row["val_uar"] = round_half_up(100 * m["val_uar"], 1)
        row["config"] = m.get("config", {})
        row.update(_bundle_json(y, m["probabilities"], mods, args.by_modality))
        models.append(row)
    ensembles = []
    inputs = [Path(args.predictions)]
    if args.ensembles:
        for s in ens.STRATEGIES:
            path = Path(args.ensembles) / f"ensemble_{s}.json"
            if not path.exists():
                continue
            rep = json.loads(path.read_text(encoding="utf-8"))
            row = {"strategy": s, "members": rep["members"], "oracle": rep["oracle"]}
            row.update(_bundle_json(y, rep["probabilities"], mods, args.by_modality))
            ensembles.append(row)
            inputs.append(path)
    atomic_write_text(stage / "evaluation.json", _dump({"models": models, "ensembles": ensembles}))
    return {"by_modality": args.by_modality}, inputs


# ------------------------------------------------------------------ report


def _fmt(v) -> str:
    return "-" if v is None else f"{round_half_up(v, 1):.1f}"


def mean_std(values) -> tuple[float, float]:
    """Mean and population standard deviation."""
    a = np.asarray(values, dtype=np.float64)
    return float(a.mean()), float(a.std())


def _pm(values) -> str:
    if not values:
        return "n/a"
    m, s = mean_std(values)
    return f"{_fmt(m)} ± {_fmt(s)}"


def group_label(ids) -> str:
    ids = sorted(ids)
    if len(ids) >= 3 and ids == list(range(ids[0], ids[-1] + 1)):
        return f"{ids[0]}-{ids[-1]}"
    return ",".join(str(i) for i in ids)


METRIC_KEYS = ("uar", "auc", "acc", "acc_pos", "acc_neg")


def render_report(evaluation: dict, baseline: dict | None = None) -> str:
    """Text tables: per-model and ensemble results, mean ± std summaries, modality UARs."""
    lines = []
    head = f"{'':>50}  {'Valid.':>6}  {'UAR':>5}  {'AUC':>5}  {'ACC':>5}  {'ACC+':>5}  {'ACC-':>5}"
    rule = "-" * len(head)

    def metrics(bundle):
        return "  ".join(f"{_fmt(bundle[k]):>5}" for k in METRIC_KEYS)

    lines += ["Results (percent)", rule, head, rule]
    if baseline is not None:
        lines.append(f"{'Baseline (functionals + PCA + linear SVM)':<50}  {'-':>6}  {metrics(baseline['metrics'])}")
        lines.append(rule)
    lines.append(f"{'index':>5}  {'N':>2}  {'C':>4}  {'F':>2}  {'λ':>6}  {'α':>8}  {'Fold':>4}")
    models = sorted(evaluation["models"], key=lambda m: m["model_id"])
    prev_fold = None
    for m in models:
        if prev_fold is not None and m["fold"] != prev_fold:
            lines.append("")
        prev_fold = m["fold"]
        c = m.get("config", {})
        desc = (
            f"{m['model_id']:>5}  {c.get('n_blocks', '-'):>2}  {c.get('channels', '-'):>4}  {c.get('n_dense', '-'):>2}  "
            f"{c.get('lam', 0):>6.3f}  {c.get('lr', 0):>8.1e}  {m['fold']:>4}"
        )
        lines.append(f"{desc:<50}  {_fmt(m['val_uar']):>6}  {metrics(m['test'])}")
    ensembles = evaluation.get("ensembles", [])
    if ensembles:
        lines += [rule, f"{'Ensemble description':<30}{'Ensembled group':<20}"]
        for e in ensembles:
            title = STRATEGY_TITLES[e["strategy"]] + (" *" if e.get("oracle") else "")
            lines.append(f"{title:<30}{group_label(e['members']):<20}  {'-':>6}  {metrics(e['test'])}")
        if any(e.get("oracle") for e in ensembles):
            lines.append(f"* {ens.ORACLE_TAG}")
    lines += [rule, ""]

    lines += ["Summary (mean ± std, percent)", f"{'':<24}  {'UAR':>12}  {'AUC':>12}"]
    for fold in sorted({m["fold"] for m in models}):
        group = [m["test"] for m in models if m["fold"] == fold]
        lines.append(
            f"{f'Fold {fold} models':<24}  {_pm([g['uar'] for g in group]):>12}  {_pm([g['auc'] for g in group]):>12}"
        )
    if ensembles:
        lines.append(
            f"{'Ensembled models':<24}  {_pm([e['test']['uar'] for e in ensembles]):>12}  "
            f"{_pm([e['test']['auc'] for e in ensembles]):>12}"
        )
    lines.append("")

    if ensembles and all("by_modality" in e for e in ensembles):
        lines += ["Modality UAR (percent)", f"{'Ensemble':<24}  {'breath UAR':>12}  {'cough UAR':>12}"]
        cols = {"breath": [], "cough": []}
        for e in ensembles:
            cells = []
            for mod in ("breath", "cough"):
                b = e["by_modality"][mod]
                if "undefined" in b:
                    cells.append("n/a")
                else:
                    cols[mod].append(b["uar"])
                    cells.append(_fmt(b["uar"]))
            lines.append(f"{group_label(e['members']):<24}  {cells[0]:>12}  {cells[1]:>12}")
        lines.append(f"{'Ensembles mean ± std':<24}  {_pm(cols['breath']):>12}  {_pm(cols['cough']):>12}")
        lines.append("")
    return "\n".join(line.rstrip() for line in lines)


def cmd_report(args, stage: Path) -> tuple[dict, list]:
    _require(args, "evaluation")
    evaluation = json.loads(Path(args.evaluation).read_text(encoding="utf-8"))
    baseline = json.loads(Path(args.baseline).read_text(encoding="utf-8")) if args.baseline else None
    atomic_write_text(stage / "report.txt", render_report(evaluation, baseline))
    inputs = [Path(args.evaluation)] + ([Path(args.baseline)] if args.baseline else [])
    return {}, inputs


COMMANDS = {
    "synth": cmd_synth,
    "prepare": cmd_prepare,
    "split": cmd_split,
    "baseline": cmd_baseline,
    "tune": cmd_tune,
    "train": cmd_train,
    "ensemble": cmd_ensemble,
    "evaluate": cmd_evaluate,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="covidnet", description="Audio COVID-19 screening toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--config", help="JSON configuration file")
        p.add_argument("--seed", type=int, help="random seed (unsigned 64-bit)")
        if name == "prepare":
            p.add_argument("--manifest", help="manifest CSV")
            p.add_argument("--root", help="directory that manifest paths are relative to")
        if name in ("split", "baseline", "tune", "train", "ensemble"):
            p.add_argument("--prepared", help="output directory of 'prepare'")
        if name in ("baseline", "tune", "train", "ensemble"):
            p.add_argument("--split", help="output directory of 'split'")
        if name == "tune":
            p.add_argument("--resume", action="store_true", help="replay the observation log already in --out")
        if name == "train":
            p.add_argument("--finalists", help="finalists.json written by 'tune'")
        if name == "ensemble":
            p.add_argument("--models", help="output directory of 'train'")
            p.add_argument("--strategy", choices=ens.STRATEGIES)
            p.add_argument("--greedy", action="store_true", help="greedy forward subset selection")
        if name in ("ensemble", "evaluate"):
            p.add_argument("--predictions", help="predictions.json written by 'ensemble'")
        if name == "evaluate":
            p.add_argument("--ensembles", help="directory holding ensemble_<strategy>.json reports")
            p.add_argument("--by-modality", action="store_true")
        if name == "report":
            p.add_argument("--evaluation", help="evaluation.json written by 'evaluate'")
            p.add_argument("--baseline", help="baseline.json written by 'baseline'")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    out = Path(args.out)
    started = _timestamp()
    try:
        with staged_output(out) as stage:
            config, inputs = COMMANDS[args.command](args, stage)
            write_run_manifest(stage, out, args, config, inputs, started)
    except (CliError, ManifestError, SplitError, TrainingError, UndefinedMetricError, ens.EnsembleError, ValueError, OSError) as exc:
        print(f"covidnet {args.command}: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
