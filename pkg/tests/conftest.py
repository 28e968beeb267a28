import json
from pathlib import Path

import numpy as np
import pytest

# (index, N, C, F, lambda, alpha, fold, valid, UAR, AUC, ACC, ACC+, ACC-)
PUBLISHED_MODELS = [
    (1, 5, 77, 2, 1.582, 4.8e-5, 1, 65.8, 71.4, 76.0, 72.6, 68.1, 74.8),
    (2, 2, 308, 2, 2.093, 5.9e-6, 1, 61.4, 66.0, 74.8, 59.4, 85.3, 46.6),
    (3, 2, 235, 2, 1.805, 2.6e-5, 1, 60.7, 64.6, 72.8, 62.3, 71.6, 57.7),
    (4, 3, 466, 2, 1.859, 7.1e-6, 1, 60.6, 63.4, 71.1, 59.7, 74.1, 52.6),
    (5, 4, 73, 2, 1.917, 9.7e-6, 2, 63.8, 53.4, 59.6, 52.3, 56.9, 50.0),
    (6, 5, 151, 1, 2.176, 1.8e-6, 2, 62.1, 57.7, 73.1, 44.9, 95.7, 19.7),
    (7, 3, 486, 1, 1.678, 8.8e-6, 2, 61.4, 60.5, 65.3, 58.6, 66.4, 54.7),
    (8, 5, 435, 1, 1.351, 3.7e-5, 2, 59.9, 69.1, 72.9, 68.3, 71.6, 66.7),
    (9, 4, 445, 2, 0.748, 2.3e-5, 3, 63.2, 58.5, 64.8, 50.9, 81.0, 35.9),
    (10, 2, 215, 2, 1.218, 7.3e-6, 3, 63.2, 52.4, 60.4, 52.3, 52.6, 52.1),
    (11, 3, 486, 1, 0.882, 4.3e-6, 3, 61.3, 52.9, 59.3, 61.4, 27.6, 78.2),
    (12, 6, 424, 1, 1.328, 2.3e-5, 3, 60.6, 70.4, 74.8, 68.9, 75.0, 65.8),
]
# (strategy, members, UAR, AUC, ACC, ACC+, ACC-, breath UAR, cough UAR)
PUBLISHED_ENSEMBLES = [
    ("best-uar", [1, 2, 6, 7, 8, 11], 74.9, 80.5, 73.1, 80.2, 69.7, 76.1, 73.7),
    ("best-auc", [1, 2, 6, 7, 8, 11, 12], 74.5, 80.7, 72.9, 79.3, 69.7, 75.7, 73.3),
    ("best-per-fold", [1, 5, 9], 70.8, 77.3, 68.3, 78.4, 63.2, 71.0, 70.7),
    ("all", list(range(1, 13)), 70.2, 77.6, 67.7, 77.6, 62.8, 71.4, 69.0),
]
PUBLISHED_BASELINE = (59.3, 61.0, 56.6, 67.2, 51.3)

KEYS = ("uar", "auc", "acc", "acc_pos", "acc_neg")

# (condition, platform, has_cough_symptom, files)
CLIP_COUNTS = [
    ("Asthma", "Android", True, 26),
    ("Asthma", "Web", True, 16),
    ("COVID", "Android", False, 128),
    ("COVID", "Android", True, 92),
    ("COVID", "Web", False, 46),
    ("COVID", "Web", True, 16),
    ("Healthy", "Android", False, 282),
    ("Healthy", "Android", True, 16),
    ("Healthy", "Web", False, 362),
    ("Healthy", "Web", True, 50),
]


def clip_count_manifest() -> str:
    """One row per file; consecutive files of a row pair up as one subject's breath and cough."""
    lines = ["path,subject_id,condition,has_cough_symptom,platform,modality,augmented"]
    for r, (condition, platform, symptom, n) in enumerate(CLIP_COUNTS):
        for i in range(n):
            modality = ("breath", "cough")[i % 2]
            lines.append(f"r{r}/{i}.wav,r{r}s{i // 2},{condition},{str(symptom).lower()},{platform},{modality},false")
    # augmented copies are kept in the manifest but flagged
    lines.append("aug/0.wav,r2s0,COVID,false,Android,breath,true")
    return "\n".join(lines) + "\n"


@pytest.fixture
def published_evaluation():
    """Stored metric bundles shaped like the output of ``covidnet evaluate``."""
    models = []
    for idx, n, c, f, lam, lr, fold, val, *metrics in PUBLISHED_MODELS:
        models.append(
            {
                "model_id": idx,
                "config": {"n_blocks": n, "channels": c, "n_dense": f, "lam": lam, "lr": lr},
                "fold": fold,
                "val_uar": val,
                "test": dict(zip(KEYS, metrics), n=350),
            }
        )
    ensembles = []
    for strategy, members, *rest in PUBLISHED_ENSEMBLES:
        metrics, (breath, cough) = rest[:5], rest[5:]
        ensembles.append(
            {
                "strategy": strategy,
                "members": members,
                "oracle": strategy in ("best-uar", "best-auc"),
                "test": dict(zip(KEYS, metrics), n=350),
                "by_modality": {
                    "breath": {"uar": breath},
                    "cough": {"uar": cough},
                },
            }
        )
    return {"models": models, "ensembles": ensembles}


@pytest.fixture
def published_baseline():
    return {"complexity": 1e-5, "metrics": dict(zip(KEYS, PUBLISHED_BASELINE), n=350)}


@pytest.fixture
def published_predictions():
    """Twelve models with the table's validation UARs and random test probabilities."""
    rng = np.random.default_rng(0)
    n = 40
    labels = [int(v) for v in rng.integers(0, 2, n)]
    labels[:2] = [0, 1]
    models = []
    for idx, n_, c, f, lam, lr, fold, val, *_ in PUBLISHED_MODELS:
        models.append(
            {
                "model_id": idx,
                "fold": fold,
                "val_uar": val / 100.0,
                "config": {"n_blocks": n_, "channels": c, "n_dense": f, "lam": lam, "lr": lr},
                "probabilities": [float(v) for v in rng.uniform(0.02, 0.98, n)],
            }
        )
    return {
        "entry_ids": [f"audio/e{i:03d}.wav" for i in range(n)],
        "labels": labels,
        "modalities": ["breath" if i % 2 else "cough" for i in range(n)],
        "models": models,
    }


@pytest.fixture
def write_json(tmp_path):
    def _write(name, obj):
        path = Path(tmp_path) / name
        path.write_text(json.dumps(obj))
        return path

    return _write


# one summary line per acceptance criterion, taken from the real test outcome
_criteria: dict[int, tuple[str, list[str], list[str]]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or not (report.when == "call" or report.failed or report.skipped):
        return
    number, title = mark.args
    _, outcomes, notes = _criteria.setdefault(number, (title, [], []))
    outcomes.append(report.outcome)
    notes.extend(getattr(item, "criterion_notes", []))


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        title, outcomes, notes = _criteria[number]
        if "failed" in outcomes:
            verdict = "FAIL"
        elif all(o == "skipped" for o in outcomes):
            verdict = "SKIP"
        else:
            verdict = "PASS"
        line = f"criterion {number:2d}: {verdict}  {title}"
        if notes:
            line += "  [" + "; ".join(notes) + "]"
        terminalreporter.write_line(line)
