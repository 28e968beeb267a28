import numpy as np
import pytest
from sklearn.base import clone

from covidnet.corpus import Corpus, ManifestEntry
from covidnet.dsp import build_input_bundle
from covidnet.metrics import uar
from covidnet.model import ModelConfig, build_model, predict_batch
from covidnet.splits import FoldPlan
from covidnet.trainer import (
    Checkpoint,
    CovidNetClassifier,
    JsonlLog,
    TrainConfig,
    TrainingError,
    TrainingRun,
    accumulate_batch_gradient,
    evaluate,
    fold_data,
    make_batches,
    train_on_fold,
)

SMALL = ModelConfig(n_blocks=2, channels=64, n_dense=1)


def tone_clip(rng, positive, n):
    t = np.arange(n) / 8000
    x = 0.3 * rng.standard_normal(n)
    if positive:
        x = x + 0.3 * np.sin(2 * np.pi * 400 * t)
    return np.clip(x, -1, 1)


@pytest.fixture(scope="module")
def toy():
    """24 subjects with one short clip each, 8 positive, as three folds plus features."""
    rng = np.random.default_rng(0)
    entries, features = [], {}
    for s in range(24):
        e = ManifestEntry(f"c{s}.wav", f"s{s}", "COVID" if s % 3 == 0 else "Healthy", False, "Web", ("breath", "cough")[s % 2])
        entries.append(e)
        features[e.path] = build_input_bundle(tone_clip(rng, e.label, int(rng.integers(300, 700))))
    folds = (tuple(entries[0:8]), tuple(entries[8:16]), tuple(entries[16:24]))
    return Corpus(tuple(entries)), FoldPlan(folds, ()), features


def quick(lr=1e-3, epochs=2, seed=0, batch_size=4):
    return TrainConfig(lam=1.5, lr=lr, batch_size=batch_size, max_epochs=epochs, seed=seed)


class TestBatches:
    def test_padding_and_lengths(self):
        rng = np.random.default_rng(1)
        bundles = [build_input_bundle(rng.uniform(-1, 1, n)) for n in (800, 1000)]
        (batch,) = make_batches(bundles, [0, 1], batch_size=16)
        assert batch.raw.shape == (2, 1000, 1)
        assert list(batch.lengths["raw"]) == [800, 1000]
        assert list(batch.lengths["group64"]) == [13, 16]
        assert not batch.group64[0, 13:].any()

    def test_shuffle_covers_everything(self):
        bundles = [build_input_bundle(np.full(100 + i, 0.1)) for i in range(37)]
        batches = make_batches(bundles, np.arange(37) % 2, batch_size=16, rng=np.random.default_rng(2))
        assert [len(b) for b in batches] == [16, 16, 5]
        assert sorted(np.concatenate([b.indices for b in batches])) == list(range(37))

    def test_empty(self):
        with pytest.raises(ValueError):
            make_batches([], [])

    def test_chunked_gradient_equals_full_batch(self):
        rng = np.random.default_rng(3)
        bundles = [build_input_bundle(rng.uniform(-0.5, 0.5, n)) for n in (300, 500, 410, 700, 256)]
        labels = [1, 0, 0, 1, 0]
        # without dropout the chunking is the only difference between the two passes
        model = build_model(ModelConfig(2, 64, 1, dropout=0.0), seed=1)
        model.params["head.dense0.w"].data = rng.normal(scale=0.01, size=(384, 1))

        def grads(max_frames):
            model.zero_grad()
            loss = accumulate_batch_gradient(model, bundles, labels, 1.5, None, max_frames)
            return loss, {k: p.grad.copy() for k, p in model.params.items()}

        full_loss, full = grads(10**9)
        part_loss, parts = grads(800)
        assert abs(full_loss - part_loss) < 1e-12
        for k in full:
            np.testing.assert_allclose(parts[k], full[k], rtol=1e-9, atol=1e-14)


class TestTrainOnFold:
    def test_one_epoch(self, toy):
        _, folds, feats = toy
        ckpt = train_on_fold(folds, 0, SMALL, quick(epochs=1), feats)
        assert ckpt.epoch == 1
        assert ckpt.fold == 0
        assert 0 <= ckpt.val_uar <= 1

    def test_zero_learning_rate(self, toy):
        _, folds, feats = toy
        ckpt = train_on_fold(folds, 1, SMALL, quick(lr=0.0, epochs=2), feats)
        initial = build_model(SMALL, seed=0).arrays()
        for k, v in ckpt.params.items():
            assert v.tobytes() == initial[k].tobytes()
        hold = folds.holdout(1)
        untrained = uar([e.label for e in hold], predict_batch(build_model(SMALL, 0), [feats[e.path] for e in hold]))
        assert ckpt.val_uar == untrained

    def test_bit_reproducible(self, toy):
        _, folds, feats = toy
        a = train_on_fold(folds, 2, SMALL, quick(epochs=2, seed=5), feats)
        b = train_on_fold(folds, 2, SMALL, quick(epochs=2, seed=5), feats)
        assert all(a.params[k].tobytes() == b.params[k].tobytes() for k in a.params)
        assert (a.epoch, a.val_uar) == (b.epoch, b.val_uar)

    def test_nested_budgets(self, toy):
        _, folds, feats = toy
        scores = [train_on_fold(folds, 0, SMALL, quick(epochs=e, seed=3), feats).val_uar for e in (1, 2, 3)]
        assert scores == sorted(scores)

    def test_resume_matches_single_run(self, toy):
        _, folds, feats = toy
        train, val = fold_data(folds, 0, feats)
        run = TrainingRun.start(SMALL, quick(epochs=3, seed=4), fold=0)
        run.run_until(1, train, val)
        resumed = run.run_until(3, train, val)
        direct = train_on_fold(folds, 0, SMALL, quick(epochs=3, seed=4), feats)
        assert all(resumed.params[k].tobytes() == direct.params[k].tobytes() for k in direct.params)

    def test_log_records(self, toy, tmp_path):
        _, folds, feats = toy
        log = JsonlLog(tmp_path / "log.jsonl")
        train_on_fold(folds, 0, SMALL, quick(epochs=2), feats, log=log)
        lines = (tmp_path / "log.jsonl").read_text().splitlines()
        assert len(lines) == 2
        assert '"holdout_uar"' in lines[0] and '"train_loss"' in lines[0]

    def test_bad_holdout(self, toy):
        _, folds, feats = toy
        with pytest.raises(ValueError):
            train_on_fold(folds, 3, SMALL, quick(), feats)

    def test_divergence_is_reported(self, toy):
        corpus, folds, feats = toy
        broken = dict(feats)
        e = folds.folds[1][0]
        b = feats[e.path]
        broken[e.path] = type(b)(raw=b.raw * np.nan, group64=b.group64, group128=b.group128)
        with pytest.raises(TrainingError):
            train_on_fold(folds, 0, SMALL, quick(epochs=1), broken)


def separator_model():
    """A hand-set network whose logit grows with the raw clip's mean level."""
    model = build_model(SMALL, seed=0)
    for p in model.params.values():
        p.data = np.zeros_like(p.data)
    model.params["raw.conv0.w"].data[1, 0, 0] = 1.0
    model.params["raw.conv1.w"].data[1, 0, 0] = 1.0
    model.params["head.dense0.w"].data[0, 0] = 10.0
    model.params["head.dense0.b"].data[0] = -5.0
    return model


class TestEvaluate:
    def test_perfect_separator(self):
        bundles = [build_input_bundle(np.full(n, level)) for n, level in ((300, 1.0), (500, 0.1), (200, 0.9), (400, 0.0))]
        probs, bundle = evaluate(separator_model(), bundles, [1, 0, 1, 0])
        assert bundle.uar == 1.0 and bundle.acc == 1.0
        assert probs[0] > 0.5 > probs[1]

    def test_constant_half(self):
        model = build_model(SMALL, seed=0)
        bundles = [build_input_bundle(np.full(200, v)) for v in (0.1, 0.2, 0.3, 0.4)]
        probs, bundle = evaluate(model, bundles, [1, 0, 1, 0])
        assert probs == [0.5] * 4
        assert bundle.auc == 0.5

    def test_empty(self):
        with pytest.raises(ValueError):
            evaluate(build_model(SMALL), [], [])

    def test_checkpoint_round_trip(self, tmp_path):
        model = separator_model()
        ckpt = Checkpoint(model.arrays(), SMALL, quick(), fold=2, epoch=7, val_uar=0.75)
        ckpt.save(tmp_path / "m.ckpt")
        back = Checkpoint.load(tmp_path / "m.ckpt")
        assert (back.fold, back.epoch, back.val_uar) == (2, 7, 0.75)
        assert back.model_config == SMALL and back.train_config == quick()
        bundles = [build_input_bundle(np.full(300, 0.7)), build_input_bundle(np.full(200, 0.2))]
        assert evaluate(back, bundles, [1, 0])[0] == evaluate(model, bundles, [1, 0])[0]

    def test_checkpoint_uar_range(self):
        with pytest.raises(ValueError):
            Checkpoint({}, SMALL, quick(), None, 1, 1.5)


class TestConfig:
    @pytest.mark.parametrize("kw", [dict(lam=0), dict(lr=-1), dict(batch_size=0), dict(max_epochs=0)])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            TrainConfig(**kw)


class TestClassifier:
    def test_sklearn_contract(self, toy):
        corpus, folds, feats = toy
        X = [feats[e.path] for e in corpus]
        y = [e.label for e in corpus]
        est = CovidNetClassifier(n_blocks=2, lr=1e-3, batch_size=8, max_epochs=1, seed=1)
        assert clone(est).get_params() == est.get_params()
        est.fit(X[:16], y[:16], eval_set=(X[16:], y[16:]))
        proba = est.predict_proba(X[16:])
        assert proba.shape == (8, 2)
        np.testing.assert_allclose(proba.sum(axis=1), 1.0)
        assert set(est.predict(X[16:])) <= {0, 1}
        assert est.best_epoch_ == 1
        assert 0 <= est.score(X[16:], y[16:]) <= 1

    def test_unfitted(self):
        from sklearn.exceptions import NotFittedError

        with pytest.raises(NotFittedError):
            CovidNetClassifier().predict_proba([])
