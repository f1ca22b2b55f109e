
import numpy as np
import pytest

from diffreg.baseline import RidgeModel, fit_ridge_baseline
from diffreg.dar import DarConfig, init_params
from diffreg.dataset import SynthConfig, generate_synthetic, subject_exclusive_split
from diffreg.error_model import fit_error_kde
from diffreg.errors import CheckpointError
from diffreg.pipeline import (
    Pipeline,
    dumps_model,
    load_checkpoint,
    loads_model,
    predict,
    refine,
    refine_iteration,
    save_checkpoint,
)
from diffreg.retrieval import RetrievalConfig, build_reference_index
from diffreg.training import TrainConfig

from conftest import make_dataset


@pytest.fixture(scope="module")
def parts():
    ds = generate_synthetic(SynthConfig(num_subjects=60, samples_per_subject=3, feature_dim=8,
                                        label_range=(20, 50), seed=11))
    return subject_exclusive_split(ds, 0.7, 0.1, seed=11)


def dar_cfg(ds):
    return DarConfig(ds.feature_dim, ds.label_min, ds.label_max, embed_dim=4, hidden=(16, 8), C=10, dropout=0.1)


def zero_output_pipeline(train, bar):
    cfg = dar_cfg(train)
    p = init_params(cfg, np.random.default_rng(0))
    # zero class logits on a symmetric class set and zero corrections: d_r == 0
    for name in ("class_head", "heads"):
        p.arrays[f"{name}.weight"][:] = 0.0
        p.arrays[f"{name}.bias"][:] = 0.0
    err = fit_error_kde([0.0, 1.0, -1.0])
    return Pipeline(bar, err, build_reference_index(train, "train"), p, RetrievalConfig(P=10, R=3))


class CountingModel:
    """Error-model wrapper counting draws."""

    def __init__(self, inner):
        self.inner = inner
        self.calls = 0

    def sample(self, rng):
        self.calls += 1
        return self.inner.sample(rng)


class RecordingBaseline:
    def __init__(self, inner):
        self.inner = inner
        self.feature_dim = inner.feature_dim
        self.seen = []

    def predict(self, x):
        self.seen.append(np.array(x, copy=True))
        return self.inner.predict(x)


@pytest.fixture(scope="module")
def trained(parts):
    train, dist, _ = parts
    bar = fit_ridge_baseline(train)
    return refine(train, dist, bar, dar_cfg(train), iterations=2, train_cfg=TrainConfig(epochs=2, lr=1e-3),
                  retrieval_cfg=RetrievalConfig(P=10, R=3), seed=3)


class TestPredict:
    def test_zero_differential_returns_baseline(self, parts):
        train, _, test = parts
        bar = fit_ridge_baseline(train)
        p = zero_output_pipeline(train, bar)
        np.testing.assert_array_equal(p.predict(test.features), bar.predict(test.features))

    def test_details(self, parts, trained):
        _, _, test = parts
        out = predict(trained[0], test.features[0])
        assert out.initial == trained[0].baseline.predict(test.features[0])
        assert len(out.differentials) == len(out.ref_weights) == len(out.references) == 3
        assert sum(out.ref_weights) == pytest.approx(1.0, abs=1e-12)
        assert out.estimate == pytest.approx(out.initial + np.dot(out.ref_weights, out.differentials), abs=1e-12)
        assert not out.fallback

    def test_repeatable_and_batch_consistent(self, parts, trained):
        _, _, test = parts
        p = trained[-1]
        a = p.predict(test.features)
        np.testing.assert_array_equal(a, p.predict(test.features))
        assert p.predict(test.features[4]) == a[4]

    def test_never_samples_errors(self, parts, trained):
        _, _, test = parts
        p = trained[0]
        counting = CountingModel(p.err)
        q = Pipeline(p.baseline, counting, p.index, p.dar, p.retrieval, p.iteration)
        q.predict(test.features)
        assert counting.calls == 0

    def test_estimate_beyond_range_clamps_retrieval(self, parts):
        train, _, _ = parts
        bar = RidgeModel(np.zeros(train.feature_dim), 500.0)
        p = zero_output_pipeline(train, bar)
        out = p.explain(train.features[0])
        ages = {round(s.label) for s in train.samples if s.sample_id in out.references}
        assert max(ages) >= train.label_max - p.retrieval.max_widen

    def test_retrieval_failure_falls_back(self):
        train = make_dataset([20.0, 21.0, 60.0], np.arange(3.0)[:, None], subjects=["a", "b", "c"],
                             label_min=20, label_max=60)
        bar = RidgeModel(np.zeros(1), 40.0)
        cfg = DarConfig(1, 20, 60, 2, (4,), C=3, dropout=0.0)
        p = Pipeline(bar, fit_error_kde([0.0]), build_reference_index(train), init_params(cfg, np.random.default_rng(0)),
                     RetrievalConfig(P=5, R=2, max_widen=3))
        with pytest.warns(RuntimeWarning, match="falling back"):
            out = p.explain(np.array([0.5]))
        assert out.fallback and out.estimate == out.initial == 40.0


class TestRefine:
    def test_default_iterations_and_tags(self, trained):
        assert [p.iteration for p in trained] == [1, 2]
        assert trained[1].baseline is trained[0]

    def test_zero_dar_refinement_matches_baseline(self, parts, trained):
        train, _, test = parts
        inner = trained[0]
        p = zero_output_pipeline(train, inner)
        np.testing.assert_array_equal(p.predict(test.features), inner.predict(test.features))

    def test_error_model_fit_on_previous_stage(self, parts, trained):
        train, dist, _ = parts
        rec = RecordingBaseline(trained[0])
        nxt = refine_iteration(train, dist, rec, dar_cfg(train), TrainConfig(epochs=1),
                               RetrievalConfig(P=10, R=3), seed=0)
        np.testing.assert_array_equal(rec.seen[0], dist.features)
        residuals = trained[0].predict(dist.features) - dist.labels
        expected = np.sort(residuals[np.abs(residuals) <= 20])
        np.testing.assert_array_equal(np.sort(nxt.err.residuals), expected)

    def test_uniform_ablation(self, parts):
        train, dist, _ = parts
        p = refine_iteration(train, dist, fit_ridge_baseline(train), dar_cfg(train), TrainConfig(epochs=1),
                             RetrievalConfig(P=10, R=3), error_dist="uniform")
        assert p.err.kind == "uniform"


class TestCheckpoint:
    def test_round_trip_bit_identical(self, parts, trained, tmp_path):
        _, _, test = parts
        p = trained[-1]
        save_checkpoint(p, tmp_path / "m.json")
        back = load_checkpoint(tmp_path / "m.json")
        np.testing.assert_array_equal(back.predict(test.features), p.predict(test.features))
        assert dumps_model(back) == dumps_model(p)
        assert back.iteration == 2

    def test_baseline_file(self, tmp_path):
        m = RidgeModel(np.array([0.1, 0.2]), 3.0, 1.0)
        save_checkpoint(m, tmp_path / "b.json")
        back = load_checkpoint(tmp_path / "b.json")
        np.testing.assert_array_equal(back.weights, m.weights)

    def test_corrupted_shape_names_parameter(self, trained):
        text = dumps_model(trained[0])
        import json
        doc = json.loads(text)
        doc["dar_params"]["backbone.1.weight"]["shape"] = [3, 3]
        with pytest.raises(CheckpointError, match="backbone.1.weight"):
            loads_model(json.dumps(doc))

    def test_version_mismatch(self, trained):
        text = dumps_model(trained[0]).replace("diffreg-checkpoint-v1", "diffreg-checkpoint-v9")
        with pytest.raises(CheckpointError, match="format"):
            loads_model(text)

    def test_truncation(self, trained):
        with pytest.raises(CheckpointError, match="truncated"):
            loads_model(dumps_model(trained[0])[:-100])

    def test_missing_field(self, trained):
        import json
        doc = json.loads(dumps_model(trained[0]))
        del doc["error_model"]
        with pytest.raises(CheckpointError, match="error_model"):
            loads_model(json.dumps(doc))
