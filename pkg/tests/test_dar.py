import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from diffreg.dar import (
    DarConfig,
    PairBatch,
    aggregate_refinement,
    dae_pair_forward,
    embed_label,
    forward,
    init_params,
    loss_and_gradients,
    param_shapes,
)
from diffreg.errors import AggregationError, ConfigError, InputError, NumericError
from diffreg.gradcheck import random_problem, tiny_config

CFG = DarConfig(feature_dim=5, label_min=20, label_max=40, embed_dim=3, hidden=(8, 6), C=3, dropout=0.0)


def params(cfg=CFG, seed=0):
    return init_params(cfg, np.random.default_rng(seed))


def rigged(cfg, class_logits, dc_values):
    """Parameters whose heads ignore the backbone: outputs equal the biases."""
    p = params(cfg)
    for name in ("class_head", "heads", "ref_head"):
        p.arrays[f"{name}.weight"][:] = 0.0
    p.arrays["class_head.bias"][:] = class_logits
    p.arrays["heads.bias"][:] = dc_values
    return p


def one_pair(cfg, rng):
    return (rng.normal(size=cfg.feature_dim), 30, rng.normal(size=cfg.feature_dim), 28)


class TestConfig:
    def test_defaults(self):
        cfg = DarConfig(feature_dim=4, label_min=0, label_max=10)
        assert (cfg.embed_dim, cfg.hidden, cfg.C, cfg.dropout) == (16, (2048, 1024, 512), 20, 0.2)

    def test_shapes(self):
        s = param_shapes(CFG)
        assert s["embedding"] == (21, 3)
        assert s["backbone.0.weight"] == (2 * (5 + 3), 8)
        assert s["heads.weight"] == (6, 7) and s["class_head.weight"] == (6, 7) and s["ref_head.weight"] == (6, 1)

    @pytest.mark.parametrize("kw", [{"hidden": ()}, {"C": 0}, {"dropout": 1.0}, {"embed_dim": 0}])
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            DarConfig(**{**CFG.to_dict(), **kw})

    def test_dict_round_trip(self):
        assert DarConfig.from_dict(CFG.to_dict()) == CFG


class TestEmbedding:
    def test_lowest_label_is_row_zero(self):
        p = params()
        np.testing.assert_array_equal(embed_label(p, 20), p["embedding"][0])

    def test_clamps_above_range(self):
        p = params()
        np.testing.assert_array_equal(embed_label(p, 45), embed_label(p, 40))

    def test_repeatable(self):
        p = params()
        np.testing.assert_array_equal(embed_label(p, 33), embed_label(p, 33))


class TestPairForward:
    def test_point_mass_on_class_three(self):
        cfg = DarConfig(5, 20, 40, 3, (8,), C=5, dropout=0.0)
        logits = np.full(11, -1e3)
        logits[3 + 5] = 0.0
        dc = np.zeros(11)
        dc[3 + 5] = 0.2
        out = dae_pair_forward(rigged(cfg, logits, dc), *one_pair(cfg, np.random.default_rng(0)))
        assert out.differential[0] == pytest.approx(3.2, abs=1e-12)

    def test_uniform_over_symmetric_classes(self):
        cfg = DarConfig(5, 20, 40, 3, (8,), C=1, dropout=0.0)
        out = dae_pair_forward(rigged(cfg, np.zeros(3), np.zeros(3)), *one_pair(cfg, np.random.default_rng(0)))
        assert out.differential[0] == pytest.approx(0.0, abs=1e-15)

    def test_weighted_example(self):
        cfg = DarConfig(5, 20, 40, 3, (8,), C=1, dropout=0.0)
        w = np.array([0.2, 0.5, 0.3])
        out = dae_pair_forward(rigged(cfg, np.log(w), np.array([0.1, -0.1, 0.0])),
                               *one_pair(cfg, np.random.default_rng(0)))
        np.testing.assert_allclose(out.class_probs[0], w, atol=1e-15)
        assert out.differential[0] == pytest.approx(0.07, abs=1e-12)

    def test_recomposition_identity(self):
        rng = np.random.default_rng(3)
        p = params(seed=3)
        n = 16
        batch = PairBatch(rng.normal(size=(n, 5)), rng.integers(15, 45, n), rng.normal(size=(n, 5)),
                          rng.integers(20, 41, n))
        out = forward(p, batch)
        centers = np.arange(-3, 4)
        np.testing.assert_allclose(out.class_probs.sum(axis=1), 1.0, atol=1e-12)
        assert np.all(out.class_probs >= 0)
        recomposed = (out.class_probs * (centers + out.second_order)).sum(axis=1)
        np.testing.assert_allclose(out.differential, recomposed, rtol=0, atol=1e-12)

    def test_eval_mode_deterministic(self):
        p = params()
        args = one_pair(CFG, np.random.default_rng(1))
        a, b = dae_pair_forward(p, *args), dae_pair_forward(p, *args)
        assert a.differential[0] == b.differential[0] and a.ref_logit[0] == b.ref_logit[0]

    def test_train_mode_dropout_varies(self):
        cfg = DarConfig(5, 20, 40, 3, (64, 32), C=3, dropout=0.5)
        p = params(cfg)
        args = one_pair(cfg, np.random.default_rng(1))
        a = dae_pair_forward(p, *args, train=True, rng=np.random.default_rng(0))
        b = dae_pair_forward(p, *args, train=True, rng=np.random.default_rng(1))
        assert a.differential[0] != b.differential[0]

    def test_train_mode_needs_rng(self):
        cfg = DarConfig(5, 20, 40, 3, (8,), C=3, dropout=0.5)
        with pytest.raises(ConfigError):
            dae_pair_forward(params(cfg), *one_pair(cfg, np.random.default_rng(0)), train=True)

    def test_first_order_variant_zero_corrections(self):
        cfg = DarConfig(5, 20, 40, 3, (8,), C=3, dropout=0.0, second_order=False)
        out = dae_pair_forward(params(cfg), *one_pair(cfg, np.random.default_rng(0)))
        assert np.all(out.second_order == 0)

    def test_dimension_mismatch(self):
        with pytest.raises(InputError):
            dae_pair_forward(params(), np.zeros(4), 30, np.zeros(4), 30)

    def test_nan_input_names_tensor(self):
        with pytest.raises(NumericError, match="class_head"):
            dae_pair_forward(params(), np.full(5, np.nan), 30, np.zeros(5), 30)


class TestAggregation:
    def test_cancellation(self):
        q = aggregate_refinement(30.0, [1.0, -1.0], [0.0, 0.0])
        np.testing.assert_array_equal(q.ref_weights, [0.5, 0.5])
        assert q.estimate == 30.0

    @pytest.mark.parametrize("logit", [-50.0, 0.0, 7.3])
    def test_singleton(self, logit):
        assert aggregate_refinement(30.0, [2.5], [logit]).estimate == 32.5

    def test_zero_differentials_exact(self):
        assert aggregate_refinement(31.337, np.zeros(7), np.arange(7.0)).estimate == 31.337

    @pytest.mark.parametrize("d,l", [([], []), ([1.0], [0.0, 1.0])])
    def test_bad_lengths(self, d, l):
        with pytest.raises(AggregationError):
            aggregate_refinement(30.0, d, l)

    @settings(max_examples=50, deadline=None)
    @given(st.floats(0, 100), st.lists(st.tuples(st.floats(-20, 20), st.floats(-30, 30)), min_size=1, max_size=12))
    def test_identity(self, a_hat, pairs):
        d, logits = map(np.array, zip(*pairs))
        q = aggregate_refinement(a_hat, d, logits)
        assert abs(q.ref_weights.sum() - 1.0) <= 1e-12
        assert abs((q.estimate - a_hat) - q.ref_weights @ d) <= 1e-12 * max(1.0, a_hat)


class TestBackward:
    def test_untouched_embedding_rows_are_zero(self):
        cfg = tiny_config()
        rng = np.random.default_rng(0)
        p = init_params(cfg, rng)
        batch, targets = random_problem(cfg, rng)
        _, grads, out = loss_and_gradients(p, batch, targets)
        used = set(out.cache["a_idx"]) | set(out.cache["b_idx"])
        for row in range(cfg.num_ages):
            if row not in used:
                assert np.all(grads["embedding"][row] == 0.0)
        assert any(np.any(grads["embedding"][r] != 0) for r in used)

    def test_gradient_shapes(self):
        cfg = tiny_config()
        rng = np.random.default_rng(1)
        p = init_params(cfg, rng)
        _, grads, _ = loss_and_gradients(p, *random_problem(cfg, rng))
        assert {k: v.shape for k, v in grads.items()} == param_shapes(cfg)
