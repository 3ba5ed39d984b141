import math

import numpy as np
import pytest

from resale_pricing.features import (
    STAT_FEATURE_COUNT,
    TOKEN_COUNT,
    CategoryStats,
    FeatureStandardizer,
    StatisticalFeatures,
    assemble_input,
)
from resale_pricing.models import (
    HeadConfig,
    ModelFormatError,
    PredictionOutcome,
    TrainedModel,
    backward,
    backward_batch,
    forward_classification,
    forward_regression,
    init_head,
    load_model,
    run_head,
    run_head_batch,
    save_model,
)
from resale_pricing.numeric import gradient_check, sigmoid
from resale_pricing.objectives import ConstraintConfig, RangeLossParams

SMALL = HeadConfig(visual_dim=5, embed_dim=2, vocab_size=11, hidden_sizes=(7, 5))


def small_inputs(seed=0, n=3, config=SMALL, min_token=0):
    rng = np.random.default_rng(seed)
    visuals = rng.normal(size=(n, config.visual_dim))
    tokens = rng.integers(min_token, config.vocab_size, size=(n, TOKEN_COUNT))
    stats = rng.normal(size=(n, STAT_FEATURE_COUNT))
    return visuals, tokens, stats


def naive_forward(visual, tokens, stat_vec, head, kind):
    """Independent re-evaluation: explicit python loops, no shared helpers."""
    textual = []
    for t in tokens:
        textual.extend(head.embedding.table[int(t)])
    textual = np.array(textual)
    concat = np.concatenate([visual, textual])
    logits = [
        float(np.dot(head.fusion.projection.weights[k], concat))
        + head.fusion.projection.bias[k]
        for k in range(2)
    ]
    m = max(logits)
    exps = [math.exp(l - m) for l in logits]
    weights = [e / sum(exps) for e in exps]
    h = np.concatenate([weights[0] * visual, weights[1] * textual, stat_vec])
    for layer in head.hidden:
        h = np.maximum(layer.weights @ h + layer.bias, 0.0)
    out = float((head.output.weights @ h + head.output.bias)[0])
    if kind == "classification":
        return 1.0 / (1.0 + math.exp(-out))
    return out


class TestHeadConfig:
    def test_input_dim(self):
        assert SMALL.input_dim == 5 + TOKEN_COUNT * 2 + STAT_FEATURE_COUNT

    def test_validation(self):
        with pytest.raises(ValueError):
            HeadConfig(visual_dim=0)
        with pytest.raises(ValueError):
            HeadConfig(hidden_sizes=(4, 0))

    def test_roundtrip(self):
        assert HeadConfig.from_dict(SMALL.to_dict()) == SMALL


class TestInitHead:
    def test_seeded_and_distinct(self):
        rng = np.random.default_rng(5)
        head_a = init_head(SMALL, rng)
        head_b = init_head(SMALL, rng)
        head_c = init_head(SMALL, np.random.default_rng(5))
        assert np.array_equal(head_a.embedding.table, head_c.embedding.table)
        assert not np.array_equal(head_a.embedding.table, head_b.embedding.table)

    def test_fusion_gate_starts_neutral(self):
        head = init_head(SMALL, np.random.default_rng(6))
        assert not head.fusion.projection.weights.any()
        assert not head.fusion.projection.bias.any()

    def test_layer_shapes(self):
        head = init_head(SMALL, np.random.default_rng(7))
        assert head.hidden[0].weights.shape == (7, SMALL.input_dim)
        assert head.hidden[1].weights.shape == (5, 7)
        assert head.output.weights.shape == (1, 5)

    def test_param_dict_views_are_live(self):
        head = init_head(SMALL, np.random.default_rng(8))
        params = head.param_dict()
        params["output.bias"][0] = 123.0
        assert head.output.bias[0] == 123.0


class TestForward:
    def test_zero_weight_head_returns_output_bias(self):
        head = init_head(SMALL, np.random.default_rng(9))
        for block in head.param_dict().values():
            block[...] = 0.0
        head.output.bias[0] = 3.25
        visuals, tokens, stats = small_inputs(seed=1)
        x, _ = assemble_input(visuals[0], tokens[0], stats[0], head.embedding, head.fusion)
        assert forward_regression(x, head) == 3.25

    def test_zero_weight_classifier_gives_half(self):
        head = init_head(SMALL, np.random.default_rng(10))
        for block in head.param_dict().values():
            block[...] = 0.0
        visuals, tokens, stats = small_inputs(seed=2)
        x, _ = assemble_input(visuals[0], tokens[0], stats[0], head.embedding, head.fusion)
        assert forward_classification(x, head) == 0.5

    def test_deterministic(self):
        head = init_head(SMALL, np.random.default_rng(11))
        visuals, tokens, stats = small_inputs(seed=3)
        a, _ = run_head(visuals[0], tokens[0], stats[0], head, "regression")
        b, _ = run_head(visuals[0], tokens[0], stats[0], head, "regression")
        assert a == b

    def test_matches_naive_reevaluation(self):
        rng = np.random.default_rng(12)
        head = init_head(SMALL, rng)
        for block in head.param_dict().values():
            block += rng.normal(scale=0.3, size=block.shape)
        head.embedding.table[0] = 0.0
        visuals, tokens, stats = small_inputs(seed=4, n=6)
        for i in range(6):
            for kind in ("regression", "classification"):
                got, _ = run_head(visuals[i], tokens[i], stats[i], head, kind)
                want = naive_forward(visuals[i], tokens[i], stats[i], head, kind)
                np.testing.assert_allclose(got, want, rtol=1e-10)

    def test_batch_matches_single(self):
        head = init_head(SMALL, np.random.default_rng(13))
        visuals, tokens, stats = small_inputs(seed=5, n=8)
        for kind in ("regression", "classification"):
            batch, _ = run_head_batch(visuals, tokens, stats, head, kind)
            for i in range(8):
                single, _ = run_head(visuals[i], tokens[i], stats[i], head, kind)
                np.testing.assert_allclose(batch[i], single, rtol=1e-12)

    def test_classifier_output_clamped_to_open_interval(self):
        head = init_head(SMALL, np.random.default_rng(14))
        head.output.bias[0] = 500.0
        visuals, tokens, stats = small_inputs(seed=6)
        x, _ = assemble_input(visuals[0], tokens[0], stats[0], head.embedding, head.fusion)
        conf = forward_classification(x, head)
        assert 0.0 < conf < 1.0
        head.output.bias[0] = -500.0
        conf = forward_classification(x, head)
        assert 0.0 < conf < 1.0

    def test_non_finite_output_is_hard_error(self):
        head = init_head(SMALL, np.random.default_rng(15))
        head.output.bias[0] = 1e308
        head.output.weights[...] = 1e308
        visuals, tokens, stats = small_inputs(seed=7)
        for block in ("hidden0.weights",):
            head.param_dict()[block][...] = 1e9
        with np.errstate(over="ignore"):
            with pytest.raises(FloatingPointError, match="not finite"):
                run_head_batch(visuals, tokens, stats, head, "regression")

    def test_rejects_unknown_kind(self):
        head = init_head(SMALL, np.random.default_rng(16))
        visuals, tokens, stats = small_inputs(seed=8)
        with pytest.raises(ValueError):
            run_head_batch(visuals, tokens, stats, head, "ranking")


class TestBackward:
    def test_zero_upstream_gives_zero_gradients(self):
        head = init_head(SMALL, np.random.default_rng(17))
        visuals, tokens, stats = small_inputs(seed=9)
        _, cache = run_head_batch(visuals, tokens, stats, head, "regression")
        grads = backward_batch(head, cache, np.zeros(3))
        assert set(grads) == set(head.param_dict())
        for block in grads.values():
            assert not block.any()

    def test_gradient_structure_mirrors_params(self):
        head = init_head(SMALL, np.random.default_rng(18))
        visuals, tokens, stats = small_inputs(seed=10)
        value, cache = run_head(visuals[0], tokens[0], stats[0], head, "regression")
        grads = backward(head, cache, 1.0)
        params = head.param_dict()
        assert set(grads) == set(params)
        for name in params:
            assert grads[name].shape == params[name].shape

    def test_upstream_shape_validated(self):
        head = init_head(SMALL, np.random.default_rng(19))
        visuals, tokens, stats = small_inputs(seed=11)
        _, cache = run_head_batch(visuals, tokens, stats, head, "regression")
        with pytest.raises(ValueError):
            backward_batch(head, cache, np.zeros(5))

    def _head_check(self, kind, seed, ablation="none"):
        rng = np.random.default_rng(seed)
        head = init_head(SMALL, rng)
        # Give the zero-initialized fusion gate something to differentiate.
        head.fusion.projection.weights += rng.normal(scale=0.2, size=(2, SMALL.visual_dim + SMALL.textual_dim))
        head.fusion.projection.bias += rng.normal(scale=0.2, size=2)
        # The padding row is a pinned constant, not a free parameter, so the
        # finite-difference sweep uses inputs that never reference it.
        visuals, tokens, stats = small_inputs(seed=seed + 1, n=2, min_token=1)

        def fn(params):
            outputs, cache = run_head_batch(visuals, tokens, stats, head, kind, ablation)
            value = float(outputs.sum())
            grads = backward_batch(head, cache, np.ones(2))
            return value, grads

        report = gradient_check(fn, head.param_dict(), tolerance=1e-4)
        assert report.passed, (kind, ablation, report)

    def test_regression_head_matches_finite_differences(self):
        self._head_check("regression", seed=20)

    def test_classification_head_matches_finite_differences(self):
        self._head_check("classification", seed=22)

    def test_ablated_heads_match_finite_differences(self):
        self._head_check("regression", seed=24, ablation="no_image")
        self._head_check("regression", seed=26, ablation="no_text")
        self._head_check("regression", seed=28, ablation="no_attention")

    def test_no_image_zeroes_visual_fusion_gradient(self):
        rng = np.random.default_rng(30)
        head = init_head(SMALL, rng)
        head.fusion.projection.weights += rng.normal(scale=0.2, size=head.fusion.projection.weights.shape)
        visuals, tokens, stats = small_inputs(seed=31)
        _, cache = run_head_batch(visuals, tokens, stats, head, "regression", "no_image")
        grads = backward_batch(head, cache, np.ones(3))
        assert not grads["fusion.weights"][:, : SMALL.visual_dim].any()
        assert grads["fusion.weights"][:, SMALL.visual_dim:].any()

    def test_heads_never_alias(self):
        rng = np.random.default_rng(32)
        classifier = init_head(SMALL, rng)
        regressor = init_head(SMALL, rng)
        visuals, tokens, stats = small_inputs(seed=33)
        before, _ = run_head_batch(visuals, tokens, stats, regressor, "regression")
        for block in classifier.param_dict().values():
            block += 1.0
        after, _ = run_head_batch(visuals, tokens, stats, regressor, "regression")
        np.testing.assert_array_equal(before, after)


class TestPredictionOutcome:
    def test_hard_label_threshold(self):
        assert PredictionOutcome.from_outputs(2.0, 0.5).hard_label is True
        assert PredictionOutcome.from_outputs(2.0, 0.499).hard_label is False
        assert PredictionOutcome.from_outputs(2.0, 1.0).hard_label is True


def make_trained_model(seed=40, config=SMALL) -> TrainedModel:
    rng = np.random.default_rng(seed)
    regressor = init_head(config, rng)
    classifier = init_head(config, rng)
    for head in (regressor, classifier):
        for block in head.param_dict().values():
            block += rng.normal(scale=0.1, size=block.shape)
        head.embedding.table[0] = 0.0
    global_block = np.arange(8.0)
    stats = CategoryStats(
        global_block,
        {
            "catA": StatisticalFeatures(global_block, np.arange(8.0, 16.0), False, False),
            "catB": StatisticalFeatures(global_block, np.arange(16.0, 24.0), False, True),
        },
    )
    standardizer = FeatureStandardizer(np.zeros(16), np.ones(16))
    return TrainedModel(
        regressor=regressor,
        classifier=classifier,
        head_config=config,
        stats=stats,
        standardizer=standardizer,
        constraint=ConstraintConfig(mode="threshold", epsilon=0.15, gamma=2.0),
        range_params=RangeLossParams(),
        ablation="none",
        trainer_kind="joint",
        seed=seed,
    )


class TestPersistence:
    def test_roundtrip_is_identity_on_parameters(self, tmp_path):
        model = make_trained_model()
        path = tmp_path / "model.json"
        save_model(model, path)
        loaded = load_model(path)
        for original, restored in (
            (model.regressor, loaded.regressor),
            (model.classifier, loaded.classifier),
        ):
            for name, block in original.param_dict().items():
                assert np.array_equal(block, restored.param_dict()[name]), name
        assert loaded.constraint == model.constraint
        assert loaded.range_params == model.range_params
        assert loaded.trainer_kind == "joint"
        assert loaded.stats.by_category["catB"].unsold_fallback is True

    def test_roundtrip_preserves_predictions(self, tmp_path):
        model = make_trained_model(seed=41)
        path = tmp_path / "model.json"
        save_model(model, path)
        loaded = load_model(path)
        visuals, tokens, stats = small_inputs(seed=42, n=100)
        original, _ = run_head_batch(visuals, tokens, stats, model.regressor, "regression")
        restored, _ = run_head_batch(visuals, tokens, stats, loaded.regressor, "regression")
        assert np.array_equal(original, restored)

    def test_identical_models_produce_identical_bytes(self, tmp_path):
        model = make_trained_model(seed=43)
        path_a = tmp_path / "a.json"
        path_b = tmp_path / "b.json"
        save_model(model, path_a)
        save_model(model, path_b)
        assert path_a.read_bytes() == path_b.read_bytes()

    def test_truncated_file_is_format_error(self, tmp_path):
        model = make_trained_model(seed=44)
        path = tmp_path / "model.json"
        save_model(model, path)
        data = path.read_bytes()
        path.write_bytes(data[: len(data) // 2])
        with pytest.raises(ModelFormatError):
            load_model(path)

    def test_config_mismatch_is_explicit(self, tmp_path):
        import json

        model = make_trained_model(seed=45)
        path = tmp_path / "model.json"
        save_model(model, path)
        payload = json.loads(path.read_text())
        payload["architecture"]["hidden_sizes"] = [9, 5]
        path.write_text(json.dumps(payload))
        with pytest.raises(ModelFormatError, match="hidden layer"):
            load_model(path)

    def test_unknown_version_rejected(self, tmp_path):
        import json

        model = make_trained_model(seed=46)
        path = tmp_path / "model.json"
        save_model(model, path)
        payload = json.loads(path.read_text())
        payload["format_version"] = 99
        path.write_text(json.dumps(payload))
        with pytest.raises(ModelFormatError, match="version"):
            load_model(path)

    def test_baseline_model_without_classifier(self, tmp_path):
        model = make_trained_model(seed=47)
        model.classifier = None
        model.trainer_kind = "baseline"
        path = tmp_path / "model.json"
        save_model(model, path)
        loaded = load_model(path)
        assert loaded.classifier is None
        assert loaded.trainer_kind == "baseline"
