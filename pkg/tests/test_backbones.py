import numpy as np
import pytest

from src.backbones import (
    backward,
    build_backbone,
    count_forward_flops,
    forward,
    forward_features,
    predict,
)
from src.errors import ConfigError, DataError
from src.nn import assign_flat, flatten_params, grad_check, params_equal


def _batch(schema, rng, n=8):
    cat = np.stack([rng.integers(0, card, size=n) for card in schema.cardinalities], axis=1)
    dense = rng.normal(size=(n, len(schema.dense)))
    return cat, dense


class TestConstruction:
    @pytest.mark.parametrize("kind", ["dnn", "dcn", "wd"])
    def test_same_seed_same_model(self, tiny_schema, kind):
        a = build_backbone(kind, tiny_schema, [6, 4], seed=9)
        b = build_backbone(kind, tiny_schema, [6, 4], seed=9)
        assert params_equal(a.parameters(), b.parameters())

    def test_unknown_kind(self, tiny_schema):
        with pytest.raises(ConfigError):
            build_backbone("lstm", tiny_schema, [4], seed=0)

    def test_empty_trunk(self, tiny_schema):
        with pytest.raises(ConfigError):
            build_backbone("dnn", tiny_schema, [], seed=0)

    def test_clone_is_independent(self, tiny_schema):
        model = build_backbone("dcn", tiny_schema, [4], seed=1)
        copy = model.clone()
        copy.trunk[0].weight += 1.0
        assert not params_equal(model.parameters(), copy.parameters())


class TestForward:
    @pytest.mark.parametrize("kind", ["dnn", "dcn", "wd"])
    def test_shapes_and_probabilities(self, tiny_schema, rng, kind):
        model = build_backbone(kind, tiny_schema, [6, 4], seed=2)
        cat, dense = _batch(tiny_schema, rng)
        out, _ = forward_features(model, cat, dense)
        assert out.representation.shape == (8, 4)
        assert out.logits.shape == (8, 2)
        assert np.all((out.prediction > 0) & (out.prediction < 1))
        assert len(out.hidden) == 2

    def test_out_of_range_index_names_field(self, tiny_schema, rng):
        model = build_backbone("dnn", tiny_schema, [4], seed=0)
        cat, dense = _batch(tiny_schema, rng)
        cat[3, 1] = 5
        with pytest.raises(DataError, match="c1.*5"):
            forward_features(model, cat, dense)

    @pytest.mark.parametrize("kind", ["dnn", "dcn", "wd"])
    def test_flop_counter_matches_formula(self, tiny_schema, rng, kind):
        model = build_backbone(kind, tiny_schema, [6, 4], seed=2)
        cat, dense = _batch(tiny_schema, rng, n=11)
        forward_features(model, cat, dense)
        assert model.flops == count_forward_flops(model, 11)

    def test_predict_equals_forward_prediction(self, tiny_datasets, tiny_config):
        model = build_backbone("wd", tiny_config.feature_schema, [6, 4], seed=4)
        data = tiny_datasets[(0, 0)]
        np.testing.assert_array_equal(predict(model, data), forward(model, data).prediction)

    @pytest.mark.parametrize("kind", ["dnn", "dcn"])
    def test_zeroed_head_predicts_one_half(self, tiny_schema, rng, kind):
        model = build_backbone(kind, tiny_schema, [6, 4], seed=3)
        model.head.weight[...] = 0.0
        model.head.bias[...] = 0.0
        cat, dense = _batch(tiny_schema, rng)
        out, _ = forward_features(model, cat, dense)
        np.testing.assert_array_equal(out.prediction, 0.5)

    @pytest.mark.parametrize("kind", ["dnn", "dcn"])
    def test_representation_matches_layer_by_layer_replay(self, tiny_schema, rng, kind):
        model = build_backbone(kind, tiny_schema, [6, 5, 4], seed=7)
        for layer in model.trunk:
            layer.bias[...] = rng.normal(size=layer.out_width)
        cat, dense = _batch(tiny_schema, rng, n=5)
        out, _ = forward_features(model, cat, dense)

        for i in range(5):
            x = np.concatenate([model.embeddings[j][cat[i, j]] for j in range(len(model.embeddings))] + [dense[i]])
            if kind == "dcn":
                x = x * (x @ model.cross_weight) + model.cross_bias + x
            for layer in model.trunk:
                x = np.maximum(layer.weight @ x + layer.bias, 0.0)
            np.testing.assert_allclose(out.representation[i], x, rtol=0, atol=1e-12)


class TestBackward:
    @pytest.mark.parametrize("kind", ["dnn", "dcn", "wd"])
    def test_gradients_pass_grad_check(self, tiny_schema, rng, kind):
        model = build_backbone(kind, tiny_schema, [5, 3], seed=6)
        cat, dense = _batch(tiny_schema, rng, n=6)
        upstream = rng.normal(size=(6, 2))
        hidden_upstream = rng.normal(size=(6, 5))
        params = model.parameters()

        def loss_and_grad(vector):
            assign_flat(params, vector)
            out, cache = forward_features(model, cat, dense)
            loss = float(np.sum(out.logits * upstream) + np.sum(out.hidden[0] * hidden_upstream))
            grads = backward(model, cache, upstream, {0: hidden_upstream})
            return loss, flatten_params(grads)

        assert grad_check(loss_and_grad, flatten_params(params)) < 1e-6

    def test_gradient_order_follows_parameters(self, tiny_schema, rng):
        model = build_backbone("wd", tiny_schema, [4], seed=0)
        cat, dense = _batch(tiny_schema, rng)
        _, cache = forward_features(model, cat, dense)
        grads = backward(model, cache, np.ones((8, 2)))
        assert list(grads) == list(model.parameters())
