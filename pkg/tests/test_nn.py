import json
import pickle

import numpy as np
import pytest
from conftest import live_model, random_batch, toy_config
from oracles import FROZEN, finite_difference, forward_fixture, scalar_ce, scalar_forward

from d2sprune.errors import ConfigError, DataError, StateError
from d2sprune.nn import (Batch, DenseParam, EmbeddingTable, MaskedLayer, ModelConfig, RecModel, adagrad_step,
                         ce_loss, dot_interaction, load_snapshot, save_snapshot)


def test_zero_weights_give_half(toy_cfg):
    model = RecModel(toy_cfg)
    for layer in model.layers:
        layer.values[...] = 0
        layer.bias[...] = 0
    for t in model.embeddings:
        t.table[...] = 0
    assert np.all(model.predict(random_batch(toy_cfg, 7)) == 0.5)


def test_fully_pruned_final_layer_leaves_bias_only(toy_cfg):
    model = live_model(toy_cfg)
    model.top[-1].aux[...] = -1.0
    probs = model.predict(random_batch(toy_cfg, 5))
    expected = 1 / (1 + np.exp(-model.top[-1].bias[0]))
    np.testing.assert_allclose(probs, expected, rtol=0, atol=1e-15)


def test_forward_matches_scalar_oracle_and_frozen_values():
    model, batch = forward_fixture()
    frozen = json.loads(FROZEN.read_text())["forward_seed0_probs"]
    np.testing.assert_allclose(model.predict(batch), scalar_forward(model, batch), rtol=1e-13)
    np.testing.assert_allclose(model.predict(batch), frozen, rtol=1e-13)


def test_forward_shape_and_id_errors(toy_cfg):
    model = RecModel(toy_cfg)
    b = random_batch(toy_cfg, 3)
    with pytest.raises(ConfigError):
        model.predict(Batch(b.dense[:, :2], b.categorical, b.labels))
    bad = (b.categorical[0], b.categorical[1] + 100)
    with pytest.raises(DataError):
        model.predict(Batch(b.dense, bad, b.labels))


@pytest.mark.parametrize("p,y,expected", [(0.5, 1, 0.693147), (0.9, 1, 0.105361)])
def test_ce_examples(p, y, expected):
    assert ce_loss([p], [y]) == pytest.approx(expected, abs=1e-6)


def test_ce_at_prevalence_equals_background_entropy():
    q = 0.3
    labels = np.array([1] * 3 + [0] * 7, dtype=float)
    assert ce_loss(np.full(10, q), labels) == pytest.approx(-q * np.log(q) - (1 - q) * np.log(1 - q))


def test_ce_clamps_and_checks_length():
    assert np.isfinite(ce_loss([0.0, 1.0], [1.0, 0.0]))
    assert ce_loss([0.0, 1.0], [1.0, 0.0]) == pytest.approx(-np.log(1e-7))
    with pytest.raises(DataError):
        ce_loss([0.5], [1.0, 0.0])


def _all_tensors(model):
    for layer in model.layers:
        yield layer.values, lambda l=layer: l.grad
        yield layer.bias, lambda l=layer: l.bias_grad
    for t in model.embeddings:
        yield t.table, lambda t=t: _dense_emb_grad(t)


def _dense_emb_grad(table):
    g = np.zeros_like(table.table)
    np.add.at(g, table.grad_rows, table.grad_values)
    return g


def kink_free_batch(model, cfg, seed, margin=1e-2):
    """Redraw until no ReLU pre-activation lies within ``margin`` of 0.

    A central difference that straddles the kink is not a valid oracle.
    """
    for k in range(1000):
        batch = random_batch(cfg, 6, seed=seed * 1000 + k)
        model.forward(batch)
        c = model._cache
        if cfg.activation != "relu" or min(np.abs(p).min() for p in c["b_pre"] + c["t_pre"][:-1]) > margin:
            return batch
    raise AssertionError("no kink-free batch found")


def max_gradient_error(seed: int, masked=True, activation="relu") -> float:
    cfg = toy_config(dense_dim=2, table_rows=(4, 3), seed=seed, masked=masked, activation=activation)
    model = live_model(cfg, seed)
    if masked:
        rng = np.random.default_rng(seed)
        for l in model.masked_layers():
            l.aux = rng.choice([-1.0, 1.0], size=l.aux.shape, p=[0.2, 0.8])
    batch = kink_free_batch(model, cfg, seed)
    model.forward(batch)
    model.backward(batch)
    worst = 0.0
    for array, grad in list(_all_tensors(model)):
        analytic = grad().copy()
        numeric = finite_difference(lambda: model.loss(batch), array)
        scale = np.maximum(np.abs(numeric), np.abs(analytic))
        ok = scale > 1e-7  # entries with no signal on either side carry no relative information
        err = np.abs(numeric - analytic)[ok] / scale[ok]
        if err.size:
            worst = max(worst, float(err.max()))
        assert np.all(np.abs(numeric - analytic)[~ok] < 1e-9)
    return worst


@pytest.mark.parametrize("activation", ["relu", "tanh"])
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_backward_matches_finite_differences(seed, activation):
    assert max_gradient_error(seed, activation=activation) < 1e-4


def test_backward_unmasked_model():
    assert max_gradient_error(4, masked=False) < 1e-4


def test_backward_requires_matching_forward(toy_cfg):
    model = RecModel(toy_cfg)
    b1, b2 = random_batch(toy_cfg, 3), random_batch(toy_cfg, 3, seed=1)
    with pytest.raises(StateError):
        model.backward(b1)
    model.forward(b1)
    with pytest.raises(StateError):
        model.backward(b2)


def test_gradient_at_minimum_is_small(toy_cfg):
    model = RecModel(toy_cfg)
    for layer in model.layers:
        layer.values[...] = 0
    model.top[-1].bias[...] = 30.0  # p clamps to 1 - 1e-7
    b = random_batch(toy_cfg, 4)
    b = Batch(b.dense, b.categorical, np.ones(4))
    model.forward(b)
    model.backward(b)
    assert abs(model.top[-1].bias_grad[0]) < 1e-6


def test_duplicated_example_doubles_its_gradient_share(toy_cfg):
    model = live_model(toy_cfg)
    b = random_batch(toy_cfg, 4)
    one = b.slice(0, 1)
    model.forward(one)
    model.backward(one)
    g_one = model.top[0].grad.copy()
    rest = b.slice(1, 4)
    model.forward(rest)
    model.backward(rest)
    g_rest = model.top[0].grad.copy()
    dup = Batch.concat([one, one, rest])
    model.forward(dup)
    model.backward(dup)
    np.testing.assert_allclose(model.top[0].grad, (2 * g_one + 3 * g_rest) / 5, rtol=1e-12, atol=1e-15)


def test_adagrad_examples():
    p = DenseParam(np.array([[1.0]]), np.zeros(1))
    p.grad[...] = 2.0
    adagrad_step(p, 0.1, 1e-8)
    assert 1.0 - p.values[0, 0] == pytest.approx(0.1 * 2 / (2 + 1e-8), rel=1e-15)

    p = DenseParam(np.array([[1.0]]), np.zeros(1))
    adagrad_step(p, 0.1)
    assert p.values[0, 0] == 1.0 and p.acc[0, 0] == 0.0

    p = DenseParam(np.array([[0.0]]), np.zeros(1))
    p.grad[...] = 1.0
    adagrad_step(p, 0.1, 1e-8)
    first = -p.values[0, 0]
    adagrad_step(p, 0.1, 1e-8)
    second = -p.values[0, 0] - first
    assert second == pytest.approx(0.1 / np.sqrt(2), abs=1e-8)

    with pytest.raises(ConfigError):
        adagrad_step(p, 0.0)


def test_adagrad_accumulator_nondecreasing(toy_cfg):
    model = live_model(toy_cfg)
    prev = [l.acc.copy() for l in model.layers]
    for s in range(5):
        model.train_step(random_batch(toy_cfg, 8, seed=s), 0.05)
        now = [l.acc.copy() for l in model.layers]
        assert all(np.all(n >= p) and np.all(n >= 0) for n, p in zip(now, prev))
        prev = now


def test_embedding_adagrad_touches_only_batch_rows():
    t = EmbeddingTable(np.ones((5, 2)))
    t.grad_rows = np.array([1, 3])
    t.grad_values = np.ones((2, 2))
    adagrad_step(t, 0.1)
    assert np.all(t.table[[0, 2, 4]] == 1.0) and np.all(t.table[[1, 3]] < 1.0)


def test_dot_interaction_examples():
    assert dot_interaction([[1, 0], [1, 0]])[2:].tolist() == [1.0]
    assert np.all(dot_interaction([[1, 0], [0, 1]])[2:] == 0)
    out = dot_interaction([[1, 2], [3, 4], [5, 6]])
    assert out.tolist() == [1, 2, 11, 17, 39]
    with pytest.raises(ConfigError):
        dot_interaction([[1, 2], [1, 2, 3]])
    with pytest.raises(ConfigError):
        dot_interaction([[1, 2]])


def test_interaction_width_checked():
    cfg = ModelConfig()
    assert cfg.interaction_width == 16 + 4 * 5 // 2
    with pytest.raises(ConfigError):
        ModelConfig(bottom=(32, 8), emb_dim=16)
    with pytest.raises(ConfigError):
        ModelConfig(top=(64, 2))


def test_mask_transparency_bit_identical(toy_cfg):
    model = live_model(toy_cfg)
    rng = np.random.default_rng(3)
    for l in model.masked_layers():
        l.aux = rng.standard_normal(l.aux.shape)
    dense = RecModel(toy_config(masked=False),
                     [DenseParam(l.values * l.mask, l.bias.copy()) for l in model.bottom],
                     model.embeddings,
                     [DenseParam(l.values * l.mask, l.bias.copy()) for l in model.top])
    b = random_batch(toy_cfg, 20)
    assert np.array_equal(model.predict(b), dense.predict(b))


def test_determinism_same_seed_same_params(toy_cfg):
    def run():
        m = RecModel(toy_cfg)
        for s in range(10):
            m.train_step(random_batch(toy_cfg, 16, seed=s), 0.05)
        return m.param_vector()
    assert np.array_equal(run(), run())


def test_snapshot_round_trip_bit_exact(tmp_path, toy_cfg):
    model = live_model(toy_cfg)
    for s in range(3):
        model.train_step(random_batch(toy_cfg, 8, seed=s), 0.05)
    model.top[0].aux[0, 0] = -0.25
    model.top[0].momentum[...] = 0.125
    model.time = 12345
    path = save_snapshot(model, tmp_path / "snap.npz", extra={"tag": "x"})
    back, extra = load_snapshot(path)
    assert extra == {"tag": "x"} and back.time == 12345 and back.config == model.config
    for a, b in zip(model.layers, back.layers):
        for name in ("values", "bias", "acc", "bias_acc", "aux", "momentum"):
            assert np.array_equal(getattr(a, name), getattr(b, name))
    for a, b in zip(model.embeddings, back.embeddings):
        assert np.array_equal(a.table, b.table) and np.array_equal(a.acc, b.acc)


def test_model_pickles(toy_cfg):
    m = RecModel(toy_cfg)
    assert np.array_equal(pickle.loads(pickle.dumps(m)).param_vector(), m.param_vector())


def test_batch_validation():
    with pytest.raises(DataError):
        Batch(np.zeros((2, 3)), (np.zeros((2, 1), int),), np.array([0.0, 2.0]))
    with pytest.raises(DataError):
        Batch(np.zeros((2, 3)), (np.zeros((3, 1), int),), np.array([0.0, 1.0]))


def test_masked_layer_keeps_theta(toy_cfg):
    layer = MaskedLayer(np.array([[0.5, 0.7]]), np.zeros(1), aux=np.array([[1.0, -1.0]]))
    assert layer.effective_weight().tolist() == [[0.5, 0.0]]
    layer.aux[0, 1] = 1.0
    assert layer.effective_weight().tolist() == [[0.5, 0.7]]


def test_grad_masked_is_derivative_wrt_effective_weight():
    cfg = toy_config(dense_dim=2, table_rows=(4, 3), seed=5)
    model = live_model(cfg, 5)
    layer = model.top[0]
    layer.aux[0, :] = -1.0
    batch = kink_free_batch(model, cfg, 5)
    model.forward(batch)
    model.backward(batch)
    g_masked = layer.grad_masked.copy()
    assert np.all(layer.grad[0] == 0) and np.any(g_masked[0] != 0)
    # same function with the mask folded into the weights: W_eff becomes the free variable
    layer.values = layer.values * layer.mask
    layer.aux[...] = 1.0
    numeric = finite_difference(lambda: model.loss(batch), layer.values)
    np.testing.assert_allclose(g_masked, numeric, rtol=1e-4, atol=1e-9)
