import math

import numpy as np
import pytest

from gradleak import tensor as T
from gradleak.models import (ModelSpec, WeightInit, as_trainable, forward, init_weights, loss, param_shapes,
                             self_attention, sinusoidal_encoding)
from gradleak.tensor import ShapeError, Tensor

from helpers import rel_close

MLP = ModelSpec("mlp", (1, 4, 4), 3, hidden=(6, 5))
LENET = ModelSpec("lenet_lite", (1, 8, 8), 4, channels=3)
TRANS = ModelSpec("transformer_lite", (5, 8), 3, heads=2, ff_dim=12)


def _sigmoid(z):
    return 1.0 / (1.0 + np.exp(-z))


def test_uniform_bounds_and_mean():
    ws = init_weights(ModelSpec("mlp", (1, 16, 16), 10, hidden=(64,)), WeightInit("uniform", seed=5))
    w = ws[0].data
    assert w.min() >= -0.5 and w.max() <= 0.5
    assert abs(w.mean()) < 3 * math.sqrt(1 / 12) / math.sqrt(w.size)


def test_xavier_std():
    spec = ModelSpec("mlp", (1, 10, 10), 3, hidden=(100,))
    w = init_weights(spec, WeightInit("xavier_normal", gain=1.0, seed=2))[0].data
    assert w.size == 10_000
    assert abs(w.std() - math.sqrt(2 / 200)) < 0.1 * math.sqrt(2 / 200)


def test_init_deterministic_and_biases_zero():
    a = init_weights(LENET, WeightInit("xavier_normal", seed=9))
    b = init_weights(LENET, WeightInit("xavier_normal", seed=9))
    assert all(x.data.tobytes() == y.data.tobytes() for x, y in zip(a, b))
    assert all(not w.data.any() for w in a if w.name.endswith(".bias"))


def test_weight_order_front_to_back():
    names = [n for n, *_ in param_shapes(LENET)]
    assert names == ["conv1.weight", "conv1.bias", "conv2.weight", "conv2.bias", "fc.weight", "fc.bias"]
    assert [w.name for w in init_weights(LENET, WeightInit())] == names


def test_zero_weight_mlp_rows_constant():
    ws = [Tensor(np.zeros(w.shape), name=w.name) for w in init_weights(MLP, WeightInit())]
    out = forward(MLP, ws, np.random.default_rng(0).uniform(size=(2, 1, 4, 4))).data
    np.testing.assert_array_equal(out, out[:, :1].repeat(3, axis=1))


def test_lenet_zero_input_independent_of_image():
    ws = init_weights(LENET, WeightInit(seed=1))
    a = forward(LENET, ws, np.zeros((1, 1, 8, 8))).data
    b = forward(LENET, ws, np.zeros((3, 1, 8, 8))).data
    assert forward(LENET, ws, np.zeros((1, 1, 8, 8))).data.tobytes() == a.tobytes()
    np.testing.assert_allclose(b, np.repeat(a, 3, axis=0), rtol=0, atol=1e-14)


def test_mlp_matches_straight_line():
    rng = np.random.default_rng(4)
    ws = init_weights(MLP, WeightInit("xavier_normal", seed=4))
    for w in ws:
        w.data += rng.normal(size=w.shape) * 0.1
    x = rng.uniform(size=(3, 1, 4, 4))
    h = x.reshape(3, -1)
    h = _sigmoid(h @ ws[0].data.T + ws[1].data)
    h = _sigmoid(h @ ws[2].data.T + ws[3].data)
    ref = h @ ws[4].data.T + ws[5].data
    np.testing.assert_allclose(forward(MLP, ws, x).data, ref, rtol=0, atol=1e-12)


def test_lenet_output_shape():
    assert forward(LENET, init_weights(LENET, WeightInit()), np.zeros((2, 1, 8, 8))).shape == (2, 4)


def test_forward_rejects_bad_shape():
    with pytest.raises(ShapeError):
        forward(LENET, init_weights(LENET, WeightInit()), np.zeros((1, 1, 7, 8)))


def test_loss_uniform_logits():
    y = np.zeros((1, 10))
    y[0, 3] = 1e3
    assert loss(Tensor(np.zeros((1, 10))), y).item() == pytest.approx(math.log(10), abs=1e-12)
    assert loss(Tensor(np.zeros((2, 10))), np.zeros((2, 10))).item() == pytest.approx(math.log(10), abs=1e-12)


def test_loss_matches_hand_roll():
    rng = np.random.default_rng(8)
    z, y = rng.normal(size=(4, 5)), rng.normal(size=(4, 5))
    total = 0.0
    for i in range(4):
        q = np.exp(y[i]) / np.exp(y[i]).sum()
        logp = z[i] - math.log(sum(math.exp(v) for v in z[i]))
        total += -float((q * logp).sum())
    assert loss(Tensor(z), y).item() == pytest.approx(total / 4, abs=1e-12)


def test_loss_non_negative():
    rng = np.random.default_rng(1)
    for _ in range(20):
        assert loss(Tensor(rng.normal(size=(3, 4)) * 5), rng.normal(size=(3, 4)) * 5).item() >= 0


def test_spec_validation():
    with pytest.raises(ValueError):
        ModelSpec("transformer_lite", (4, 6), 2, heads=4)
    with pytest.raises(ValueError):
        ModelSpec("mlp", (1, 4, 4), 2)
    with pytest.raises(ValueError):
        ModelSpec("resnet", (1, 4, 4), 2)
    with pytest.raises(ValueError):
        WeightInit("uniform", lo=1, hi=0)
    with pytest.raises(ValueError):
        WeightInit("xavier_normal", gain=0)


def test_spec_round_trip():
    assert ModelSpec.from_dict(TRANS.to_dict()) == TRANS


def test_attention_zero_scores_average_values():
    d = 4
    x = Tensor(np.random.default_rng(0).normal(size=(1, 3, d)))
    zero = Tensor(np.zeros((d, d)))
    eye = Tensor(np.eye(d))
    out = self_attention(x, zero, zero, eye, eye, Tensor(np.zeros(d)), heads=1).data
    np.testing.assert_allclose(out[0], np.repeat(x.data[0].mean(0, keepdims=True), 3, axis=0), atol=1e-14)


def test_transformer_permutation_invariant_without_position():
    spec = ModelSpec("transformer_lite", (5, 8), 3, heads=2, ff_dim=12, position_encoding=False)
    ws = init_weights(spec, WeightInit(seed=3))
    x = np.random.default_rng(3).normal(size=(1, 5, 8))
    perm = [4, 2, 0, 1, 3]
    np.testing.assert_allclose(forward(spec, ws, x).data, forward(spec, ws, x[:, perm]).data, atol=1e-13)


def test_position_encoding_breaks_permutation_symmetry():
    ws = init_weights(TRANS, WeightInit(seed=3))
    x = np.random.default_rng(3).normal(size=(1, 5, 8))
    assert not np.allclose(forward(TRANS, ws, x).data, forward(TRANS, ws, x[:, ::-1]).data)


def test_sinusoidal_first_row():
    pe = sinusoidal_encoding(3, 4)
    np.testing.assert_array_equal(pe[0], [0, 1, 0, 1])


@pytest.mark.parametrize("spec", [MLP, LENET, TRANS, ModelSpec("embedding_head", (3, 4), 2)],
                         ids=["mlp", "lenet", "transformer", "embedding_head"])
def test_weight_gradients_match_fd(spec):
    rng = np.random.default_rng(6)
    ws = init_weights(spec, WeightInit("uniform", seed=6))
    x = rng.uniform(size=(2, *spec.input_shape))
    y = rng.normal(size=(2, spec.num_classes))
    params = as_trainable(ws)
    auto = T.grad(loss(forward(spec, params, x), y), params)
    for i, w in enumerate(ws):
        def f(v, i=i):
            trial = [Tensor(v) if j == i else u for j, u in enumerate(ws)]
            return loss(forward(spec, trial, x), y)
        assert rel_close(auto[i].data, T.finite_difference(f, w.data)), w.name


def test_transformer_input_gradient_matches_fd():
    ws = init_weights(TRANS, WeightInit(seed=2))
    x0 = np.random.default_rng(2).normal(size=(1, 5, 8))
    y = np.array([[0.0, 3.0, 0.0]])
    x = Tensor(x0, requires_grad=True)
    (auto,) = T.grad(loss(forward(TRANS, ws, x), y), [x])
    fd = T.finite_difference(lambda v: loss(forward(TRANS, ws, v), y), x0)
    assert rel_close(auto.data, fd)
