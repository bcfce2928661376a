import numpy as np
import pytest

from gradleak import tensor as T
from gradleak.models import ModelSpec, WeightInit, forward, init_weights
from gradleak.patterns import builtin_patterns, one_hot
from gradleak.tensor import Tensor
from gradleak.victim import (GradientSnapshot, capture, gradient_stats, load_weights, save_weights, train,
                             victim_loss)

from helpers import rel_close

MLP = ModelSpec("mlp", (1, 4, 4), 3, hidden=(5,))


def _data(n=2, seed=0):
    rng = np.random.default_rng(seed)
    return rng.uniform(size=(n, 1, 4, 4)), one_hot(rng.integers(0, 3, n), 3)


def test_zero_weight_bias_gradient_identity():
    ws = [Tensor(np.zeros(w.shape), name=w.name) for w in init_weights(MLP, WeightInit())]
    X, Y = _data(4)
    snap = capture(MLP, ws, X, Y)
    q = np.exp(Y) / np.exp(Y).sum(1, keepdims=True)
    expected = (np.full((4, 3), 1 / 3) - q).mean(0)
    np.testing.assert_allclose(snap.grads[-1].data, expected, atol=1e-15)


def test_capture_deterministic_and_weights_untouched():
    ws = init_weights(MLP, WeightInit(seed=2))
    before = [w.data.copy() for w in ws]
    X, Y = _data()
    a, b = capture(MLP, ws, X, Y), capture(MLP, ws, X, Y)
    assert a.to_bytes() == b.to_bytes()
    assert all(np.array_equal(w.data, c) for w, c in zip(ws, before))
    assert a.names == [w.name for w in ws]


def test_capture_matches_fd():
    ws = init_weights(MLP, WeightInit("xavier_normal", seed=3))
    X, Y = _data(3, 3)
    snap = capture(MLP, ws, X, Y, label_scale=2.0)
    for i, w in enumerate(ws):
        def f(v, i=i):
            return victim_loss(MLP, [Tensor(v) if j == i else u for j, u in enumerate(ws)], X, Y, 2.0)
        assert rel_close(snap.grads[i].data, T.finite_difference(f, w.data))


def test_capture_rejects_label_shape():
    X, _ = _data()
    with pytest.raises(T.ShapeError):
        capture(MLP, init_weights(MLP, WeightInit()), X, np.zeros((2, 4)))


def test_snapshot_round_trip_bit_exact(tmp_path):
    snap = capture(MLP, init_weights(MLP, WeightInit(seed=5)), *_data(), epochs=3, seed=11)
    path = tmp_path / "snap.bin"
    snap.save(path)
    back = GradientSnapshot.load(path)
    assert back.to_bytes() == snap.to_bytes()
    assert back.spec == MLP and back.epochs == 3 and back.seed == 11 and back.checksum == snap.checksum


def test_snapshot_rejects_non_finite():
    with pytest.raises(ValueError):
        GradientSnapshot([("w", Tensor([np.nan]))], MLP, "0", 1)


def test_weights_round_trip(tmp_path):
    ws = init_weights(MLP, WeightInit(seed=1))
    save_weights(tmp_path / "w.bin", MLP, ws)
    spec, back = load_weights(tmp_path / "w.bin")
    assert spec == MLP
    assert [w.name for w in back] == [w.name for w in ws]
    assert all(a.data.tobytes() == b.data.tobytes() for a, b in zip(ws, back))


def test_train_zero_epochs_identity():
    ws = init_weights(MLP, WeightInit(seed=1))
    new, hist = train(MLP, ws, _data(4), 0)
    assert hist == [] and all(np.array_equal(a.data, b.data) for a, b in zip(ws, new))


def test_train_zero_lr():
    ws = init_weights(MLP, WeightInit(seed=1))
    new, hist = train(MLP, ws, _data(4), 3, lr=0.0)
    assert all(np.array_equal(a.data, b.data) for a, b in zip(ws, new))
    assert len(hist) == 3 and hist[0] == hist[1] == hist[2]


def test_train_linear_separable_loss_decreases():
    spec = ModelSpec("embedding_head", (1, 2), 2)
    ws = init_weights(spec, WeightInit(seed=0))
    X = np.array([[[1.0, 0.0]], [[0.0, 1.0]]])
    Y = np.eye(2) * 5.0
    _, hist = train(spec, ws, (X, Y), 20, lr=0.5, batch_size=2)
    assert all(b < a for a, b in zip(hist, hist[1:]))


def test_train_negative_epochs():
    with pytest.raises(ValueError):
        train(MLP, init_weights(MLP, WeightInit()), _data(), -1)


def test_train_reduces_dataset_loss():
    spec = ModelSpec("mlp", (1, 4, 4), 4, hidden=(16,))
    X, lab = builtin_patterns("mixed", 4, seed=0, per_class=2)
    Y = one_hot(lab, 4)
    ws = init_weights(spec, WeightInit(seed=0))
    with T.no_grad():
        start = victim_loss(spec, ws, X, Y, 10.0).item()
    _, hist = train(spec, ws, (X, Y), 10, lr=0.1, label_scale=10.0)
    assert hist[-1] < start


def test_gradient_stats_cases():
    snap = GradientSnapshot([("a", Tensor(np.zeros(3))), ("b", Tensor([1.0, -1.0]))], MLP, "0", 1)
    assert gradient_stats(snap) == [(0.0, 0.0, 0.0), (0.0, 1.0, 1.0)]


def test_gradient_stats_two_pass():
    rng = np.random.default_rng(4)
    data = rng.normal(size=37)
    (m, v, a), = gradient_stats(GradientSnapshot([("a", Tensor(data))], MLP, "0", 1))
    mean = sum(data) / len(data)
    var = sum((x - mean) ** 2 for x in data) / len(data)
    assert abs(m - mean) < 1e-12 and abs(v - var) < 1e-12 and a == max(abs(x) for x in data)


def test_training_shrinks_gradients_usually():
    wins = 0
    for seed in range(10):
        X, lab = builtin_patterns("mixed", 8, seed=seed, per_class=2)
        Y = one_hot(lab, 4)
        spec = ModelSpec("mlp", (1, 8, 8), 4, hidden=(16,))
        ws = init_weights(spec, WeightInit("uniform", seed=seed))
        before = max(np.abs(g.data).max() for g in capture(spec, ws, X[:1], Y[:1]).grads)
        trained, _ = train(spec, ws, (X, Y), 10, lr=0.1, seed=seed)
        snap = capture(spec, trained, X[:1], Y[:1], epochs=10)
        after = max(np.abs(g.data).max() for g in snap.grads)
        wins += after <= before
    assert wins >= 8


def test_forward_unchanged_after_capture():
    ws = init_weights(MLP, WeightInit(seed=8))
    X, Y = _data()
    before = forward(MLP, ws, X).data
    capture(MLP, ws, X, Y)
    np.testing.assert_array_equal(forward(MLP, ws, X).data, before)
