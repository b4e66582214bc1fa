import math
import struct
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dramflip.qnn import (VICTIM_RECIPE, Dataset, FloatModel, QuantizedModel, TrainingDiverged, accuracy,
                          bit_gradients, bit_weights, cnn_spec, dequantize, forward_loss, load_qnn,
                          make_dataset, mlp_spec, quantize, save_qnn, train_float)
from dramflip.qnn.layers import cross_entropy, softmax, validate_spec
from dramflip.qnn.quant import bits_to_codes, codes_to_bits


# -- datasets -------------------------------------------------------------------

@pytest.mark.parametrize("kind,shape", [("blobs", (32,)), ("rings", (2,)), ("tiny_images", (1, 8, 8))])
def test_dataset_shapes_and_determinism(kind, shape):
    a_tr, a_te = make_dataset(kind, 4, 400, seed=3)
    b_tr, _ = make_dataset(kind, 4, 400, seed=3)
    assert a_tr.inputs.shape[1:] == shape
    assert np.array_equal(a_tr.inputs, b_tr.inputs) and np.array_equal(a_tr.labels, b_tr.labels)
    assert len(a_tr) + len(a_te) == 400
    assert a_tr.labels.max() < 4


@pytest.mark.parametrize("samples,classes", [(2000, 10), (1003, 7), (350, 35)])
def test_classes_balanced(samples, classes):
    train, test = make_dataset("blobs", classes, samples, seed=1)
    for part in (train, test):
        counts = np.bincount(part.labels, minlength=classes)
        assert counts.max() - counts.min() <= 1


def test_dataset_validation():
    with pytest.raises(ValueError):
        make_dataset("blobs", 10, 50)
    with pytest.raises(ValueError):
        make_dataset("moons")
    with pytest.raises(ValueError):
        make_dataset("blobs", 0, 100)


def test_batch_is_seeded(blobs):
    _, test = blobs
    x1, y1 = test.batch(128, 5)
    x2, y2 = test.batch(128, 5)
    assert np.array_equal(x1, x2) and np.array_equal(y1, y2) and len(y1) == 128
    assert not np.array_equal(test.batch(128, 6)[1], y1)


# -- layers ------------------------------------------------------------------------

def test_spec_validation():
    assert validate_spec(cnn_spec(1, 8, 4, 10), (1, 8, 8)) == (10,)
    with pytest.raises(ValueError):
        validate_spec(mlp_spec(32, [8], 10), (16,))
    with pytest.raises(ValueError):
        validate_spec([{"type": "maxpool2"}], (1, 7, 7))
    with pytest.raises(ValueError):
        validate_spec([{"type": "softsign"}], (3,))


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 8), st.integers(2, 12), st.floats(-50, 50))
def test_softmax_normalised(n, k, scale):
    logits = np.random.default_rng(n * k).normal(size=(n, k)) * scale
    p = softmax(logits)
    assert np.allclose(p.sum(axis=1), 1.0, atol=1e-9)


def test_cross_entropy_limits():
    loss, _ = cross_entropy(np.zeros((4, 10)), np.arange(4))
    assert loss == pytest.approx(math.log(10))
    big = np.full((3, 5), -500.0)
    big[np.arange(3), [0, 1, 2]] = 500.0
    assert cross_entropy(big, np.array([0, 1, 2]))[0] == pytest.approx(0.0, abs=1e-12)


# -- training ----------------------------------------------------------------------

def test_mlp_reaches_high_accuracy():
    train, test = make_dataset("blobs", 10, 2000, seed=1)
    model = train_float(mlp_spec(32, [64, 64], 10), train, seed=1, test=test)
    assert model.history["test_accuracy"] >= 0.95


def test_victim_recipe_accuracy(victim, blobs):
    assert accuracy(victim, blobs[1]).accuracy >= 0.9


def test_cnn_reaches_high_accuracy():
    train, test = make_dataset("tiny_images", 10, 2000, seed=1)
    model = train_float(cnn_spec(1, 8, 8, 10), train, epochs=10, seed=1, test=test)
    assert model.history["test_accuracy"] >= 0.8


def test_training_is_deterministic():
    train, _ = make_dataset("blobs", 3, 300, seed=2, features=8)
    a = train_float(mlp_spec(8, [6], 3), train, epochs=3, seed=4)
    b = train_float(mlp_spec(8, [6], 3), train, epochs=3, seed=4)
    assert all(np.array_equal(x, y) for x, y in zip(a.weights, b.weights))


def test_zero_learning_rate_keeps_weights():
    train, _ = make_dataset("blobs", 3, 300, seed=2, features=8)
    init = FloatModel.init(mlp_spec(8, [6], 3), (8,), seed=4)
    model = train_float(mlp_spec(8, [6], 3), train, epochs=2, lr=0.0, seed=4, weight_decay=0.1)
    assert all(np.array_equal(x, y) for x, y in zip(init.weights, model.weights))


def test_nan_loss_aborts():
    train, _ = make_dataset("blobs", 3, 300, seed=2, features=8)
    train.inputs[:, 0] = 1e308  # overflows the first matmul
    with pytest.raises(TrainingDiverged, match="learning rate"):
        train_float(mlp_spec(8, [6], 3), train, epochs=1)


def test_single_class_dataset():
    train, test = make_dataset("blobs", 1, 100, seed=0)
    model = train_float(mlp_spec(32, [4], 1), train, epochs=1)
    acc = accuracy(model, test)
    assert acc.accuracy == 1.0 and acc.random_guess == 1.0


# -- accuracy -------------------------------------------------------------------

def test_random_guess_levels():
    assert accuracy(_constant_model(10, 0), _balanced(10)).random_guess == pytest.approx(0.1)
    assert accuracy(_constant_model(35, 0), _balanced(35)).random_guess == pytest.approx(0.0286, abs=5e-5)


def _balanced(k, per=7):
    labels = np.repeat(np.arange(k), per)
    return Dataset(np.zeros((labels.size, 2)), labels, k, 0)


def _constant_model(k, cls):
    w = np.zeros((k, 2))
    b = np.zeros(k)
    b[cls] = 1.0
    return FloatModel([{"type": "dense", "in": 2, "out": k}], [w], [b], (2,))


def test_constant_model_scores_one_over_k():
    data = _balanced(10)
    assert accuracy(_constant_model(10, 3), data).accuracy == pytest.approx(0.1)


def test_accuracy_of_empty_dataset_raises():
    with pytest.raises(ValueError):
        accuracy(_constant_model(3, 0), Dataset(np.zeros((0, 2)), np.zeros(0, dtype=int), 3, 0))


# -- quantization -------------------------------------------------------------------

def _single_layer(w):
    w = np.asarray(w, dtype=float).reshape(1, -1)
    return FloatModel([{"type": "dense", "in": w.shape[1], "out": 1}], [w], [np.zeros(1)], (w.shape[1],))


def test_lattice_point_and_saturation():
    delta = 0.5 / 127
    q = quantize(_single_layer([delta * 5, 0.5, -0.5]), 8)
    assert q.codes[0].tolist() == [[5, 127, -127]]
    assert dequantize(q).weights[0][0, 0] == pytest.approx(5 * delta)


@settings(max_examples=60, deadline=None)
@given(st.sampled_from([2, 4, 8, 12, 16]), st.integers(0, 10**6))
def test_round_trip_error_and_idempotence(n_q, seed):
    w = np.random.default_rng(seed).normal(size=(6, 9))
    q = quantize(_single_layer(w.reshape(-1)), n_q)
    delta = q.scales[0]
    assert (np.abs(dequantize(q).weights[0] - w.reshape(1, -1)) <= delta / 2 + 1e-12).all()
    again = quantize(dequantize(q), n_q)
    assert np.array_equal(again.codes[0], q.codes[0])


def test_n_q_bounds():
    with pytest.raises(ValueError):
        quantize(_single_layer([1.0]), 1)
    with pytest.raises(ValueError):
        quantize(_single_layer([1.0]), 17)


def test_all_zero_layer_warns():
    with pytest.warns(UserWarning, match="all zeros"):
        q = quantize(_single_layer([0.0, 0.0]), 8)
    assert q.scales == [1.0]


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 16), st.data())
def test_bits_round_trip(n_q, data):
    lo, hi = -(2 ** (n_q - 1)), 2 ** (n_q - 1) - 1
    codes = np.array(data.draw(st.lists(st.integers(lo, hi), min_size=1, max_size=20)))
    bits = codes_to_bits(codes, n_q)
    assert bits.shape == (codes.size, n_q)
    assert np.array_equal(bits_to_codes(bits, n_q), codes)


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 16), st.data())
def test_flip_bit_exact_arithmetic(n_q, data):
    lo, hi = -(2 ** (n_q - 1)), 2 ** (n_q - 1) - 1
    code = data.draw(st.integers(lo, hi))
    bit = data.draw(st.integers(0, n_q - 1))
    q = QuantizedModel([{"type": "dense", "in": 1, "out": 1}], [np.array([[code]])], [0.25], [np.zeros(1)],
                       n_q, (1,))
    old = q.get_bit(0, 0, bit)
    before = q.weights()[0][0, 0]
    new = q.flip_bit(0, 0, bit)
    assert new == 1 - old
    assert q.weights()[0][0, 0] - before == 0.25 * bit_weights(n_q)[bit] * (1 - 2 * old)
    assert lo <= q.codes[0][0, 0] <= hi


def test_msb_flip_of_positive_code():
    q = QuantizedModel([{"type": "dense", "in": 1, "out": 1}], [np.array([[5]])], [0.1], [np.zeros(1)], 8, (1,))
    q.flip_bit(0, 0, 7)
    assert q.codes[0][0, 0] == 5 - 128


def test_hamming_counts_flips(victim):
    other = victim.copy()
    for layer, weight, bit in [(0, 3, 7), (1, 10, 0), (2, 5, 4), (0, 3, 6)]:
        other.flip_bit(layer, weight, bit)
    assert victim.hamming(other) == 4
    assert victim.total_bits == 54_272


# -- loss and gradients ----------------------------------------------------------------

def test_forward_loss_checks_shapes(victim, blobs):
    x, y = blobs[1].batch(16, 0)
    logits, loss = forward_loss(victim, x, y)
    assert logits.shape == (16, 10) and loss >= 0
    with pytest.raises(ValueError):
        forward_loss(victim, x[:, :10], y)
    with pytest.raises(ValueError):
        forward_loss(victim, x, y[:3])


def test_forward_loss_uniform_logits_is_log_k():
    model = QuantizedModel([{"type": "dense", "in": 4, "out": 7}], [np.zeros((7, 4), dtype=int)], [1.0],
                           [np.zeros(7)], 8, (4,))
    _, loss = forward_loss(model, np.ones((5, 4)), np.arange(5))
    assert loss == pytest.approx(math.log(7))


def test_forward_loss_reproducible(victim, blobs):
    x, y = blobs[1].batch(128, 0)
    assert forward_loss(victim, x, y)[1] == forward_loss(victim.copy(), x, y)[1]


def test_bit_gradient_structure(victim, blobs):
    x, y = blobs[1].batch(64, 0)
    grads = bit_gradients(victim, x, y)
    for layer, g in enumerate(grads.bits):
        assert g.shape == (victim.codes[layer].size, 8)
        assert np.allclose(g[:, 7], -128 * g[:, 0])
        assert np.allclose(g[:, 3], 8 * g[:, 0])
    dead = np.flatnonzero(grads.weights[0].reshape(-1) == 0)
    if dead.size:
        assert (grads.bits[0][dead] == 0).all()


def test_bit_gradient_predicts_small_flips(victim, blobs):
    """An LSB flip changes the loss by about its bit gradient (first order)."""
    x, y = blobs[1].batch(128, 0)
    grads = bit_gradients(victim, x, y)
    g = grads.bits[2][:, 0]
    w = int(np.argmax(np.abs(g)))
    old = victim.get_bit(2, w, 0)
    m = victim.copy()
    m.flip_bit(2, w, 0)
    actual = forward_loss(m, x, y)[1] - grads.loss
    predicted = g[w] * (1 - 2 * old)
    assert actual == pytest.approx(predicted, rel=0.1)


# -- checkpoints -------------------------------------------------------------------

@pytest.mark.parametrize("n_q", [4, 8, 12])
def test_checkpoint_round_trip(tmp_path, n_q):
    train, _ = make_dataset("tiny_images", 3, 120, seed=0)
    q = quantize(train_float(cnn_spec(1, 8, 2, 3), train, epochs=1), n_q)
    q.meta = {"dataset": {"kind": "tiny_images"}}
    path = tmp_path / "m.qnn"
    save_qnn(q, path)
    raw = path.read_bytes()
    assert raw[:4] == b"QNN1"
    loaded = load_qnn(path)
    assert all(np.array_equal(a, b) for a, b in zip(q.codes, loaded.codes))
    assert all(np.array_equal(a, b) for a, b in zip(q.biases, loaded.biases))
    assert loaded.scales == q.scales and loaded.n_q == n_q and loaded.meta == q.meta
    save_qnn(loaded, path)
    assert path.read_bytes() == raw


def test_checkpoint_rejects_garbage(tmp_path, victim):
    path = tmp_path / "m.qnn"
    path.write_bytes(b"NOPE")
    with pytest.raises(ValueError, match="not a QNN"):
        load_qnn(path)
    save_qnn(victim, path)
    path.write_bytes(path.read_bytes() + b"\0")
    with pytest.raises(ValueError, match="trailing"):
        load_qnn(path)
    save_qnn(victim, path)
    raw = path.read_bytes()
    n = struct.unpack("<I", raw[4:8])[0]
    head = raw[8:8 + n].replace(b'"format_version": "1.0"', b'"format_version": "3.0"')
    path.write_bytes(raw[:4] + struct.pack("<I", len(head)) + head + raw[8 + n:])
    with pytest.raises(ValueError, match="format_version"):
        load_qnn(path)


def test_victim_recipe_is_plain_dict():
    assert set(VICTIM_RECIPE) == {"epochs", "lr", "weight_decay", "batch_size"}
