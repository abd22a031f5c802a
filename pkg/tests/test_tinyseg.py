import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import gradcheck_case, max_relative_error, numerical_grads, scalar_adam_trace
from omniseg.tinyseg import (
    BCE_EPS,
    AdamState,
    CheckpointNotFoundError,
    CorruptCheckpointError,
    DimensionMismatchError,
    ModelParams,
    NumericError,
    TENSOR_NAMES,
    adam_step,
    backward,
    batch_loss,
    bce_loss,
    ema_update,
    embed_text,
    forward,
    forward_batch,
    init_params,
    load_params,
    save_params,
    zeros_like,
)


def _scalar_params(x):
    z = np.zeros
    return ModelParams(z((1, 1)), z((1, 5)), z((1, 1)), z(1), z(1), np.asarray(float(x)))


def test_init_deterministic_and_zero_biases():
    a, b = init_params(5, 14), init_params(5, 14)
    assert a.equals(b)
    assert not a.equals(init_params(6, 14))
    assert not a.b1.any() and a.b2 == 0.0
    a.check()


def test_init_weight_spread():
    w = init_params(0, 10000, embed_dim=16).token_embeddings
    s = math.sqrt(6.0 / (10000 + 16))
    assert abs(w.std() - s / math.sqrt(3)) < 0.2 * s / math.sqrt(3)
    assert np.abs(w).max() <= s


def test_init_rejects_empty_vocab():
    with pytest.raises(ValueError):
        init_params(0, 0)


def test_embed_text():
    p = init_params(0, 3, embed_dim=2)
    p.token_embeddings = np.array([[1.0, 2.0], [3.0, -1.0], [0.5, 0.5]])
    np.testing.assert_array_equal(embed_text([1], p), [3.0, -1.0])
    np.testing.assert_array_equal(embed_text([1, 1], p), [3.0, -1.0])
    np.testing.assert_allclose(embed_text([1, 2], p), [1.75, -0.25])
    with pytest.raises(ValueError):
        embed_text([], p)
    with pytest.raises(ValueError):
        embed_text([3], p)


def test_zero_network_outputs_half():
    p = zeros_like(init_params(0, 14))
    probs, _ = forward(np.random.default_rng(0).random((6, 7, 3)), [1, 2], p)
    assert probs.shape == (6, 7)
    np.testing.assert_array_equal(probs, 0.5)


def test_forward_hand_computed():
    p = ModelParams(
        token_embeddings=np.array([[1.0], [2.0]]),
        W1=np.array([[1.0, 0.0, 0.0, 0.5, -2.0]]),
        U1=np.array([[0.5]]),
        b1=np.array([0.1]),
        w2=np.array([2.0]),
        b2=np.asarray(-1.0),
    )
    image = np.array(
        [[[0.2, 0.4, 0.6], [1.0, 0.0, 0.0]], [[0.0, 0.0, 0.0], [0.5, 0.5, 0.5]]]
    )
    sig = lambda z: 1 / (1 + math.exp(-z))
    # text bias 0.5 * 1.5 + 0.1 = 0.85; pre-activations 1.05, -0.15, 1.35, -0.15
    expected = [[sig(1.1), sig(-1.0)], [sig(1.7), sig(-1.0)]]
    probs, _ = forward(image, [0, 1], p)
    np.testing.assert_allclose(probs, expected, rtol=0, atol=1e-15)


def test_forward_rejects_nan():
    p = init_params(0, 14)
    p.W1[0, 0] = np.nan
    with pytest.raises(NumericError):
        forward(np.zeros((2, 2, 3)), [0], p)


@given(st.integers(1, 9), st.integers(1, 9), st.integers(0, 1000))
@settings(max_examples=30, deadline=None)
def test_forward_shape_and_open_range(h, w, seed):
    rng = np.random.default_rng(seed)
    p = init_params(seed, 14).map(lambda t: 5 * t)
    probs, _ = forward(rng.random((h, w, 3)), [int(rng.integers(14))], p)
    assert probs.shape == (h, w)
    assert np.all((probs > 0) & (probs < 1))


def test_bce_anchors():
    assert abs(bce_loss(np.full((3, 4), 0.5), np.eye(3, 4)) - math.log(2)) < 1e-12
    y = np.array([[1.0, 0.0]])
    assert abs(bce_loss(y, y) - (-math.log(1 - BCE_EPS))) < 1e-15
    expected = (-math.log(0.9) - math.log(0.8)) / 2
    assert abs(bce_loss(np.array([[0.9, 0.2]]), y) - expected) < 1e-12
    assert abs(expected - 0.164252) < 1e-6
    with pytest.raises(ValueError):
        bce_loss(np.zeros((2, 2)), np.zeros((2, 3)))


def test_bce_weights():
    p = np.array([[0.9, 0.2]])
    y = np.array([[1.0, 0.0]])
    assert bce_loss(p, y, np.array([[1.0, 0.0]])) == pytest.approx(-math.log(0.9) / 2)


@given(st.integers(0, 10_000))
@settings(max_examples=50)
def test_bce_non_negative(seed):
    rng = np.random.default_rng(seed)
    assert bce_loss(rng.random((3, 3)), rng.random((3, 3)) < 0.5) >= 0


@pytest.mark.parametrize("seed", range(5))
def test_backward_matches_finite_differences(seed):
    params, images, tokens, targets = gradcheck_case(seed)
    _, cache = forward_batch(images, tokens, params)
    analytic = backward(cache, targets, params)

    def loss(p):
        return batch_loss(forward_batch(images, tokens, p)[0], targets)

    numeric = numerical_grads(loss, params.copy())
    for name in TENSOR_NAMES:
        assert max_relative_error(getattr(analytic, name), numeric[name]) < 1e-4, name


def test_unused_token_rows_get_zero_gradient():
    params, images, _, targets = gradcheck_case(11)
    tokens = [[2, 3], [3], [2, 2, 3]]
    _, cache = forward_batch(images, tokens, params)
    g = backward(cache, targets, params)
    unused = [i for i in range(params.vocab_size) if i not in (2, 3)]
    assert not g.token_embeddings[unused].any()
    assert g.token_embeddings[[2, 3]].any()


def test_saturated_fit_has_tiny_gradient():
    p = zeros_like(init_params(0, 14))
    p.b2 = np.asarray(-40.0)  # predicts background everywhere, prob ~ 4e-18
    images = np.random.default_rng(0).random((2, 4, 4, 3))
    _, cache = forward_batch(images, [[0], [1]], p)
    g = backward(cache, np.zeros((2, 4, 4)), p)
    assert all(np.abs(t).max() < 1e-12 for t in g.tensors().values())


def test_backward_rejects_stale_cache():
    params, images, tokens, targets = gradcheck_case(2)
    _, cache = forward_batch(images, tokens, params)
    with pytest.raises(ValueError):
        backward(cache, targets[:, :2], params)
    with pytest.raises(ValueError):
        backward(cache, targets, init_params(0, 14, hidden=8))


def test_adam_zero_grad_and_first_step():
    p = init_params(0, 14)
    st0 = AdamState.zeros(p)
    q, st1 = adam_step(p, zeros_like(p), st0)
    assert q.equals(p) and st1.step == 1
    g = p.map(lambda t: np.where(np.arange(t.size).reshape(t.shape) % 2, 0.3, -2.0))
    q, _ = adam_step(p, g, st0, lr=1e-4)
    for name in TENSOR_NAMES:
        np.testing.assert_allclose(getattr(q, name) - getattr(p, name), -1e-4 * np.sign(getattr(g, name)), atol=1e-6)


def test_adam_matches_scalar_trace():
    grads = [0.5, -1.5, 2.0]
    expected = scalar_adam_trace(1.0, grads, lr=0.1)
    p, state = _scalar_params(1.0), AdamState.zeros(_scalar_params(0.0))
    for g, want in zip(grads, expected):
        gp = zeros_like(p)
        gp.b2 = np.asarray(g)
        p, state = adam_step(p, gp, state, lr=0.1)
        assert abs(float(p.b2) - want) < 1e-12
    assert state.step == 3


def test_ema_extremes_and_geometric_decay():
    t, s = init_params(0, 14), init_params(1, 14)
    assert ema_update(t, s, 1.0).equals(t)
    assert ema_update(t, s, 0.0).equals(s)
    teacher, student = _scalar_params(1.0), _scalar_params(0.0)
    for k in range(1, 51):
        teacher = ema_update(teacher, student, 0.9)
        assert abs(float(teacher.b2) - 0.9**k) < 1e-9
    with pytest.raises(ValueError):
        ema_update(t, init_params(0, 13), 0.5)


@given(st.floats(0, 1), st.integers(0, 100))
@settings(max_examples=40)
def test_ema_is_convex(alpha, seed):
    t, s = init_params(seed, 14), init_params(seed + 1, 14)
    out = ema_update(t, s, alpha)
    for name in TENSOR_NAMES:
        a, b, o = getattr(t, name), getattr(s, name), getattr(out, name)
        assert np.all(o >= np.minimum(a, b) - 1e-15) and np.all(o <= np.maximum(a, b) + 1e-15)


def test_checkpoint_round_trip(tmp_path):
    p = init_params(3, 14).map(lambda t: t + 1e-17)
    save_params(p, tmp_path / "ck.json")
    assert load_params(tmp_path / "ck.json", vocab_size=14).equals(p)


def test_checkpoint_errors(tmp_path):
    path = tmp_path / "ck.json"
    save_params(init_params(3, 14), path)
    with pytest.raises(DimensionMismatchError):
        load_params(path, vocab_size=12)
    path.write_text(path.read_text()[:200])
    with pytest.raises(CorruptCheckpointError):
        load_params(path)
    with pytest.raises(CheckpointNotFoundError):
        load_params(tmp_path / "missing.json")
