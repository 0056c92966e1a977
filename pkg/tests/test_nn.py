from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from chemlm.nn import (
    AdamState,
    LengthMismatch,
    NonFiniteInput,
    RnnState,
    ShapeMismatch,
    adam_step,
    bptt_gradients,
    clip_gradients,
    cross_entropy_loss,
    forward_sequence,
    global_norm,
    init_params,
    lstm_forward,
    lstm_step,
    sequence_loss,
    softmax,
)


def small_model(seed=0, vocab=6, sizes=(8, 8), scale=0.3):
    return init_params(vocab, list(sizes), np.random.default_rng(seed), scale=scale)


# --------------------------------------------------------------------------
# forward


def test_init_shapes_and_forget_bias():
    p = init_params(5, [7, 3], np.random.default_rng(0))
    assert p["lstm0.w_input"].shape == (28, 5) and p["lstm0.w_recurrent"].shape == (28, 7)
    assert p["lstm1.w_input"].shape == (12, 7) and p["out.weight"].shape == (5, 3)
    assert np.all(p["lstm0.bias"][7:14] == 1.0) and np.all(p["lstm0.bias"][:7] == 0.0)
    assert np.abs(p["lstm0.w_input"]).max() <= 0.08


def test_zero_weights_keep_state_zero():
    p = {k: np.zeros_like(v) for k, v in small_model().items()}
    state = RnnState.zeros([8, 8])
    for x in np.eye(6):
        state, y = lstm_forward(p, state, x)
        assert all(np.all(h == 0) for h in state.h) and all(np.all(c == 0) for c in state.c)


def _scalar_lstm(w, u, b, xs):
    """One-unit LSTM by hand: w, u, b are 4-tuples in gate order (i, f, g, o)."""
    sig = lambda z: 1.0 / (1.0 + math.exp(-z))
    h = c = 0.0
    out = []
    for x in xs:
        zi, zf, zg, zo = (w[k] * x + u[k] * h + b[k] for k in range(4))
        i, f, g, o = sig(zi), sig(zf), math.tanh(zg), sig(zo)
        c = f * c + i * g
        h = o * math.tanh(c)
        out.append((h, c))
    return out


def test_one_unit_lstm_matches_hand_computation():
    w, u, b = (0.5, -0.3, 0.8, 0.2), (0.1, 0.4, -0.6, 0.7), (0.0, 1.0, 0.1, -0.2)
    p = {
        "lstm0.w_input": np.array(w)[:, None],
        "lstm0.w_recurrent": np.array(u)[:, None],
        "lstm0.bias": np.array(b),
        "out.weight": np.array([[1.0]]),
        "out.bias": np.array([0.0]),
    }
    state = RnnState.zeros([1])
    expected = _scalar_lstm(w, u, b, [1.0] * 6)
    for h_ref, c_ref in expected:
        state, y = lstm_forward(p, state, np.array([1.0]))
        assert state.h[0][0] == pytest.approx(h_ref, abs=1e-12)
        assert state.c[0][0] == pytest.approx(c_ref, abs=1e-12)
        assert y[0] == pytest.approx(h_ref, abs=1e-12)


def test_recursion_equals_unrolled():
    p = small_model(1)
    x = np.random.default_rng(2).integers(0, 6, (3, 9))
    logits, _ = forward_sequence(p, x)
    state = RnnState.zeros([8, 8], batch=3)
    for t in range(9):
        state, y = lstm_step(p, state, None, symbols=x[:, t])
        np.testing.assert_allclose(y, logits[:, t], atol=1e-12)
    # the dense one-hot path agrees with the index gather
    state = RnnState.zeros([8, 8])
    for t in range(9):
        state, y = lstm_forward(p, state, np.eye(6)[x[0, t]])
    np.testing.assert_allclose(y, logits[0, -1], atol=1e-12)


def test_shape_mismatch():
    p = small_model()
    with pytest.raises(ShapeMismatch):
        lstm_forward(p, RnnState.zeros([8, 8]), np.ones(5))
    with pytest.raises(ShapeMismatch):
        lstm_forward(p, RnnState.zeros([8]), np.ones(6))
    with pytest.raises(ShapeMismatch):
        bptt_gradients(p, np.zeros((2, 3), int), np.zeros((2, 4), int))


def test_dropout_zero_train_equals_eval_and_masks_are_seeded():
    p = small_model()
    x = np.random.default_rng(3).integers(0, 6, (4, 7))
    a, _ = forward_sequence(p, x, 0.0, np.random.default_rng(1))
    b, _ = forward_sequence(p, x)
    np.testing.assert_array_equal(a, b)
    c, _ = forward_sequence(p, x, 0.5, np.random.default_rng(9))
    d, _ = forward_sequence(p, x, 0.5, np.random.default_rng(9))
    np.testing.assert_array_equal(c, d)
    assert not np.allclose(c, b)


# --------------------------------------------------------------------------
# softmax and loss


def test_softmax_examples():
    np.testing.assert_allclose(softmax(np.zeros(3)), [1 / 3] * 3, atol=1e-15)
    y = np.array([1.0, 2.0, 3.0])
    direct = [math.exp(v) / sum(math.exp(u) for u in y) for v in y]
    np.testing.assert_allclose(softmax(y), direct, rtol=1e-14)
    cold = softmax(np.array([0.1, 0.5, 0.2]), temperature=1e-3)
    assert cold[1] == pytest.approx(1.0)


def test_softmax_rejects_nonfinite():
    with pytest.raises(NonFiniteInput):
        softmax(np.array([0.0, np.nan]))
    with pytest.raises(NonFiniteInput):
        softmax(np.array([np.inf, 0.0]))


@given(arrays(np.float64, st.integers(2, 40), elements=st.floats(-500, 500)),
       st.floats(0.05, 5.0), st.floats(-100, 100))
@settings(max_examples=300)
def test_softmax_sums_to_one_and_is_shift_invariant(y, t, shift):
    p = softmax(y, t)
    assert abs(p.sum() - 1.0) <= 1e-9
    assert np.all(p >= 0)
    np.testing.assert_allclose(softmax(y + shift, t), p, atol=1e-12)


def test_cross_entropy_examples():
    assert cross_entropy_loss([np.array([0.0, 1.0])] * 3, [1, 1, 1]) == 0.0
    assert cross_entropy_loss([np.full(5, 0.2)] * 4, [0, 1, 2, 3]) == pytest.approx(math.log(5))
    rng = np.random.default_rng(4)
    probs = [softmax(rng.normal(size=7)) for _ in range(10)]
    targets = rng.integers(0, 7, 10).tolist()
    scalar = -sum(math.log(float(p[k])) for p, k in zip(probs, targets)) / 10
    assert cross_entropy_loss(probs, targets) == pytest.approx(scalar, rel=1e-14)
    with pytest.raises(LengthMismatch):
        cross_entropy_loss(probs, targets[:-1])


def test_sequence_loss_agrees_with_softmax_route():
    p = small_model(5)
    x = np.random.default_rng(6).integers(0, 6, (2, 5))
    y = np.roll(x, -1, axis=1)
    logits, _ = forward_sequence(p, x)
    route = cross_entropy_loss([softmax(v) for v in logits.reshape(-1, 6)], y.reshape(-1).tolist())
    assert sequence_loss(logits, y) == pytest.approx(route, rel=1e-12)


# --------------------------------------------------------------------------
# gradients


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    denom = np.linalg.norm(a) + np.linalg.norm(b)
    return float(np.linalg.norm(a - b) / denom) if denom > 0 else 0.0


def finite_difference(params, x, y, dropout=0.0, seed=0, eps=1e-5):
    def loss():
        rng = np.random.default_rng(seed) if dropout else None
        return sequence_loss(forward_sequence(params, x, dropout, rng)[0], y)

    grads = {}
    for name, p in params.items():
        g = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + eps
            up = loss()
            p[idx] = old - eps
            down = loss()
            p[idx] = old
            g[idx] = (up - down) / (2 * eps)
        grads[name] = g
    return grads


@pytest.mark.parametrize("dropout", [0.0, 0.3])
def test_gradients_match_finite_differences(dropout):
    params = small_model(7)
    rng = np.random.default_rng(8)
    x = rng.integers(0, 6, (2, 6))
    y = rng.integers(0, 6, (2, 6))
    _, analytic = bptt_gradients(params, x, y, dropout, np.random.default_rng(0) if dropout else None)
    numeric = finite_difference(params, x, y, dropout, seed=0)
    for name in params:
        assert relative_error(analytic[name], numeric[name]) < 1e-4, name


def test_duplicated_batch_leaves_mean_gradient_unchanged():
    p = small_model(2)
    rng = np.random.default_rng(3)
    x, y = rng.integers(0, 6, (2, 5)), rng.integers(0, 6, (2, 5))
    l1, g1 = bptt_gradients(p, x, y)
    l2, g2 = bptt_gradients(p, np.concatenate([x, x]), np.concatenate([y, y]))
    assert l1 == pytest.approx(l2, rel=1e-12)
    for k in g1:
        np.testing.assert_allclose(g1[k], g2[k], rtol=1e-10, atol=1e-14)


def test_perfect_model_has_near_zero_gradients():
    p = small_model(4)
    p["out.bias"][:] = -30.0
    p["out.bias"][2] = 30.0
    x = np.full((2, 8), 2)
    loss, grads = bptt_gradients(p, x, x)
    assert loss < 1e-20
    assert global_norm(grads) < 1e-20


# --------------------------------------------------------------------------
# clipping and ADAM


def test_clip_examples():
    g = {"a": np.array([6.0, 8.0])}  # norm 10
    clipped, norm = clip_gradients(g, 5.0)
    assert norm == 10.0
    np.testing.assert_allclose(clipped["a"], [3.0, 4.0])
    small = {"a": np.array([0.0, 3.0])}
    same, _ = clip_gradients(small, 5.0)
    np.testing.assert_array_equal(same["a"], small["a"])


@given(arrays(np.float64, 12, elements=st.floats(-1e3, 1e3)), st.floats(0.01, 100))
def test_clip_bounds_norm_and_keeps_direction(v, max_norm):
    g = {"a": v[:5], "b": v[5:].reshape(7, 1)}
    clipped, before = clip_gradients(g, max_norm)
    after = global_norm(clipped)
    assert after <= max_norm + 1e-9 and after <= before + 1e-9
    if before > 0:
        flat = np.concatenate([clipped["a"], clipped["b"].ravel()])
        np.testing.assert_allclose(flat * before, v * after, atol=1e-6 * max(1.0, before))


def test_adam_zero_gradient_leaves_params():
    p = {"w": np.array([1.0, -2.0])}
    state = AdamState.for_params(p)
    adam_step(state, p, {"w": np.zeros(2)})
    np.testing.assert_array_equal(p["w"], [1.0, -2.0])
    assert state.step == 1


def test_adam_first_step_is_lr_times_sign():
    p = {"w": np.array([1.0, 1.0, 1.0])}
    state = AdamState.for_params(p, lr=0.001)
    adam_step(state, p, {"w": np.array([0.3, -7.0, 1e-3])})
    np.testing.assert_allclose(p["w"] - 1.0, [-0.001, 0.001, -0.001], rtol=1e-4)


def _adam_scalar(x, grad_fn, steps, lr=0.05, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    xs = []
    for t in range(1, steps + 1):
        g = grad_fn(x)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        x -= lr * (m / (1 - b1**t)) / (math.sqrt(v / (1 - b2**t)) + eps)
        xs.append(x)
    return xs


def test_adam_on_quadratic_matches_scalar_oracle_and_descends():
    a = 3.0
    grad = lambda x: a * x
    oracle = _adam_scalar(10.0, grad, 100)
    p = {"x": np.array([10.0])}
    state = AdamState.for_params(p, lr=0.05)
    losses = []
    for t in range(100):
        adam_step(state, p, {"x": grad(p["x"])})
        assert p["x"][0] == pytest.approx(oracle[t], rel=1e-12)
        losses.append(0.5 * a * p["x"][0] ** 2)
    assert all(b < a_ for a_, b in zip(losses[5:], losses[6:]))
