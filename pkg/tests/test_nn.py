import math

import numpy as np
import pytest

from herdcast.nn import (DropoutPlan, LstmModel, DEFAULT_HIDDEN, cross_entropy, grad_check, loss_and_backward,
                         lstm_forward, numeric_gradient, predict_proba, scaled_widths, softmax)


def _sig(x):
    return 1.0 / (1.0 + math.exp(-x))


def test_scaled_widths():
    assert scaled_widths(1.0) == DEFAULT_HIDDEN
    assert scaled_widths(0.25) == (64, 7, 4)
    with pytest.raises(ValueError):
        scaled_widths(0.0)


def test_zero_weights_give_uniform_rows(rng):
    m = LstmModel.initialize(4, (6, 3, 2), seed=0)
    for v in m.params.values():
        v[...] = 0.0
    logits = lstm_forward(m, rng.normal(size=(25, 4))).logits
    assert logits.shape == (25, 5)
    np.testing.assert_allclose(softmax(logits), 0.2)


def test_one_step_cell_oracle():
    m = LstmModel.initialize(1, (1,), n_classes=2, seed=0, lstm_dropout=0.0, inter_layer_dropout=0.0)
    for k in ("W0", "U0"):
        m.params[k][...] = 0.5
    m.params["b0"][...] = 0.0
    m.params["Wd"][...] = [[1.0, -1.0]]
    m.params["bd"][...] = 0.0
    res = lstm_forward(m, np.array([[1.0]]))
    # by hand: i=f=o=sigmoid(0.5), g=tanh(0.5), c = i*g, h = o*tanh(c)
    c = _sig(0.5) * math.tanh(0.5)
    h = _sig(0.5) * math.tanh(c)
    np.testing.assert_allclose(res.logits[0], [h, -h], rtol=0, atol=1e-15)


def test_probability_rows(rng):
    m = LstmModel.initialize(48, (16, 5, 4), seed=1)
    p = softmax(lstm_forward(m, rng.normal(size=(7, 25, 48))).logits)
    np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-12)
    assert np.all((p > 0) & (p < 1))


def test_inference_deterministic_and_dropout_free(rng, tiny_model):
    X = rng.normal(size=(3, 8, 4))
    a = lstm_forward(tiny_model, X).logits
    b = lstm_forward(tiny_model, X).logits
    assert a.tobytes() == b.tobytes()
    np.testing.assert_array_equal(predict_proba(tiny_model, X), softmax(a[:, -1]))
    m = tiny_model.copy()
    m.lstm_dropout = m.inter_layer_dropout = 0.0
    c = lstm_forward(m, X, DropoutPlan.train(3)).logits
    assert c.tobytes() == a.tobytes()


def test_train_mode_masks_change_output(rng, tiny_model):
    m = tiny_model.copy()
    m.lstm_dropout = 0.5
    X = rng.normal(size=(3, 8, 4))
    assert not np.array_equal(lstm_forward(m, X, DropoutPlan.train(1)).logits, lstm_forward(m, X).logits)


def test_rejects_bad_input(tiny_model):
    with pytest.raises(ValueError):
        lstm_forward(tiny_model, np.full((5, 4), np.nan))
    with pytest.raises(ValueError):
        lstm_forward(tiny_model, np.zeros((5, 3)))
    with pytest.raises(ValueError):
        loss_and_backward(tiny_model, np.zeros((0, 5, 4)), np.zeros(0, dtype=int))


def test_cross_entropy_limits():
    big = np.full((1, 3, 5), -1e3)
    big[0, -1, 2] = 1e3
    loss, _ = cross_entropy(big, np.array([2]))
    assert loss == 0.0
    loss, _ = cross_entropy(np.zeros((4, 3, 5)), np.array([0, 1, 2, 4]))
    assert loss == pytest.approx(math.log(5), abs=1e-12)


def test_dense_bias_gradient_closed_form(rng, tiny_model):
    X, y = rng.normal(size=(6, 5, 4)), rng.integers(0, 5, 6)
    _, grads = loss_and_backward(tiny_model, X, y)
    p = softmax(lstm_forward(tiny_model, X).logits[:, -1])
    expected = (p - np.eye(5)[y]).mean(axis=0)
    np.testing.assert_allclose(grads["bd"], expected, atol=1e-15)


@pytest.mark.parametrize("steps", ["final", "all"])
def test_grad_check_tiny(rng, tiny_model, steps):
    X, y = rng.normal(size=(3, 5, 4)), rng.integers(0, 5, 3)
    assert grad_check(tiny_model, X, y, eps=1e-2, extrapolate=True, steps=steps) < 1e-5
    assert grad_check(tiny_model, X, y, eps=1e-5) < 1e-3


def test_grad_check_under_dropout_masks(rng, tiny_model):
    # gradients are exact for the sampled masks: replay the same masks for the numeric check
    m = tiny_model.copy()
    m.lstm_dropout, m.inter_layer_dropout = 0.3, 0.2
    X, y = rng.normal(size=(2, 5, 4)), np.array([1, 3])
    _, grads = loss_and_backward(m, X, y, DropoutPlan.train(5))

    def loss_at(delta):
        m.params["W1"][0, 0] += delta
        res = lstm_forward(m, X, DropoutPlan.train(5))
        m.params["W1"][0, 0] -= delta
        return cross_entropy(res.logits, y)[0]

    num = (loss_at(1e-6) - loss_at(-1e-6)) / 2e-6
    assert grads["W1"][0, 0] == pytest.approx(num, rel=1e-5, abs=1e-10)


def test_zero_input_gives_zero_input_weight_gradient(tiny_model):
    _, grads = loss_and_backward(tiny_model, np.zeros((2, 5, 4)), np.array([1, 2]))
    H = tiny_model.hidden_sizes[0]
    assert np.all(grads["W0"][:, :H] == 0.0)


def test_central_difference_error_shrinks_quadratically(rng, tiny_model):
    X, y = rng.normal(size=(2, 5, 4)), np.array([0, 4])
    _, grads = loss_and_backward(tiny_model, X, y)
    exact = grads["U1"].reshape(-1)[5]
    err = [abs(numeric_gradient(tiny_model, X, y, "U1", 5, eps) - exact) for eps in (4e-2, 2e-2)]
    assert 3.0 < err[0] / err[1] < 5.0


def test_model_validate_and_copy(tiny_model):
    tiny_model.validate()
    c = tiny_model.copy()
    c.params["W0"][0, 0] += 1
    assert c.params["W0"][0, 0] != tiny_model.params["W0"][0, 0]
    bad = tiny_model.copy()
    bad.params["Wd"] = np.zeros((3, 5))
    with pytest.raises(ValueError):
        bad.validate()
    assert tiny_model.params["b0"][6:12].tolist() == [1.0] * 6
