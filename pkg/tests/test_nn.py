import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mier import nn


def test_activation_values():
    assert nn.softmax(np.array([0.0, 0.0])).tolist() == [0.5, 0.5]
    assert nn.sigmoid(np.array(0.0)) == 0.5
    assert nn.sigmoid(np.array([-800.0, 800.0])).tolist() == [0.0, 1.0]


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 20), st.integers(2, 6), st.integers(0, 2**31))
def test_softmax_rows_sum_to_one(n, k, seed):
    z = np.random.default_rng(seed).normal(scale=30, size=(n, k))
    assert np.allclose(nn.softmax(z).sum(axis=1), 1.0, atol=1e-9)


def test_relu_backward_finite_differences(rng):
    x = rng.normal(size=(8, 5))
    x[np.abs(x) < 0.05] = 0.5  # stay away from the kink
    layer = nn.ReLU()
    rep = nn.grad_check_module(layer, x)
    assert rep.passed(1e-6)


@pytest.mark.parametrize("make", [
    lambda rng: nn.Linear(5, 3, rng),
    lambda rng: nn.Linear(5, 3, rng, bias=False),
    lambda rng: nn.Sigmoid(),
    lambda rng: nn.Sequential(nn.Linear(5, 4, rng), nn.ReLU(), nn.Linear(4, 2, rng)),
])
def test_layer_gradients(make, rng):
    rep = nn.grad_check_module(make(rng), rng.normal(size=(6, 5)))
    assert rep.passed(1e-4), rep


def test_softmax_backward_matches_fd(rng):
    z = rng.normal(size=(4, 3))
    r = rng.normal(size=(4, 3))
    analytic = nn.softmax_backward(nn.softmax(z), r)
    rep = nn.grad_check(lambda: float((nn.softmax(z) * r).sum()), [z], [analytic])
    assert rep.passed(1e-6)


def test_ce_loss_values():
    assert nn.ce_loss(0.5, 1) == pytest.approx(math.log(2), abs=1e-12)
    assert nn.ce_loss(1.0, 1) <= 1e-11
    assert nn.ce_loss(0.0, 0) <= 1e-11


@settings(max_examples=200, deadline=None)
@given(st.floats(1e-6, 1 - 1e-6), st.integers(0, 1))
def test_ce_loss_formula(p, y):
    want = -math.log(p) if y == 1 else -math.log(1 - p)
    assert float(nn.ce_loss(p, y)) == pytest.approx(want, rel=1e-12, abs=1e-12)
    assert nn.ce_loss(p, y) >= 0


def test_softmax_ce_gradient(rng):
    z = rng.normal(size=(7, 2))
    y = rng.integers(0, 2, size=7)
    loss, g = nn.softmax_ce(z, y)
    rep = nn.grad_check(lambda: nn.softmax_ce(z, y)[0], [z], [g])
    assert rep.passed(1e-6)
    want = sum(-math.log(nn.softmax(z[i])[y[i]]) for i in range(7))
    assert loss == pytest.approx(want, rel=1e-12)


def test_weighted_bce_values():
    got = nn.weighted_bce_loss(np.zeros(2), np.array([1, 0]), np.ones(2))
    assert got == pytest.approx(math.log(2), abs=1e-12)
    with pytest.raises(ValueError):
        nn.weighted_bce_loss(np.zeros(2), np.array([1, 0]), np.array([1.0, 0.0]))


def test_weighted_bce_p1_is_ce_of_sigmoid(rng):
    z = rng.normal(scale=5, size=1000)
    y = rng.integers(0, 2, size=1000)
    bce = nn.weighted_bce_loss(z[:, None], y[:, None])
    ce = nn.ce_loss(nn.sigmoid(z), y)
    assert np.max(np.abs(bce - ce)) < 1e-9


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 5), st.integers(0, 2**31))
def test_weighted_bce_matches_naive(P, seed):
    rng = np.random.default_rng(seed)
    z = rng.normal(scale=3, size=P)
    y = rng.integers(0, 2, size=P)
    w = rng.uniform(0.1, 3, size=P)
    naive = 0.0
    for p in range(P):
        s = 1 / (1 + math.exp(-z[p]))
        naive += -w[p] * (y[p] * math.log(s) + (1 - y[p]) * math.log(1 - s))
    assert nn.weighted_bce_loss(z, y, w) == pytest.approx(naive / P, abs=1e-9)


def test_weighted_bce_gradient(rng):
    z = rng.normal(size=(5, 3))
    y = rng.integers(0, 2, size=(5, 3)).astype(float)
    w = np.array([1.0, 2.0, 0.5])
    g = nn.weighted_bce_grad(z, y, w)
    rep = nn.grad_check(lambda: float(nn.weighted_bce_loss(z, y, w).sum()), [z], [g])
    assert rep.passed(1e-6)


def _scalar_adam(x, grad_fn, steps, lr, wd, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    for t in range(1, steps + 1):
        g = grad_fn(x) + wd * x
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        x = x - lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
    return x


def test_adam_matches_scalar_reference():
    hyper = nn.TrainHyper(learning_rate=0.1, weight_decay=0.01)
    p = nn.Parameter(np.array([[1.5, -2.0]]))
    for _ in range(3):
        # quadratic 0.5 * 3 * x^2
        p.grad[...] = 3.0 * p.value
        nn.adam_step([p], hyper)
    for i, x0 in enumerate([1.5, -2.0]):
        want = _scalar_adam(x0, lambda x: 3.0 * x, 3, 0.1, 0.01)
        assert p.value[0, i] == pytest.approx(want, abs=1e-12)


def test_adam_first_step_and_zero_grad():
    hyper = nn.TrainHyper(learning_rate=0.01, weight_decay=0.0)
    p = nn.Parameter(np.array([[0.3, -0.7]]))
    p.grad[...] = np.array([[2.0, -5.0]])
    nn.adam_step([p], hyper)
    assert np.allclose(p.value, [[0.29, -0.69]], atol=1e-8)
    q = nn.Parameter(np.array([[0.3]]))
    nn.adam_step([q], hyper)
    assert q.value[0, 0] == 0.3


def test_train_hyper_validation():
    with pytest.raises(ValueError):
        nn.TrainHyper(epochs=0)
    with pytest.raises(ValueError):
        nn.TrainHyper(learning_rate=0)


def test_check_finite():
    with pytest.raises(nn.NumericError):
        nn.check_finite(np.array([1.0, np.nan]))


def test_checkpoint_round_trip(tmp_path, rng):
    net = nn.Sequential(nn.Linear(4, 3, rng, name="a"), nn.ReLU(), nn.Linear(3, 2, rng, name="b"))
    nn.save_checkpoint(net.parameters(), tmp_path / "c.ckpt", b"cfg")
    other = nn.Sequential(nn.Linear(4, 3, np.random.default_rng(9)), nn.ReLU(),
                          nn.Linear(3, 2, np.random.default_rng(9)))
    assert nn.load_checkpoint(other.parameters(), tmp_path / "c.ckpt") == b"cfg"
    for a, b in zip(net.parameters(), other.parameters()):
        assert np.array_equal(a.value, b.value)
    wrong = nn.Sequential(nn.Linear(5, 3, rng), nn.ReLU(), nn.Linear(3, 2, rng))
    with pytest.raises(ValueError, match="shape"):
        nn.load_checkpoint(wrong.parameters(), tmp_path / "c.ckpt")
    (tmp_path / "bad").write_bytes(b"nope")
    with pytest.raises(ValueError):
        nn.read_checkpoint(tmp_path / "bad")
