"""Small dense neural kernel: layers with hand-written backward passes, the
pairwise and multi-label losses, Adam, finite-difference gradient checks and
a binary checkpoint format.

Row-vector convention throughout: a batch is an ``(n, d)`` array and a linear
layer computes ``x @ W + b`` with ``W`` of shape ``(d_in, d_out)``.
"""
from __future__ import annotations

import io
import struct
from dataclasses import dataclass

import numpy as np

CE_EPS = 1e-12


class NumericError(FloatingPointError):
    """A non-finite value appeared during a forward or backward pass."""


@dataclass
class TrainHyper:
    learning_rate: float = 0.01
    weight_decay: float = 5e-4
    epochs: int = 150
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        for name in ("learning_rate", "beta1", "beta2", "eps"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")


class Parameter:
    """A trainable array with its gradient and Adam state."""

    def __init__(self, value, name=""):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)
        self.m = np.zeros_like(self.value)
        self.v = np.zeros_like(self.value)
        self.step = 0
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad[...] = 0.0

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


def glorot(rng, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


class Linear:
    def __init__(self, d_in, d_out, rng, bias=True, name="linear"):
        self.W = Parameter(glorot(rng, d_in, d_out), name + ".W")
        self.b = Parameter(np.zeros((1, d_out)), name + ".b") if bias else None
        self._x = None

    def parameters(self):
        return [self.W] if self.b is None else [self.W, self.b]

    def forward(self, x):
        self._x = x
        y = x @ self.W.value
        if self.b is not None:
            y = y + self.b.value
        return y

    def backward(self, g):
        self.W.grad += self._x.T @ g
        if self.b is not None:
            self.b.grad += g.sum(axis=0, keepdims=True)
        return g @ self.W.value.T


class ReLU:
    def __init__(self):
        self._mask = None

    def parameters(self):
        return []

    def forward(self, x):
        self._mask = x > 0
        return np.where(self._mask, x, 0.0)

    def backward(self, g):
        return np.where(self._mask, g, 0.0)


class Sigmoid:
    def __init__(self):
        self._y = None

    def parameters(self):
        return []

    def forward(self, x):
        self._y = sigmoid(x)
        return self._y

    def backward(self, g):
        return g * self._y * (1.0 - self._y)


class Sequential:
    def __init__(self, *layers):
        self.layers = list(layers)

    def parameters(self):
        return [p for layer in self.layers for p in layer.parameters()]

    def forward(self, x):
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, g):
        for layer in reversed(self.layers):
            g = layer.backward(g)
        return g


def relu(x):
    return np.maximum(x, 0.0)


def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    # two branches keep exp() from overflowing
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def softmax(z, axis=-1):
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def softmax_backward(y, g, axis=-1):
    """Gradient through softmax given its output ``y`` and upstream ``g``."""
    return y * (g - (g * y).sum(axis=axis, keepdims=True))


def log_sigmoid(z):
    # log sigma(z) = -log(1 + exp(-z)), stable for both signs
    return -np.logaddexp(0.0, -z)


def ce_loss(p_hat, y):
    """Binary cross entropy of a likelihood score against a 0/1 label."""
    p = np.clip(np.asarray(p_hat, dtype=np.float64), CE_EPS, 1.0 - CE_EPS)
    y = np.asarray(y, dtype=np.float64)
    return -(y * np.log(p) + (1.0 - y) * np.log(1.0 - p))


def softmax_ce(logits, y):
    """Summed CE loss of two-class logits, with its gradient w.r.t. the logits.

    The likelihood fed to :func:`ce_loss` is the softmax entry of class 1.
    """
    logits = np.atleast_2d(logits)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    prob = softmax(logits)
    loss = float(ce_loss(prob[:, 1], y).sum())
    onehot = np.stack([1.0 - y, y], axis=1)
    # log-softmax derivative; exact where the clamp is inactive
    return loss, prob - onehot


def weighted_bce_loss(logits, y, w=None):
    """Per-pair multi-label loss averaged over intents.

    ``(1/P) * sum_p -w_p (y_p log s(z_p) + (1-y_p) log(1-s(z_p)))`` with the log
    terms evaluated through ``log_sigmoid``. Accepts a single length-P vector
    or an ``(n, P)`` batch (returns one value per row).
    """
    z = np.asarray(logits, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    P = z.shape[-1]
    w = np.ones(P) if w is None else np.asarray(w, dtype=np.float64)
    if np.any(w <= 0):
        raise ValueError(f"intent weights must be positive, got {w}")
    terms = -w * (y * log_sigmoid(z) + (1.0 - y) * log_sigmoid(-z))
    return terms.sum(axis=-1) / P


def weighted_bce_grad(logits, y, w=None):
    z = np.asarray(logits, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    P = z.shape[-1]
    w = np.ones(P) if w is None else np.asarray(w, dtype=np.float64)
    return w * (sigmoid(z) - y) / P


class Adam:
    """Adam with bias correction; weight decay enters as an L2 term on the gradient."""

    def __init__(self, params, hyper: TrainHyper):
        self.params = list(params)
        self.hyper = hyper

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self):
        adam_step(self.params, self.hyper)


def adam_step(params, hyper: TrainHyper):
    b1, b2 = hyper.beta1, hyper.beta2
    for p in params:
        g = p.grad
        if hyper.weight_decay:
            g = g + hyper.weight_decay * p.value
        p.step += 1
        p.m = b1 * p.m + (1 - b1) * g
        p.v = b2 * p.v + (1 - b2) * g * g
        m_hat = p.m / (1 - b1 ** p.step)
        v_hat = p.v / (1 - b2 ** p.step)
        p.value -= hyper.learning_rate * m_hat / (np.sqrt(v_hat) + hyper.eps)


def check_finite(*arrays, where=""):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NumericError(f"non-finite values {where}".strip())


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst: str
    n_checked: int

    def passed(self, tol):
        return self.max_rel_error < tol


def _rel_err(a, b):
    return abs(a - b) / max(abs(a), abs(b), 1e-8)


def grad_check(loss_fn, arrays, analytic, h=1e-5, n_samples=None, rng=None):
    """Compare analytic gradients against central finite differences.

    ``loss_fn()`` evaluates a scalar with the current contents of ``arrays``
    (which are perturbed in place); ``analytic`` holds the matching gradients.
    With ``n_samples`` only that many randomly chosen coordinates per array are
    probed.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    worst, worst_at, count = 0.0, "", 0
    for k, (x, g) in enumerate(zip(arrays, analytic)):
        flat = x.reshape(-1)
        idx = np.arange(flat.size)
        if n_samples is not None and flat.size > n_samples:
            idx = rng.choice(flat.size, size=n_samples, replace=False)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            up = loss_fn()
            flat[i] = orig - h
            down = loss_fn()
            flat[i] = orig
            num = (up - down) / (2 * h)
            err = _rel_err(num, g.reshape(-1)[i])
            count += 1
            if err > worst:
                worst, worst_at = err, f"array {k} index {i}"
    return GradCheckReport(worst, worst_at, count)


def grad_check_module(module, x, tolerance=1e-4, h=1e-5, seed=0):
    """Check a layer (or Sequential) with loss ``sum(r * module(x))`` for a fixed random ``r``.

    Gradients w.r.t. the input and every parameter are checked.
    """
    rng = np.random.default_rng(seed)
    x = np.array(x, dtype=np.float64)
    out = module.forward(x)
    r = rng.normal(size=out.shape)
    params = module.parameters()
    for p in params:
        p.zero_grad()
    gx = module.backward(r)
    analytic = [gx] + [p.grad.copy() for p in params]
    arrays = [x] + [p.value for p in params]

    def loss():
        return float((module.forward(x) * r).sum())

    report = grad_check(loss, arrays, analytic, h=h)
    return report


# -- checkpoints -------------------------------------------------------------

CKPT_MAGIC = b"MIERCKPT"
CKPT_VERSION = 1


def save_checkpoint(params, path, config: bytes = b""):
    """Write parameters as: magic, version, config blob, then per tensor a
    name, a shape header and row-major little-endian float64 data."""
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<III", CKPT_VERSION, len(params), len(config)))
    buf.write(config)
    for p in params:
        name = p.name.encode()
        value = np.atleast_2d(p.value)
        buf.write(struct.pack("<I", len(name)))
        buf.write(name)
        buf.write(struct.pack("<II", *value.shape))
        buf.write(value.astype("<f8").tobytes(order="C"))
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def read_checkpoint(path):
    """Return ``(config_bytes, [(name, array), ...])``."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version, n, clen = struct.unpack_from("<III", data, 8)
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 20
    config = data[off:off + clen]
    off += clen
    tensors = []
    for _ in range(n):
        (nlen,) = struct.unpack_from("<I", data, off)
        off += 4
        name = data[off:off + nlen].decode()
        off += nlen
        rows, cols = struct.unpack_from("<II", data, off)
        off += 8
        arr = np.frombuffer(data, dtype="<f8", count=rows * cols, offset=off)
        off += 8 * rows * cols
        tensors.append((name, arr.reshape(rows, cols).astype(np.float64)))
    return config, tensors


def load_checkpoint(params, path):
    """Load tensors into ``params`` in order; shapes must match exactly."""
    config, tensors = read_checkpoint(path)
    if len(tensors) != len(params):
        raise ValueError(f"{path}: {len(tensors)} tensors, model has {len(params)}")
    for p, (name, arr) in zip(params, tensors):
        if np.atleast_2d(p.value).shape != arr.shape:
            raise ValueError(
                f"{path}: tensor {name!r} has shape {arr.shape}, expected {p.value.shape}")
        p.value[...] = arr.reshape(p.value.shape)
    return config
