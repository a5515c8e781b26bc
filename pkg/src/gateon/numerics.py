"""Dense numerics: activations, loss, batch norm and the seeded generator.

Arrays are plain ``numpy.ndarray``; 2-D arrays are ``(rows, cols)`` in
row-major order. Float64 is the default working precision; float32 can be
selected per network for speed.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractViolation

DEFAULT_DTYPE = np.float64
BN_EPS = 1e-5
BN_MOMENTUM = 0.9


class Rng:
    """Seeded generator with independent named sub-streams.

    Backed by numpy's counter-based Philox bit generator keyed through a
    ``SeedSequence``; both are specified bit-for-bit by numpy, so a given
    ``(seed, *stream)`` yields the same numbers on every platform.
    """

    def __init__(self, seed: int, *stream: int):
        self.seed = int(seed)
        self.stream = tuple(int(s) for s in stream)
        seq = np.random.SeedSequence([self.seed & 0xFFFFFFFFFFFFFFFF, *self.stream])
        self.gen = np.random.Generator(np.random.Philox(seq))

    def child(self, *stream: int) -> "Rng":
        return Rng(self.seed, *self.stream, *stream)

    def normal(self, size, scale: float = 1.0, dtype=DEFAULT_DTYPE) -> np.ndarray:
        return (self.gen.standard_normal(size) * scale).astype(dtype, copy=False)

    def uniform(self, low: float = 0.0, high: float = 1.0, size=None):
        return self.gen.uniform(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self.gen.permutation(n)

    def integers(self, low: int, high: int, size=None):
        return self.gen.integers(low, high, size)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ContractViolation(f"matmul shape mismatch: {a.shape} x {b.shape}")
    return a @ b


def rectified_tanh(z):
    """max(0, tanh(z)); the gate nonlinearity, range [0, 1)."""
    return np.maximum(np.tanh(z), 0.0)


def rectified_tanh_grad(z):
    t = np.tanh(z)
    return np.where(z > 0, 1.0 - t * t, 0.0)


def relu(z):
    return np.maximum(z, 0.0)


def relu_grad(z):
    return (z > 0).astype(np.result_type(z, np.float32))


def identity(z):
    return z


def identity_grad(z):
    return np.ones_like(z)


ACTIVATIONS = {
    "relu": (relu, relu_grad),
    "identity": (identity, identity_grad),
    "tanh": (np.tanh, lambda z: 1.0 - np.tanh(z) ** 2),
}


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def softmax_cross_entropy(logits: np.ndarray, labels) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over the batch and its gradient w.r.t. the logits."""
    logits = np.atleast_2d(logits)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    n, c = logits.shape
    if labels.shape[0] != n:
        raise ContractViolation(f"{labels.shape[0]} labels for batch of {n}")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ContractViolation(f"label out of range [0, {c})")
    logp = log_softmax(logits)
    rows = np.arange(n)
    loss = float(-logp[rows, labels].mean())
    dlogits = np.exp(logp)
    dlogits[rows, labels] -= 1.0
    dlogits /= n
    return loss, dlogits


def per_sample_cross_entropy(logits: np.ndarray, labels) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    return -log_softmax(logits)[np.arange(len(labels)), labels]


def batch_norm_forward(x, gamma, beta, running_mean, running_var, training: bool,
                       momentum: float = BN_MOMENTUM, eps: float = BN_EPS):
    """Normalize columns of ``x``.

    Returns ``(out, cache)``. In training mode ``running_mean`` and
    ``running_var`` are updated in place (``running = momentum * running +
    (1 - momentum) * batch``, unbiased variance for the running estimate).
    """
    if training:
        n = x.shape[0]
        if n < 2:
            raise ContractViolation("batch norm needs a batch of at least 2 in training mode")
        mean = x.mean(axis=0)
        var = x.var(axis=0)
        running_mean *= momentum
        running_mean += (1.0 - momentum) * mean
        running_var *= momentum
        running_var += (1.0 - momentum) * var * n / (n - 1)
    else:
        mean, var = running_mean, running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean) * inv_std
    out = gamma * xhat + beta
    return out, (xhat, inv_std, gamma, training)


def batch_norm_backward(dout, cache):
    """Gradients ``(dx, dgamma, dbeta)`` for :func:`batch_norm_forward`."""
    xhat, inv_std, gamma, training = cache
    dgamma = (dout * xhat).sum(axis=0)
    dbeta = dout.sum(axis=0)
    dxhat = dout * gamma
    if not training:
        return dxhat * inv_std, dgamma, dbeta
    n = dout.shape[0]
    dx = (inv_std / n) * (n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
    return dx, dgamma, dbeta


def check_finite(name: str, *arrays) -> None:
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise ContractViolation(f"non-finite values in {name}")
