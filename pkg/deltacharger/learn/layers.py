"""
Layers with explicit backprop

Each layer caches what its backward pass needs during ``forward`` and
returns the input gradient from ``backward`` while filling ``grads``.
Convolutions use the correlation convention, valid padding and stride 1.
"""

from typing import Dict

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from deltacharger.errors import ShapeMismatch


class Layer:
    def __init__(self):
        self.params: Dict[str, np.ndarray] = {}
        self.grads: Dict[str, np.ndarray] = {}
        self.buffers: Dict[str, np.ndarray] = {}
        self.cache = None

    def forward(self, x: np.ndarray, train: bool) -> np.ndarray:
        raise NotImplementedError

    def backward(self, dout: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def spec(self) -> str:
        raise NotImplementedError


class Dense(Layer):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator = None):
        super().__init__()
        self.n_in, self.n_out = n_in, n_out
        rng = rng or np.random.default_rng(0)
        bound = np.sqrt(6.0 / n_in)
        self.params = {
            "W": rng.uniform(-bound, bound, size=(n_in, n_out)),
            "b": np.zeros(n_out),
        }

    def forward(self, x, train):
        if x.ndim != 2 or x.shape[1] != self.n_in:
            raise ShapeMismatch(f"dense({self.n_in},{self.n_out}) got input {x.shape}")
        self.cache = x
        return x @ self.params["W"] + self.params["b"]

    def backward(self, dout):
        x = self.cache
        self.grads = {"W": x.T @ dout, "b": dout.sum(axis=0)}
        return dout @ self.params["W"].T

    def spec(self):
        return f"dense({self.n_in},{self.n_out})"


class Conv3x3(Layer):
    def __init__(self, in_ch: int, out_ch: int, rng: np.random.Generator = None):
        super().__init__()
        self.in_ch, self.out_ch = in_ch, out_ch
        rng = rng or np.random.default_rng(0)
        bound = np.sqrt(6.0 / (in_ch * 9))
        self.params = {
            "W": rng.uniform(-bound, bound, size=(out_ch, in_ch, 3, 3)),
            "b": np.zeros(out_ch),
        }

    def forward(self, x, train):
        if x.ndim != 4 or x.shape[1] != self.in_ch or x.shape[2] < 3 or x.shape[3] < 3:
            raise ShapeMismatch(f"conv3x3({self.in_ch},{self.out_ch}) got input {x.shape}")
        windows = sliding_window_view(x, (3, 3), axis=(2, 3))
        self.cache = (x.shape, windows)
        out = np.tensordot(windows, self.params["W"], axes=([1, 4, 5], [1, 2, 3]))
        return out.transpose(0, 3, 1, 2) + self.params["b"][None, :, None, None]

    def backward(self, dout):
        shape, windows = self.cache
        self.grads = {
            "W": np.tensordot(dout, windows, axes=([0, 2, 3], [0, 2, 3])),
            "b": dout.sum(axis=(0, 2, 3)),
        }
        padded = np.pad(dout, ((0, 0), (0, 0), (2, 2), (2, 2)))
        full = sliding_window_view(padded, (3, 3), axis=(2, 3))
        flipped = self.params["W"][:, :, ::-1, ::-1]
        dx = np.tensordot(full, flipped, axes=([1, 4, 5], [0, 2, 3]))
        return dx.transpose(0, 3, 1, 2)

    def spec(self):
        return f"conv3x3({self.in_ch},{self.out_ch})"


class BatchNorm(Layer):
    """Per-feature for (N, D) input, per-channel for (N, C, H, W) input"""

    def __init__(self, dim: int, eps: float = 1e-5, momentum: float = 0.1):
        super().__init__()
        self.dim, self.eps, self.momentum = dim, eps, momentum
        self.params = {"gamma": np.ones(dim), "beta": np.zeros(dim)}
        self.buffers = {"running_mean": np.zeros(dim), "running_var": np.ones(dim)}

    def _axes(self, x):
        if x.ndim == 2 and x.shape[1] == self.dim:
            return (0,), (1, -1)
        if x.ndim == 4 and x.shape[1] == self.dim:
            return (0, 2, 3), (1, -1, 1, 1)
        raise ShapeMismatch(f"bn({self.dim}) got input {x.shape}")

    def forward(self, x, train):
        axes, view = self._axes(x)
        gamma = self.params["gamma"].reshape(view)
        beta = self.params["beta"].reshape(view)

        if not train:
            mean = self.buffers["running_mean"].reshape(view)
            var = self.buffers["running_var"].reshape(view)
            return gamma * (x - mean) / np.sqrt(var + self.eps) + beta

        if x.shape[0] < 2:
            raise ShapeMismatch("batch norm needs at least 2 samples in train mode")
        count = x.size // self.dim
        mean = x.mean(axis=axes, keepdims=True)
        var = x.var(axis=axes, keepdims=True)
        inv_std = 1.0 / np.sqrt(var + self.eps)
        x_hat = (x - mean) * inv_std
        self.cache = (x_hat, inv_std, axes, view, count)

        m = self.momentum
        self.buffers["running_mean"] = (1 - m) * self.buffers["running_mean"] + m * mean.reshape(-1)
        unbiased = var.reshape(-1) * count / (count - 1)
        self.buffers["running_var"] = (1 - m) * self.buffers["running_var"] + m * unbiased
        return gamma * x_hat + beta

    def backward(self, dout):
        x_hat, inv_std, axes, view, count = self.cache
        self.grads = {
            "gamma": (dout * x_hat).sum(axis=axes),
            "beta": dout.sum(axis=axes),
        }
        dx_hat = dout * self.params["gamma"].reshape(view)
        return (inv_std / count) * (
            count * dx_hat
            - dx_hat.sum(axis=axes, keepdims=True)
            - x_hat * (dx_hat * x_hat).sum(axis=axes, keepdims=True)
        )

    def spec(self):
        return f"bn({self.dim})"


class ReLU(Layer):
    def forward(self, x, train):
        self.cache = x > 0
        return np.where(self.cache, x, 0.0)

    def backward(self, dout):
        return np.where(self.cache, dout, 0.0)

    def spec(self):
        return "relu"


class Flatten(Layer):
    def forward(self, x, train):
        self.cache = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dout):
        return dout.reshape(self.cache)

    def spec(self):
        return "flatten"


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


def cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean negative log-likelihood of log-softmax and its gradient w.r.t. the logits"""
    labels = np.asarray(labels, dtype=int)
    n = logits.shape[0]
    logp = log_softmax(logits)
    loss = -logp[np.arange(n), labels].mean()
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    return float(loss), grad / n
