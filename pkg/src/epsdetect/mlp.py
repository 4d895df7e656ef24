"""Small fully-connected network with hand-rolled reverse-mode gradients.

Parameters live in a single flat float64 vector so that optimizers and
finite-difference checks can treat the network as a plain function
R^p -> R^p. The forward pass caches activations; ``backward`` consumes the
cache and an upstream gradient and returns gradients with respect to both
the flat parameter vector and the input batch.

A network with no hidden layers degenerates to a pure affine map (no
nonlinearity is applied to the output layer).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["Mlp", "AdamState", "adam_step"]


@dataclass(frozen=True)
class Mlp:
    """Architecture descriptor: ``widths`` = [input, hidden..., output], tanh hidden units."""

    widths: tuple

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if len(self.widths) < 2 or any(w < 1 for w in self.widths):
            raise ValueError(f"widths must be >= 2 positive layer sizes, got {self.widths}")

    @property
    def n_params(self) -> int:
        return sum(
            (fan_in + 1) * fan_out for fan_in, fan_out in zip(self.widths[:-1], self.widths[1:])
        )

    def init(self, rng: np.random.Generator) -> np.ndarray:
        """Scaled Gaussian weights (std 1/sqrt(fan_in)), zero biases."""
        chunks = []
        for fan_in, fan_out in zip(self.widths[:-1], self.widths[1:]):
            w = rng.standard_normal((fan_in, fan_out)) / np.sqrt(fan_in)
            chunks.append(w.ravel())
            chunks.append(np.zeros(fan_out))
        return np.concatenate(chunks)

    def unpack(self, params: np.ndarray):
        """Split the flat vector into [(W, b), ...] views."""
        params = np.asarray(params, dtype=np.float64)
        if params.shape != (self.n_params,):
            raise ValueError(f"expected {self.n_params} parameters, got {params.shape}")
        layers = []
        pos = 0
        for fan_in, fan_out in zip(self.widths[:-1], self.widths[1:]):
            w = params[pos : pos + fan_in * fan_out].reshape(fan_in, fan_out)
            pos += fan_in * fan_out
            b = params[pos : pos + fan_out]
            pos += fan_out
            layers.append((w, b))
        return layers

    def forward(self, params: np.ndarray, x: np.ndarray) -> np.ndarray:
        out, _ = self.forward_cached(params, x)
        return out

    def forward_cached(self, params: np.ndarray, x: np.ndarray):
        """Evaluate the network on a batch x of shape (n, widths[0]).

        Returns:
            (output of shape (n, widths[-1]), cache for ``backward``).
        """
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.widths[0]:
            raise ValueError(f"expected input (n, {self.widths[0]}), got {x.shape}")
        layers = self.unpack(params)
        acts = [x]
        h = x
        for i, (w, b) in enumerate(layers):
            h = h @ w + b
            if i < len(layers) - 1:  # linear output layer
                h = np.tanh(h)
            acts.append(h)
        return h, acts

    def backward(self, params: np.ndarray, cache, dout: np.ndarray):
        """Backpropagate ``dout`` (n, widths[-1]) through the cached forward pass.

        Returns:
            (flat parameter gradient, gradient with respect to the input batch).
        """
        layers = self.unpack(params)
        grads = [None] * len(layers)
        delta = np.asarray(dout, dtype=np.float64)
        for i in reversed(range(len(layers))):
            w, _ = layers[i]
            a_in = cache[i]
            a_out = cache[i + 1]
            if i < len(layers) - 1:  # undo tanh: a_out = tanh(pre)
                delta = delta * (1.0 - a_out * a_out)
            grads[i] = (a_in.T @ delta, delta.sum(axis=0))
            delta = delta @ w.T
        flat = np.concatenate([np.concatenate([gw.ravel(), gb]) for gw, gb in grads])
        return flat, delta


@dataclass
class AdamState:
    """First/second moment buffers for adaptive moment estimation."""

    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(m=np.zeros(n), v=np.zeros(n), step=0)


def adam_step(
    params: np.ndarray,
    grad: np.ndarray,
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> np.ndarray:
    """One descent step; ascend by passing the negated gradient."""
    state.step += 1
    state.m = beta1 * state.m + (1.0 - beta1) * grad
    state.v = beta2 * state.v + (1.0 - beta2) * grad * grad
    mhat = state.m / (1.0 - beta1**state.step)
    vhat = state.v / (1.0 - beta2**state.step)
    return params - lr * mhat / (np.sqrt(vhat) + eps)
