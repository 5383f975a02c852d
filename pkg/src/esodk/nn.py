"""Small feed-forward networks with hand-written reverse-mode gradients.

Everything works on row batches: ``x`` may be ``(n_in,)`` or ``(batch, n_in)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

ACTIVATIONS = ("tanh", "identity")


@dataclass
class Layer:
    W: np.ndarray
    b: np.ndarray | None = None
    activation: str = "identity"

    def __post_init__(self):
        self.W = np.asarray(self.W, dtype=float)
        if self.W.ndim != 2:
            raise ValueError("layer weight must be a 2-D array")
        if self.b is not None:
            self.b = np.asarray(self.b, dtype=float)
            if self.b.shape != (self.W.shape[0],):
                raise ValueError(f"bias shape {self.b.shape} does not match W {self.W.shape}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def linear_no_bias(self) -> bool:
        return self.b is None and self.activation == "identity"

    def params(self) -> list[np.ndarray]:
        return [self.W] if self.b is None else [self.W, self.b]


@dataclass
class Mlp:
    layers: list[Layer] = field(default_factory=list)

    def __post_init__(self):
        for a, b in zip(self.layers, self.layers[1:]):
            if a.W.shape[0] != b.W.shape[1]:
                raise ValueError(f"layer dims do not chain: {a.W.shape} -> {b.W.shape}")

    @property
    def n_in(self) -> int:
        return self.layers[0].W.shape[1]

    @property
    def n_out(self) -> int:
        return self.layers[-1].W.shape[0]

    def params(self) -> list[np.ndarray]:
        return [p for layer in self.layers for p in layer.params()]

    def copy(self) -> "Mlp":
        return Mlp([Layer(l.W.copy(), None if l.b is None else l.b.copy(), l.activation)
                    for l in self.layers])

    @classmethod
    def build(cls, sizes, rng: np.random.Generator, hidden="tanh", bias=True) -> "Mlp":
        """Glorot-uniform network; hidden layers use ``hidden``, the output is linear."""
        layers = []
        for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            lim = np.sqrt(6.0 / (n_in + n_out))
            W = rng.uniform(-lim, lim, size=(n_out, n_in))
            last = i == len(sizes) - 2
            layers.append(Layer(W, np.zeros(n_out) if bias else None,
                                "identity" if last else hidden))
        return cls(layers)


def linear_no_bias(W) -> Layer:
    return Layer(np.asarray(W, dtype=float), None, "identity")


def forward(net: Mlp, x):
    """Return ``(output, cache)``; the cache holds each layer's input and output."""
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != net.n_in:
        raise ValueError(f"input width {x.shape[-1]} != network input {net.n_in}")
    h = x
    cache = []
    for layer in net.layers:
        a = h @ layer.W.T
        if layer.b is not None:
            a = a + layer.b
        out = np.tanh(a) if layer.activation == "tanh" else a
        cache.append((h, out))
        h = out
    return h, cache


def backward(net: Mlp, cache, cot):
    """Gradient of ``sum(cot * output)`` w.r.t. every parameter and the input.

    Returns ``(grads, input_cot)`` where ``grads`` is ordered like ``net.params()``.
    Batched inputs accumulate (sum) over the batch axis.
    """
    g = np.asarray(cot, dtype=float)
    if len(cache) != len(net.layers):
        raise ValueError("cache does not belong to this network")
    if g.shape != cache[-1][1].shape:
        raise ValueError(f"cotangent shape {g.shape} != output shape {cache[-1][1].shape}")
    per_layer = []
    for layer, (h_in, h_out) in zip(reversed(net.layers), reversed(cache)):
        if layer.activation == "tanh":
            g = g * (1.0 - h_out * h_out)
        if g.ndim == 1:
            dW = np.outer(g, h_in)
            db = g.copy()
        else:
            dW = g.T @ h_in
            db = g.sum(axis=0)
        per_layer.append([dW] if layer.b is None else [dW, db])
        g = g @ layer.W
    grads = [p for pair in reversed(per_layer) for p in pair]
    return grads, g


def sgd_step(params, grads, lr: float, velocity=None, momentum: float = 0.0):
    """In-place ``p -= lr * g`` (heavy-ball when ``momentum > 0``)."""
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        if momentum > 0.0:
            v = velocity[i]
            v *= momentum
            v -= lr * g
            p += v
        else:
            p -= lr * g
    return params


@dataclass
class MinMaxScaler:
    """Affine map of each column onto [-1, 1] (no clamping)."""

    min: np.ndarray
    max: np.ndarray

    def __post_init__(self):
        self.min = np.atleast_1d(np.asarray(self.min, dtype=float))
        self.max = np.atleast_1d(np.asarray(self.max, dtype=float))
        if np.any(self.max <= self.min):
            raise ValueError("scaler max must exceed min in every dimension")

    @classmethod
    def fit(cls, data) -> "MinMaxScaler":
        data = np.asarray(data, dtype=float)
        if data.ndim == 1:
            data = data[:, None]
        if data.shape[0] < 2:
            raise ValueError("MinMaxScaler.fit needs at least two samples")
        lo, hi = data.min(axis=0), data.max(axis=0)
        flat = hi - lo <= 0
        lo = np.where(flat, lo - 1e-6, lo)
        hi = np.where(flat, hi + 1e-6, hi)
        return cls(lo, hi)

    @property
    def gain(self) -> np.ndarray:
        """Linear part of the map (per-dimension slope)."""
        return 2.0 / (self.max - self.min)

    def apply(self, x):
        return (np.asarray(x, dtype=float) - self.min) * self.gain - 1.0

    def invert(self, y):
        return (np.asarray(y, dtype=float) + 1.0) / self.gain + self.min
