"""Minimal dense-network kernel: forward, exact backward, Adam, and soft
target updates. ReLU hidden layers, linear output, optional residual skips
every few hidden layers (plain very deep stacks optimize poorly)."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class ShapeError(Exception):
    pass


@dataclass
class DenseNet:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    residual_every: int = 0  # 0 disables skips

    @classmethod
    def create(
        cls, sizes: list[int], rng: np.random.Generator, residual_every: int = 0
    ) -> "DenseNet":
        weights, biases = [], []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            scale = np.sqrt(2.0 / fan_in)
            weights.append(rng.normal(0.0, scale, size=(fan_in, fan_out)))
            biases.append(np.zeros(fan_out))
        return cls(weights=weights, biases=biases, residual_every=residual_every)

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def parameter_count(self) -> int:
        return sum(w.size for w in self.weights) + sum(b.size for b in self.biases)

    def parameters(self) -> list[np.ndarray]:
        return self.weights + self.biases

    def copy(self) -> "DenseNet":
        return DenseNet(
            weights=[w.copy() for w in self.weights],
            biases=[b.copy() for b in self.biases],
            residual_every=self.residual_every,
        )

    def _skip_source(self, layer: int, shapes_ok) -> int | None:
        """Hidden layer whose activation is re-added at `layer`, if any."""
        if self.residual_every <= 0 or layer == self.n_layers - 1:
            return None
        if (layer + 1) % self.residual_every != 0:
            return None
        src = layer - self.residual_every
        if src < 0 or not shapes_ok(src, layer):
            return None
        return src

    def forward(self, x: np.ndarray):
        """Returns (output, cache). Input shape (B, d_in) or (d_in,)."""
        x = np.asarray(x, dtype=float)
        squeeze = x.ndim == 1
        h = np.atleast_2d(x)
        if h.shape[1] != self.weights[0].shape[0]:
            raise ShapeError(
                f"input dim {h.shape[1]} != expected {self.weights[0].shape[0]}"
            )
        inputs, pre_acts, hidden, skip_src = [], [], [], []
        for layer, (W, b) in enumerate(zip(self.weights, self.biases)):
            inputs.append(h)
            z = h @ W + b
            pre_acts.append(z)
            last = layer == self.n_layers - 1
            h = z if last else np.maximum(z, 0.0)
            src = self._skip_source(
                layer, lambda s, l: hidden[s].shape == h.shape
            )
            if src is not None:
                h = h + hidden[src]
            skip_src.append(src)
            hidden.append(h)
        cache = (inputs, pre_acts, skip_src)
        out = h[0] if squeeze else h
        return out, cache

    def backward(self, cache, grad_out: np.ndarray):
        """Exact gradients. Returns (weight grads, bias grads, input grad)."""
        inputs, pre_acts, skip_src = cache
        g = np.atleast_2d(np.asarray(grad_out, dtype=float))
        gw = [None] * self.n_layers
        gb = [None] * self.n_layers
        pending: dict[int, np.ndarray] = {}
        for layer in range(self.n_layers - 1, -1, -1):
            if layer in pending:
                g = g + pending.pop(layer)
            if skip_src[layer] is not None:
                src = skip_src[layer]
                pending[src] = pending.get(src, 0.0) + g
            last = layer == self.n_layers - 1
            gz = g if last else g * (pre_acts[layer] > 0.0)
            gw[layer] = inputs[layer].T @ gz
            gb[layer] = gz.sum(axis=0)
            g = gz @ self.weights[layer].T
        return gw, gb, g


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def for_params(cls, params: list[np.ndarray]) -> "AdamState":
        return cls(m=[np.zeros_like(p) for p in params], v=[np.zeros_like(p) for p in params])


def adam_step(
    params: list[np.ndarray],
    grads: list[np.ndarray],
    state: AdamState,
    lr: float,
    weight_decay: float = 0.0,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """In-place Adam update with bias correction."""
    state.t += 1
    t = state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        g = g + weight_decay * p
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        mh = m / (1 - beta1**t)
        vh = v / (1 - beta2**t)
        p -= lr * mh / (np.sqrt(vh) + eps)


def soft_update(target: DenseNet, source: DenseNet, tau: float) -> None:
    """target <- tau * source + (1 - tau) * target, elementwise, in place."""
    for tp, sp in zip(target.parameters(), source.parameters()):
        tp *= 1.0 - tau
        tp += tau * sp
