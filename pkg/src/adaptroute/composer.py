"""Combining the adapter bank under a set of per-adapter weights.

wavg             sum_t w_t * delta_t(x)           (output averaging)
merge-per-input  (sum_t w_t * dW_t) x, dW rebuilt for every input
merge-static     one dW per layer from fixed weights, reused for all inputs
lower-bound      all weights 1
upper-bound      only the adapter of the known task
centroid         softmax of cosine similarity between the base encoder's
                 pooled state and per-task mean training representations

Because each low-rank path is linear in its input, wavg and
merge-per-input are the same function; the second is kept as a check on
the first.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .adapters import AdapterBank, TaskAdapter, adapter_delta
from .autodiff import Tensor
from .backbone import Backbone, Overlay, encode
from .errors import ConfigError, ContractError, DimensionError

MODES = ("wavg", "merge-per-input", "merge-static", "lower-bound", "upper-bound", "centroid")
LEARNED_MODES = ("wavg", "merge-per-input", "merge-static")


@dataclass
class CompositionMode:
    kind: str = "wavg"
    static_weights: np.ndarray | None = None  # (L, T), merge-static only

    def __post_init__(self):
        if self.kind not in MODES:
            raise ConfigError(f"composition mode must be one of {MODES}, got {self.kind!r}")


def _column(z, t: int, x_ndim: int):
    """Weight of adapter ``t`` shaped to broadcast against an input of rank ``x_ndim``."""
    if isinstance(z, Tensor):
        if z.ndim == 1:
            return z[t]
        return z[:, t].reshape((z.shape[0],) + (1,) * (x_ndim - 1))
    z = np.asarray(z, dtype=np.float64)
    if z.ndim == 1:
        return float(z[t])
    return z[:, t].reshape((z.shape[0],) + (1,) * (x_ndim - 1))


def _check_len(bank: AdapterBank, z) -> None:
    n = z.shape[-1]
    if n != len(bank):
        raise DimensionError(f"routing vector has {n} entries for {len(bank)} adapters")


def compose_wavg(bank: AdapterBank, z, x, layer: int, target: str) -> Tensor:
    """Weighted sum of every adapter's output at (layer, target)."""
    x = ad.as_tensor(x)
    _check_len(bank, z)
    total = None
    for t, adapter in enumerate(bank.adapters):
        term = adapter_delta(adapter.pairs[(layer, target)], x) * _column(z, t, x.ndim)
        total = term if total is None else total + term
    return total


def merged_weight(bank: AdapterBank, weights, layer: int, target: str) -> Tensor:
    """sum_t w_t * dW_t; (d, d) for a weight vector, (B, d, d) for per-input weights."""
    _check_len(bank, weights)
    total = None
    for t, adapter in enumerate(bank.adapters):
        w = _column(weights, t, 3)
        term = adapter.pairs[(layer, target)].delta_weight() * w
        total = term if total is None else total + term
    return total


def compose_merge(bank: AdapterBank, weights, x, layer: int, target: str, merged: Tensor | None = None) -> Tensor:
    """Apply the merged weight update to ``x``; pass ``merged`` to reuse a precomputed one."""
    x = ad.as_tensor(x)
    dw = merged if merged is not None else merged_weight(bank, weights, layer, target)
    dwt = ad.transpose(dw, tuple(range(dw.ndim - 2)) + (dw.ndim - 1, dw.ndim - 2))
    if dw.ndim == 3 and x.ndim == 2:
        return (x.reshape(x.shape[0], 1, x.shape[1]) @ dwt).reshape(x.shape)
    return x @ dwt


def baseline_weights(kind: str, num_tasks: int, task_id: int | None = None, similarities=None) -> np.ndarray:
    if kind == "lower-bound":
        return np.ones(num_tasks)
    if kind == "upper-bound":
        if task_id is None:
            raise ContractError("upper-bound composition needs a task id")
        w = np.zeros(num_tasks)
        w[task_id - 1] = 1.0
        return w
    if kind == "centroid":
        if similarities is None:
            raise ContractError("centroid composition needs similarity scores")
        s = np.asarray(similarities, dtype=np.float64)
        e = np.exp(s - s.max(axis=-1, keepdims=True))
        return e / e.sum(axis=-1, keepdims=True)
    raise ConfigError(f"unknown baseline {kind!r}")


def compose_baseline(kind: str, bank: AdapterBank, x, layer: int, target: str,
                     task_id: int | None = None, similarities=None) -> Tensor:
    if kind == "upper-bound":
        if task_id is None:
            raise ContractError("upper-bound composition needs a task id")
        return adapter_delta(bank[task_id].pairs[(layer, target)], x)
    return compose_wavg(bank, baseline_weights(kind, len(bank), task_id, similarities), x, layer, target)


# -- overlays ---------------------------------------------------------------

class SingleAdapterOverlay(Overlay):
    """One adapter, optionally in training mode (adapter-path dropout)."""

    def __init__(self, adapter: TaskAdapter, hidden_dim: int, training: bool = False,
                 rng: np.random.Generator | None = None):
        self.adapter = adapter
        self.num_layers = adapter.num_layers
        self.hidden_dim = hidden_dim
        self.training = training
        self.rng = rng

    def layer(self, index, h_cls):
        pairs = self.adapter.pairs
        return lambda target, x: adapter_delta(pairs[(index, target)], x, self.training, self.rng)


WeightsFn = Callable[[int, Tensor], "Tensor | np.ndarray"]


class WeightedOverlay(Overlay):
    """Compose the whole bank with weights supplied per layer by ``weights_fn``.

    The weights actually used are kept in ``routing`` (layer -> array).
    """

    def __init__(self, bank: AdapterBank, num_layers: int, hidden_dim: int, weights_fn: WeightsFn,
                 kind: str = "wavg"):
        if kind not in ("wavg", "merge-per-input", "merge-static"):
            raise ConfigError(f"weighted overlay cannot realise {kind!r}")
        self.bank = bank
        self.num_layers = num_layers
        self.hidden_dim = hidden_dim
        self.weights_fn = weights_fn
        self.kind = kind
        self.routing: dict[int, np.ndarray] = {}
        self._static: dict[tuple[int, str], Tensor] = {}

    def layer(self, index, h_cls):
        z = self.weights_fn(index, h_cls)
        self.routing[index] = z.data if isinstance(z, Tensor) else np.asarray(z)
        bank = self.bank
        if self.kind == "wavg":
            return lambda target, x: compose_wavg(bank, z, x, index, target)
        if self.kind == "merge-per-input":
            return lambda target, x: compose_merge(bank, z, x, index, target)

        def static(target, x):
            key = (index, target)
            if key not in self._static:
                with ad.no_grad():
                    self._static[key] = merged_weight(bank, z, index, target)
            return compose_merge(bank, z, x, index, target, merged=self._static[key])

        return static


def fixed_weights(weights) -> WeightsFn:
    """Weights that do not depend on the input: (T,) for every layer or (L, T) per layer."""
    w = np.asarray(weights, dtype=np.float64)
    return (lambda i, h: w[i]) if w.ndim == 2 else (lambda i, h: w)


# -- centroid (task-vector) routing ------------------------------------------

def pooled_base(backbone: Backbone, tokens: np.ndarray, batch_size: int = 128) -> np.ndarray:
    out = []
    with ad.no_grad():
        for s in range(0, len(tokens), batch_size):
            state, _ = encode(backbone, tokens[s:s + batch_size])
            out.append(state.pooled.data)
    return np.concatenate(out) if out else np.zeros((0, backbone.config.hidden_dim))


def task_centroid(backbone: Backbone, train_tokens: np.ndarray) -> np.ndarray:
    """Mean pooled base-encoder representation over a task's training inputs."""
    return pooled_base(backbone, train_tokens).mean(axis=0)


def cosine_similarities(h: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    hn = h / np.maximum(np.linalg.norm(h, axis=-1, keepdims=True), 1e-12)
    cn = centroids / np.maximum(np.linalg.norm(centroids, axis=-1, keepdims=True), 1e-12)
    return hn @ cn.T


def centroid_weights(backbone: Backbone, tokens: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    return baseline_weights("centroid", len(centroids), similarities=cosine_similarities(
        pooled_base(backbone, tokens), centroids))
