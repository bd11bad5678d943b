"""Per-layer routers trained from memory after the task stream.

Each layer has a linear map from its incoming [CLS] state to one logit per
adapter. Gumbel-sigmoid mode treats every adapter as an independent
relaxed Bernoulli gate; softmax mode makes adapters compete.

The relaxed gate sigma(log[sigma(z) u / ((1 - sigma(z)) (1 - u))] / tau) is
evaluated as sigma((z + log u - log(1 - u)) / tau): the log-odds of sigma(z)
is z, and this form stays finite for any finite z. Sampling happens only
while training; inference uses sigma(z / tau), the u = 1/2 point.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from . import tensorio
from .adapters import AdapterBank
from .autodiff import Tensor
from .backbone import Backbone, encode
from .composer import WeightedOverlay
from .errors import ConfigError, ContractError, RunError
from .memory import RouterView

RELAXATIONS = ("gumbel-sigmoid", "softmax")


@dataclass(frozen=True)
class RouterConfig:
    relaxation: str = "gumbel-sigmoid"
    temperature: float = 1.0
    lr: float = 3e-4
    epochs: int = 5
    batch_size: int = 8
    weight_decay: float = 0.01
    warmup_frac: float = 0.1
    u_eps: float = 1e-6

    def validate(self) -> "RouterConfig":
        if self.relaxation not in RELAXATIONS:
            raise ConfigError(f"router.relaxation must be one of {RELAXATIONS}, got {self.relaxation!r}")
        if not self.temperature > 0:
            raise ConfigError(f"router.temperature must be > 0, got {self.temperature}")
        if self.epochs < 0 or self.batch_size < 1 or self.lr <= 0:
            raise ConfigError("router.epochs >= 0, batch_size >= 1 and lr > 0 required")
        if not 0 < self.u_eps < 0.5:
            raise ConfigError("router.u_eps must be in (0, 0.5)")
        return self

    def to_dict(self) -> dict:
        return asdict(self)


class RouterStack:
    def __init__(self, num_layers: int, hidden_dim: int, num_tasks: int,
                 relaxation: str = "gumbel-sigmoid", temperature: float = 1.0, seed: int = 0,
                 u_eps: float = 1e-6):
        if relaxation not in RELAXATIONS:
            raise ConfigError(f"unknown relaxation {relaxation!r}")
        if not temperature > 0:
            raise ConfigError(f"temperature must be > 0, got {temperature}")
        self.num_layers = num_layers
        self.hidden_dim = hidden_dim
        self.num_tasks = num_tasks
        self.relaxation = relaxation
        self.temperature = temperature
        self.seed = seed
        self.u_eps = u_eps
        self.weights = [Tensor(np.zeros((num_tasks, hidden_dim))) for _ in range(num_layers)]
        self.biases = [Tensor(np.zeros(num_tasks)) for _ in range(num_layers)]

    @classmethod
    def from_config(cls, cfg: RouterConfig, num_layers: int, hidden_dim: int, num_tasks: int, seed: int):
        return cls(num_layers, hidden_dim, num_tasks, cfg.relaxation, cfg.temperature, seed, cfg.u_eps)

    def parameters(self) -> list[Tensor]:
        return [p for pair in zip(self.weights, self.biases) for p in pair]

    def set_trainable(self, flag: bool) -> None:
        for p in self.parameters():
            p.requires_grad = flag
            if not flag:
                p.grad = None

    def arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"layer{i}.weight"] = w.data
            out[f"layer{i}.bias"] = b.data
        return out

    def to_bytes(self) -> bytes:
        return tensorio.pack(self.arrays())[0]

    def save(self, path: Path) -> None:
        tensorio.save(path, self.arrays(), {
            "num_layers": self.num_layers, "hidden_dim": self.hidden_dim, "num_tasks": self.num_tasks,
            "relaxation": self.relaxation, "temperature": self.temperature, "seed": self.seed,
            "u_eps": self.u_eps,
        })

    @classmethod
    def load(cls, path: Path) -> "RouterStack":
        arrays, meta = tensorio.load(path)
        stack = cls(**meta)
        for i in range(stack.num_layers):
            stack.weights[i] = Tensor(arrays[f"layer{i}.weight"])
            stack.biases[i] = Tensor(arrays[f"layer{i}.bias"])
        return stack


def gumbel_sigmoid(z, u, temperature: float = 1.0):
    """Relaxed Bernoulli sample for logits ``z`` and uniforms ``u`` (numpy)."""
    z = np.asarray(z, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    return ad._sigmoid((z + np.log(u) - np.log1p(-u)) / temperature)


def route(stack: RouterStack, layer: int, h_cls, stochastic: bool = False,
          rng: np.random.Generator | None = None, u: np.ndarray | None = None) -> Tensor:
    """Routing weights (B, T) for the [CLS] states ``h_cls`` (B, d) entering ``layer``."""
    if not 0 <= layer < stack.num_layers:
        raise ContractError(f"layer {layer} out of range for {stack.num_layers} router layers")
    h = ad.as_tensor(h_cls)
    squeeze = h.ndim == 1
    if squeeze:
        h = h.reshape(1, -1)
    z = h @ stack.weights[layer].T + stack.biases[layer]
    tau = stack.temperature
    if stack.relaxation == "softmax":
        out = ad.softmax(z / tau if tau != 1.0 else z, axis=-1)
    else:
        if stochastic or u is not None:
            if u is None:
                if rng is None:
                    raise ContractError("stochastic routing needs an rng or explicit u")
                u = rng.random(z.shape)
            u = np.clip(np.broadcast_to(np.asarray(u, dtype=np.float64), z.shape), stack.u_eps, 1 - stack.u_eps)
            z = z + (np.log(u) - np.log1p(-u))
        out = ad.sigmoid(z / tau if tau != 1.0 else z)
    return out.reshape(-1) if squeeze else out


class RoutedOverlay(WeightedOverlay):
    """Compose the bank with weights from a router stack.

    ``u`` optionally fixes the uniform draws per layer (used by gradient checks).
    """

    def __init__(self, bank: AdapterBank, stack: RouterStack, kind: str = "wavg", stochastic: bool = False,
                 rng: np.random.Generator | None = None, u: dict[int, np.ndarray] | None = None):
        if len(bank) != stack.num_tasks:
            raise ContractError(f"router stack covers {stack.num_tasks} adapters, bank has {len(bank)}")
        self.stack = stack

        def weights(i, h):
            return route(stack, i, h, stochastic, rng, None if u is None else u.get(i))

        super().__init__(bank, stack.num_layers, stack.hidden_dim, weights, kind)


def router_loss(stack: RouterStack, backbone: Backbone, bank: AdapterBank, head, tokens, labels,
                stochastic: bool, rng=None, u=None) -> Tensor:
    overlay = RoutedOverlay(bank, stack, "wavg", stochastic, rng, u)
    _, logits = encode(backbone, tokens, overlay, head)
    return ad.cross_entropy(logits, labels)


def _frozen(bank: AdapterBank, head) -> bool:
    if any(bank.trainable_mask):
        return False
    params = head.parameters() if hasattr(head, "parameters") else [
        p for h in head.heads for p in h.parameters()]
    return not any(p.requires_grad for p in params)


def train_routers(stack: RouterStack, backbone: Backbone, bank: AdapterBank, head, view: RouterView,
                  cfg: RouterConfig) -> dict:
    """Fit the router weights on a memory view with everything else frozen.

    The loss is cross-entropy of the final logits under output averaging,
    with fresh uniform draws for every layer, component and step in
    Gumbel-sigmoid mode.
    """
    cfg.validate()
    if len(view) == 0:
        raise ContractError("router training view is empty")
    if not _frozen(bank, head):
        raise ContractError("adapters and classifier must be frozen before router training")
    n = len(view)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total = steps_per_epoch * cfg.epochs
    warmup = int(round(cfg.warmup_frac * total))
    rng = np.random.default_rng(np.random.SeedSequence([stack.seed, 4]))
    stochastic = stack.relaxation == "gumbel-sigmoid"
    stack.set_trainable(True)
    opt = ad.AdamW(stack.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    log = {"epoch_loss": []}
    step = 0
    try:
        for epoch in range(cfg.epochs):
            perm = rng.permutation(n)
            losses = []
            for s in range(0, n, cfg.batch_size):
                idx = perm[s:s + cfg.batch_size]
                loss = router_loss(stack, backbone, bank, head, view.tokens[idx], view.labels[idx], stochastic, rng)
                if not np.isfinite(loss.item()):
                    raise RunError(f"router loss diverged at epoch {epoch}")
                opt.zero_grad()
                loss.backward()
                opt.step(cfg.lr * ad.linear_warmup(step, total, warmup))
                step += 1
                losses.append(loss.item() * len(idx))
            log["epoch_loss"].append(float(np.sum(losses) / n))
    finally:
        stack.set_trainable(False)
    return log


def _routing_means(stack: RouterStack, backbone: Backbone, bank: AdapterBank, tokens: np.ndarray,
                   batch_size: int) -> np.ndarray:
    sums = np.zeros((stack.num_layers, stack.num_tasks))
    with ad.no_grad():
        for s in range(0, len(tokens), batch_size):
            overlay = RoutedOverlay(bank, stack, "wavg")
            encode(backbone, tokens[s:s + batch_size], overlay)
            for layer, z in overlay.routing.items():
                sums[layer] += z.sum(axis=0)
    return sums / max(len(tokens), 1)


def routing_score_matrix(stack: RouterStack, backbone: Backbone, bank: AdapterBank,
                         eval_sets: Sequence[np.ndarray], batch_size: int = 64) -> np.ndarray:
    """Mean deterministic routing weights: array (L, T adapters, E eval sets)."""
    cols = [_routing_means(stack, backbone, bank, np.asarray(tokens), batch_size) for tokens in eval_sets]
    return np.stack(cols, axis=-1)


def average_routing(stack: RouterStack, backbone: Backbone, bank: AdapterBank, tokens: np.ndarray,
                    batch_size: int = 64) -> np.ndarray:
    """(L, T) deterministic routing averaged over ``tokens``; the static merge weights."""
    return _routing_means(stack, backbone, bank, np.asarray(tokens), batch_size)
