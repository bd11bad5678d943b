"""Analytic forward FLOPs for batch 1 at a fixed sequence length.

A multiply-add counts as 2 FLOPs; only matrix products are counted
(layer norms, softmax and element-wise work are ignored, as they are
identical across methods).
"""
from __future__ import annotations

from dataclasses import dataclass

from .backbone import BackboneConfig

METHODS = ("base", "wavg", "merge", "centroid")


@dataclass(frozen=True)
class FlopsEstimate:
    method: str
    flops: int

    @property
    def gflops(self) -> float:
        return self.flops / 1e9


def base_flops(cfg: BackboneConfig, seq_len: int, num_classes: int) -> int:
    n, d, f = seq_len, cfg.hidden_dim, cfg.ffn_dim
    per_layer = 4 * 2 * n * d * d + 2 * 2 * n * n * d + 2 * 2 * n * d * f
    return cfg.num_layers * per_layer + 2 * d * num_classes


def adapter_path_flops(cfg: BackboneConfig, seq_len: int, rank: int) -> int:
    """One adapter on W_q and W_v of every layer: x A^T then (.) B^T."""
    return cfg.num_layers * 2 * (2 * seq_len * cfg.hidden_dim * rank + 2 * seq_len * rank * cfg.hidden_dim)


def router_flops(cfg: BackboneConfig, num_tasks: int) -> int:
    """One linear map from the [CLS] state to T logits per layer."""
    return cfg.num_layers * 2 * cfg.hidden_dim * num_tasks


def estimate_flops(cfg: BackboneConfig, method: str, num_tasks: int, rank: int = 8,
                   seq_len: int = 128, num_classes: int = 2) -> FlopsEstimate:
    """Closed-form count. Output averaging runs every adapter plus the routers;
    merged variants run one merged adapter (the merge itself is precomputed)."""
    if method not in METHODS:
        raise ValueError(f"method must be one of {METHODS}, got {method!r}")
    total = base_flops(cfg, seq_len, num_classes)
    if method == "wavg":
        total += num_tasks * adapter_path_flops(cfg, seq_len, rank) + router_flops(cfg, num_tasks)
    elif method in ("merge", "centroid"):
        total += adapter_path_flops(cfg, seq_len, rank)
    return FlopsEstimate(method, total)


def flops_table(cfg: BackboneConfig, num_tasks: int, rank: int = 8, seq_len: int = 128,
                num_classes: int = 2) -> list[FlopsEstimate]:
    return [estimate_flops(cfg, m, num_tasks, rank, seq_len, num_classes) for m in METHODS]
