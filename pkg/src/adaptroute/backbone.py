"""Small frozen pre-norm transformer encoder.

The encoder stands in for a pretrained language model. Its weights are
seeded random draws and never receive gradients; task knowledge lives in
the low-rank overlays injected into the query and value projections and
in the classifier heads.

Pre-norm blocks (LayerNorm before attention and feed-forward) with a
final LayerNorm; GELU uses the tanh approximation. The pooled
representation is the raw position-0 ([CLS]) state.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from . import tensorio
from .autodiff import Tensor
from .errors import ConfigError, ContractError

PAD_ID = 0
CLS_ID = 1
UNK_ID = 2
NUM_RESERVED = 3

MASK_VALUE = -1e9


@dataclass(frozen=True)
class BackboneConfig:
    num_layers: int = 4
    hidden_dim: int = 64
    num_heads: int = 4
    ffn_dim: int = 256
    vocab_size: int = 256
    max_seq_len: int = 32
    seed: int = 0

    def validate(self) -> "BackboneConfig":
        for name in ("num_layers", "hidden_dim", "num_heads", "ffn_dim", "vocab_size", "max_seq_len"):
            if getattr(self, name) < 1:
                raise ConfigError(f"backbone.{name} must be >= 1, got {getattr(self, name)}")
        if self.hidden_dim % self.num_heads:
            raise ConfigError(
                f"backbone.hidden_dim {self.hidden_dim} is not divisible by num_heads {self.num_heads}"
            )
        if self.vocab_size <= NUM_RESERVED:
            raise ConfigError(f"backbone.vocab_size must exceed {NUM_RESERVED} reserved ids")
        return self

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.num_heads

    def to_dict(self) -> dict:
        return asdict(self)


def parameter_count(cfg: BackboneConfig) -> int:
    """Closed-form parameter count of the encoder (heads excluded)."""
    d, f = cfg.hidden_dim, cfg.ffn_dim
    per_layer = 2 * d + 4 * (d * d + d) + 2 * d + (d * f + f) + (f * d + d)
    return cfg.vocab_size * d + cfg.max_seq_len * d + cfg.num_layers * per_layer + 2 * d


@dataclass
class EncoderState:
    hidden: list[Tensor]  # L+1 entries, (B, S, d)
    cls: list[Tensor]     # L+1 entries, (B, d): position 0 of each hidden state
    pooled: Tensor        # final-norm position-0 state fed to the classifier


class Overlay:
    """Hook for adding deltas to the query/value projections.

    ``layer`` is called once on entering each block with that block's
    incoming [CLS] state and returns ``delta(target, x)`` (or None for no
    change), where ``target`` is "q" or "v" and ``x`` is the projection input.
    """

    num_layers: int
    hidden_dim: int

    def layer(self, index: int, h_cls: Tensor) -> Callable[[str, Tensor], Tensor | None] | None:
        raise NotImplementedError


class Backbone:
    def __init__(self, config: BackboneConfig, params: dict[str, np.ndarray]):
        self.config = config.validate()
        self.params = params
        for arr in params.values():
            arr.setflags(write=False)
        self.tensors = {k: Tensor(v) for k, v in params.items()}

    @property
    def num_parameters(self) -> int:
        return sum(a.size for a in self.params.values())

    def state_bytes(self) -> bytes:
        return tensorio.pack(self.params)[0]

    def save(self, path: Path) -> None:
        tensorio.save(path, self.params, {"config": self.config.to_dict()})

    @classmethod
    def load(cls, path: Path) -> "Backbone":
        params, meta = tensorio.load(path)
        return cls(BackboneConfig(**meta["config"]), params)


def build_backbone(cfg: BackboneConfig) -> Backbone:
    cfg.validate()
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xB0CB]))
    d, f = cfg.hidden_dim, cfg.ffn_dim
    p: dict[str, np.ndarray] = {}
    p["tok_emb"] = rng.normal(0.0, 1.0, (cfg.vocab_size, d))
    p["pos_emb"] = rng.normal(0.0, 0.1, (cfg.max_seq_len, d))
    for i in range(cfg.num_layers):
        pre = f"layer{i}."
        p[pre + "ln1.gamma"] = np.ones(d)
        p[pre + "ln1.beta"] = np.zeros(d)
        for w in ("q", "k", "v", "o"):
            p[pre + f"attn.w{w}"] = rng.normal(0.0, d**-0.5, (d, d))
            p[pre + f"attn.b{w}"] = np.zeros(d)
        p[pre + "ln2.gamma"] = np.ones(d)
        p[pre + "ln2.beta"] = np.zeros(d)
        p[pre + "ffn.w1"] = rng.normal(0.0, d**-0.5, (d, f))
        p[pre + "ffn.b1"] = np.zeros(f)
        p[pre + "ffn.w2"] = rng.normal(0.0, f**-0.5, (f, d))
        p[pre + "ffn.b2"] = np.zeros(d)
    p["lnf.gamma"] = np.ones(d)
    p["lnf.beta"] = np.zeros(d)
    return Backbone(cfg, p)


class TaskHead:
    """Linear classifier over one task's local classes (zero-initialised)."""

    def __init__(self, dim: int, num_classes: int, weight=None, bias=None):
        self.weight = Tensor(np.zeros((dim, num_classes)) if weight is None else weight, requires_grad=True)
        self.bias = Tensor(np.zeros(num_classes) if bias is None else bias, requires_grad=True)

    @property
    def num_classes(self) -> int:
        return self.bias.shape[0]

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bias]

    def freeze(self) -> None:
        for t in self.parameters():
            t.requires_grad = False
            t.grad = None

    def arrays(self) -> dict[str, np.ndarray]:
        return {"weight": self.weight.data, "bias": self.bias.data}

    def __call__(self, h: Tensor) -> Tensor:
        return h @ self.weight + self.bias


class SharedHead:
    """Class-incremental head: every task's columns side by side.

    Columns are pooled into global classes with log-sum-exp, so tasks that
    declare the same label share one global logit; with disjoint label sets
    this is exactly the concatenation of the task heads.
    """

    def __init__(self, heads: Sequence[TaskHead], groups: Sequence[Sequence[int]]):
        self.heads = list(heads)
        self.groups = [list(g) for g in groups]

    def __call__(self, h: Tensor) -> Tensor:
        cols = ad.concat([head(h) for head in self.heads], axis=-1)
        return ad.group_logsumexp(cols, self.groups)


def _attention_mask(tokens: np.ndarray) -> np.ndarray:
    # (B, 1, 1, S): additive mask on key positions holding PAD
    return np.where(tokens == PAD_ID, MASK_VALUE, 0.0)[:, None, None, :]


def encode(backbone: Backbone, tokens, overlay: Overlay | None = None, head=None) -> tuple[EncoderState, Tensor | None]:
    """Run the encoder on integer ``tokens`` (B, S) with an optional overlay and head."""
    cfg = backbone.config
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim == 1:
        tokens = tokens[None, :]
    bsz, seq = tokens.shape
    if seq > cfg.max_seq_len:
        raise ContractError(f"sequence length {seq} exceeds max {cfg.max_seq_len}")
    if tokens.min() < 0 or tokens.max() >= cfg.vocab_size:
        raise ContractError("token id out of vocabulary range")
    if overlay is not None and (overlay.num_layers != cfg.num_layers or overlay.hidden_dim != cfg.hidden_dim):
        raise ContractError(
            f"overlay shape (L={overlay.num_layers}, d={overlay.hidden_dim}) does not match "
            f"backbone (L={cfg.num_layers}, d={cfg.hidden_dim})"
        )
    P = backbone.tensors
    d, nh, dh = cfg.hidden_dim, cfg.num_heads, cfg.head_dim
    mask = _attention_mask(tokens)
    scale = 1.0 / np.sqrt(dh)

    x = Tensor(backbone.params["tok_emb"][tokens] + backbone.params["pos_emb"][:seq])
    hidden, cls = [x], [x[:, 0, :]]
    for i in range(cfg.num_layers):
        pre = f"layer{i}."
        delta = overlay.layer(i, cls[-1]) if overlay is not None else None
        h = ad.layer_norm(x, P[pre + "ln1.gamma"], P[pre + "ln1.beta"])
        q = h @ P[pre + "attn.wq"] + P[pre + "attn.bq"]
        k = h @ P[pre + "attn.wk"] + P[pre + "attn.bk"]
        v = h @ P[pre + "attn.wv"] + P[pre + "attn.bv"]
        if delta is not None:
            dq = delta("q", h)
            if dq is not None:
                q = q + dq
            dv = delta("v", h)
            if dv is not None:
                v = v + dv
        q = q.reshape(bsz, seq, nh, dh).transpose(0, 2, 1, 3)
        k = k.reshape(bsz, seq, nh, dh).transpose(0, 2, 3, 1)
        v = v.reshape(bsz, seq, nh, dh).transpose(0, 2, 1, 3)
        att = ad.softmax((q @ k) * scale + mask, axis=-1)
        ctx = (att @ v).transpose(0, 2, 1, 3).reshape(bsz, seq, d)
        x = x + (ctx @ P[pre + "attn.wo"] + P[pre + "attn.bo"])
        h2 = ad.layer_norm(x, P[pre + "ln2.gamma"], P[pre + "ln2.beta"])
        x = x + (ad.gelu(h2 @ P[pre + "ffn.w1"] + P[pre + "ffn.b1"]) @ P[pre + "ffn.w2"] + P[pre + "ffn.b2"])
        hidden.append(x)
        cls.append(x[:, 0, :])
    pooled = ad.layer_norm(cls[-1], P["lnf.gamma"], P["lnf.beta"])
    state = EncoderState(hidden=hidden, cls=cls, pooled=pooled)
    logits = head(pooled) if head is not None else None
    return state, logits
