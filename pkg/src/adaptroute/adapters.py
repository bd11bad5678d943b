"""Per-task low-rank adapters on the query and value projections.

Each adapter pair adds ``scaling * B @ A`` to a projection, with ``A`` of
shape (r, d) drawn uniform(-1/sqrt(d), 1/sqrt(d)) and ``B`` (d, r) zero, so a
freshly added adapter is an exact identity. The scaling numerator is the
rank, giving a scaling of 1.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import tensorio
from .autodiff import Tensor
from .backbone import Backbone, BackboneConfig
from .data import name_key
from .errors import ConfigError, ContractError, DimensionError

TARGETS = ("q", "v")


@dataclass(frozen=True)
class AdapterConfig:
    rank: int = 8
    dropout: float = 0.1
    alpha: float | None = None  # None -> rank, i.e. scaling 1

    def validate(self, hidden_dim: int | None = None) -> "AdapterConfig":
        if self.rank < 1:
            raise ConfigError(f"adapter.rank must be >= 1, got {self.rank}")
        if hidden_dim is not None and self.rank > hidden_dim:
            raise ConfigError(f"adapter.rank {self.rank} exceeds hidden dim {hidden_dim}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"adapter.dropout must be in [0, 1), got {self.dropout}")
        return self

    @property
    def scaling(self) -> float:
        return (self.rank if self.alpha is None else self.alpha) / self.rank

    def to_dict(self) -> dict:
        return asdict(self)


class LoraPair:
    def __init__(self, A: np.ndarray, B: np.ndarray, scaling: float = 1.0, dropout: float = 0.0):
        A, B = np.asarray(A, dtype=np.float64), np.asarray(B, dtype=np.float64)
        r = A.shape[0]
        if r < 1 or B.shape != (A.shape[1], r):
            raise ConfigError(f"LoRA shapes A{A.shape} / B{B.shape} are inconsistent")
        self.A = Tensor(A)
        self.B = Tensor(B)
        self.scaling = scaling
        self.dropout = dropout

    @property
    def rank(self) -> int:
        return self.A.shape[0]

    @property
    def dim(self) -> int:
        return self.A.shape[1]

    def parameters(self) -> list[Tensor]:
        return [self.A, self.B]

    def delta_weight(self) -> Tensor:
        """Dense (d_out, d_in) weight update ``scaling * B @ A``."""
        w = self.B @ self.A
        return w * self.scaling if self.scaling != 1.0 else w


def adapter_delta(pair: LoraPair, x, training: bool = False, rng: np.random.Generator | None = None) -> Tensor:
    """``scaling * B (A x)`` for every row of ``x``; dropout on ``x`` only when training."""
    x = ad.as_tensor(x)
    if x.shape[-1] != pair.dim:
        raise DimensionError(f"adapter expects width {pair.dim}, got input of shape {x.shape}")
    squeeze = x.ndim == 1
    if squeeze:
        x = x.reshape(1, -1)
    if training and pair.dropout > 0:
        if rng is None:
            raise ContractError("training-mode adapter dropout needs an rng")
        x = ad.dropout(x, pair.dropout, rng)
    out = (x @ pair.A.T) @ pair.B.T
    if pair.scaling != 1.0:
        out = out * pair.scaling
    return out.reshape(-1) if squeeze else out


class TaskAdapter:
    def __init__(self, task_id: int, name: str, pairs: dict[tuple[int, str], LoraPair]):
        self.task_id = task_id
        self.name = name
        self.pairs = pairs

    @property
    def num_layers(self) -> int:
        return len({layer for layer, _ in self.pairs})

    def parameters(self) -> list[Tensor]:
        return [p for key in sorted(self.pairs) for p in self.pairs[key].parameters()]

    @property
    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for (layer, target) in sorted(self.pairs):
            pair = self.pairs[(layer, target)]
            out[f"layer{layer}.{target}.A"] = pair.A.data
            out[f"layer{layer}.{target}.B"] = pair.B.data
        return out

    def to_bytes(self) -> bytes:
        return tensorio.pack(self.arrays())[0]

    def set_trainable(self, flag: bool) -> None:
        for p in self.parameters():
            p.requires_grad = flag
            if not flag:
                p.grad = None

    @property
    def trainable(self) -> bool:
        return any(p.requires_grad for p in self.parameters())


class AdapterBank:
    def __init__(self, config: AdapterConfig, seed: int = 0):
        self.config = config.validate()
        self.seed = seed
        self.adapters: list[TaskAdapter] = []

    def __len__(self) -> int:
        return len(self.adapters)

    def __getitem__(self, task_id: int) -> TaskAdapter:
        if not 1 <= task_id <= len(self.adapters):
            raise ContractError(f"no adapter for task id {task_id}")
        return self.adapters[task_id - 1]

    @property
    def trainable_mask(self) -> list[bool]:
        return [a.trainable for a in self.adapters]

    def add_task_adapter(self, cfg: BackboneConfig, name: str | None = None) -> int:
        """Append a zero-B adapter, make it the only trainable one, return its 1-based id."""
        self.config.validate(cfg.hidden_dim)
        task_id = len(self.adapters) + 1
        name = name or f"task{task_id}"
        d, r = cfg.hidden_dim, self.config.rank
        bound = 1.0 / np.sqrt(d)
        pairs = {}
        for layer in range(cfg.num_layers):
            for ti, target in enumerate(TARGETS):
                rng = np.random.default_rng(np.random.SeedSequence([self.seed, name_key(name), layer, ti]))
                pairs[(layer, target)] = LoraPair(
                    rng.uniform(-bound, bound, (r, d)), np.zeros((d, r)),
                    self.config.scaling, self.config.dropout,
                )
        for a in self.adapters:
            a.set_trainable(False)
        adapter = TaskAdapter(task_id, name, pairs)
        adapter.set_trainable(True)
        self.adapters.append(adapter)
        return task_id

    def freeze_all(self) -> None:
        for a in self.adapters:
            a.set_trainable(False)

    def save(self, directory: Path) -> None:
        for a in self.adapters:
            tensorio.save(Path(directory) / f"adapter_task{a.task_id}.bin", a.arrays(),
                          {"task_id": a.task_id, "name": a.name, "config": self.config.to_dict()})

    @classmethod
    def load(cls, directory: Path, count: int, seed: int = 0) -> "AdapterBank":
        bank = None
        for t in range(1, count + 1):
            arrays, meta = tensorio.load(Path(directory) / f"adapter_task{t}.bin")
            if bank is None:
                bank = cls(AdapterConfig(**meta["config"]), seed)
            pairs = {}
            for key, arr in arrays.items():
                layer, target, which = key.split(".")
                pairs.setdefault((int(layer[5:]), target), {})[which] = arr
            bank.adapters.append(TaskAdapter(t, meta["name"], {
                k: LoraPair(v["A"], v["B"], bank.config.scaling, bank.config.dropout) for k, v in pairs.items()
            }))
        return bank


def parameter_fraction(bank: AdapterBank, backbone: Backbone) -> float:
    """Trainable parameters of one task adapter relative to the backbone size."""
    cfg = backbone.config
    per_task = cfg.num_layers * len(TARGETS) * 2 * bank.config.rank * cfg.hidden_dim
    return per_task / backbone.num_parameters
