"""Episodic memory of training examples, used once to fit the routers."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import Task, name_key
from .errors import ConfigError, ContractError, ParseError
from .tensorio import atomic_write


def capacity(fraction: float, n: int) -> int:
    """round(fraction * n), halves rounded up."""
    return int(math.floor(fraction * n + 0.5))


@dataclass
class MemoryPart:
    task_name: str
    ids: np.ndarray
    tokens: np.ndarray
    labels: np.ndarray
    global_labels: np.ndarray

    def __len__(self) -> int:
        return int(self.ids.shape[0])


@dataclass
class RouterView:
    tokens: np.ndarray
    labels: np.ndarray
    task_ids: np.ndarray

    def __len__(self) -> int:
        return int(self.labels.shape[0])


class MemoryBuffer:
    def __init__(self, fraction: float = 0.10, seed: int = 0):
        if not 0.0 < fraction <= 1.0:
            raise ConfigError(f"memory fraction must be in (0, 1], got {fraction}")
        self.fraction = fraction
        self.seed = seed
        self.parts: dict[int, MemoryPart] = {}

    def __len__(self) -> int:
        return sum(len(p) for p in self.parts.values())

    @property
    def task_ids(self) -> list[int]:
        return sorted(self.parts)

    def populate(self, task: Task, task_id: int, global_map) -> int:
        """Store a uniform sample (without replacement) of the task's training split."""
        if task_id in self.parts:
            raise ContractError(f"task {task_id} already sampled into memory")
        train = task.train
        n = capacity(self.fraction, len(train))
        rng = np.random.default_rng(np.random.SeedSequence([self.seed, name_key(task.name), 2]))
        idx = rng.choice(len(train), size=n, replace=False)
        global_map = np.asarray(global_map, dtype=np.int64)
        self.parts[task_id] = MemoryPart(
            task.name,
            train.ids[idx].copy(),
            train.tokens[idx].copy(),
            train.labels[idx].copy(),
            global_map[train.labels[idx]],
        )
        return n

    def router_training_view(self, regime: str, task_id: int | None = None) -> RouterView:
        """CIL: every entry, shuffled, global labels. TIL: one task's entries, local labels."""
        if regime == "CIL":
            chosen = self.task_ids
            labels = [self.parts[t].global_labels for t in chosen]
        elif regime == "TIL":
            if task_id is None:
                raise ContractError("TIL router view needs a task id")
            if task_id not in self.parts:
                raise ContractError(f"no memory for task {task_id}")
            chosen = [task_id]
            labels = [self.parts[task_id].labels]
        else:
            raise ContractError(f"unknown regime {regime!r}")
        if not chosen:
            return RouterView(np.zeros((0, 1), np.int64), np.zeros(0, np.int64), np.zeros(0, np.int64))
        tokens = np.concatenate([self.parts[t].tokens for t in chosen])
        labels = np.concatenate(labels)
        tids = np.concatenate([np.full(len(self.parts[t]), t, dtype=np.int64) for t in chosen])
        # keyed by the task set so a single-task CIL view equals that task's TIL view
        rng = np.random.default_rng(np.random.SeedSequence([self.seed, 3, *chosen]))
        perm = rng.permutation(len(labels))
        return RouterView(tokens[perm], labels[perm], tids[perm])

    def all_ids(self) -> set[int]:
        return {int(i) for p in self.parts.values() for i in p.ids}

    def to_jsonl(self, path: Path) -> None:
        lines = []
        for t in self.task_ids:
            p = self.parts[t]
            for i in range(len(p)):
                row = p.tokens[i]
                lines.append(json.dumps({
                    "task_id": t,
                    "task": p.task_name,
                    "id": int(p.ids[i]),
                    "token_ids": [int(x) for x in row],
                    "label": int(p.labels[i]),
                    "global_label": int(p.global_labels[i]),
                }))
        atomic_write(Path(path), "\n".join(lines) + ("\n" if lines else ""))

    @classmethod
    def from_jsonl(cls, path: Path, fraction: float, seed: int) -> "MemoryBuffer":
        mem = cls(fraction, seed)
        grouped: dict[int, list[dict]] = {}
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    rec = json.loads(line)
                    grouped.setdefault(int(rec["task_id"]), []).append(rec)
                except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                    raise ParseError(f"bad memory record: {exc}", lineno) from None
        for t, recs in grouped.items():
            mem.parts[t] = MemoryPart(
                recs[0].get("task", str(t)),
                np.array([r.get("id", -1) for r in recs], dtype=np.int64),
                np.array([r["token_ids"] for r in recs], dtype=np.int64),
                np.array([r["label"] for r in recs], dtype=np.int64),
                np.array([r["global_label"] for r in recs], dtype=np.int64),
            )
        return mem
