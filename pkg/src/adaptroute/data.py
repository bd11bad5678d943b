"""Task streams: synthetic generators and JSONL ingestion/export.

Every sequence is stored as a fixed-width row of token ids: the [CLS] id at
position 0, the content tokens, then PAD. Content ids start after the
reserved ids (PAD=0, CLS=1, UNK=2).

Generator families:

far-domain         every task draws from its own disjoint vocabulary block
near-domain        all tasks share one vocabulary; tasks differ by topic
                   sets and classes by signature tokens inside the topic
multilingual-like  three shared sentiment labels; each task renders the
                   shared lexicon in its own token "dialect"
hierarchical       task 2 subsumes task 1: its label set holds task 1's
                   classes (same evidence) plus its own; further tasks
                   are far-domain
"""
from __future__ import annotations

import json
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .backbone import CLS_ID, NUM_RESERVED, PAD_ID, UNK_ID
from .errors import ConfigError, ContractError, ParseError
from .tensorio import atomic_write

FAMILIES = ("far-domain", "near-domain", "multilingual-like", "hierarchical")
SENTIMENT = ("negative", "neutral", "positive")
SPLITS = ("train", "val", "test")


def name_key(name: str) -> int:
    """Stable integer for seeding per-task random streams by task name."""
    return zlib.crc32(name.encode("utf-8"))


@dataclass
class Split:
    ids: np.ndarray     # (N,) int64, unique across the whole stream
    tokens: np.ndarray  # (N, S) int64
    labels: np.ndarray  # (N,) task-local class index

    def __len__(self) -> int:
        return int(self.ids.shape[0])

    def subset(self, idx) -> "Split":
        return Split(self.ids[idx], self.tokens[idx], self.labels[idx])


@dataclass
class Task:
    name: str
    classes: list[str]
    train: Split
    val: Split
    test: Split

    def split(self, name: str) -> Split:
        return getattr(self, name)


@dataclass
class TaskStream:
    tasks: list[Task]
    family: str = "custom"
    order: str = "i"
    orders: dict[str, list[str]] = field(default_factory=dict)

    @property
    def num_tasks(self) -> int:
        return len(self.tasks)

    @property
    def seq_len(self) -> int:
        return int(self.tasks[0].train.tokens.shape[1])

    @property
    def global_classes(self) -> list[str]:
        seen: dict[str, None] = {}
        for task in self.tasks:
            for c in task.classes:
                seen.setdefault(c, None)
        return list(seen)

    def global_map(self, index: int) -> np.ndarray:
        """Task-local class index -> global class index for task at ``index``."""
        lookup = {c: i for i, c in enumerate(self.global_classes)}
        return np.array([lookup[c] for c in self.tasks[index].classes], dtype=np.int64)

    def column_groups(self) -> list[list[int]]:
        """For each global class, the columns of the concatenated task heads that carry it."""
        groups: list[list[int]] = [[] for _ in self.global_classes]
        col = 0
        for i, task in enumerate(self.tasks):
            for g in self.global_map(i):
                groups[g].append(col)
                col += 1
        return groups

    def reorder(self, order: str) -> "TaskStream":
        if order not in self.orders:
            raise ConfigError(f"unknown task order {order!r}; known: {sorted(self.orders)}")
        by_name = {t.name: t for t in self.tasks}
        tasks = [by_name[n] for n in self.orders[order]]
        return TaskStream(tasks, self.family, order, dict(self.orders))


def default_orders(names: Sequence[str]) -> dict[str, list[str]]:
    names = list(names)
    return {
        "i": names,
        "ii": names[::-1],
        "iii": names[::2] + names[1::2],
    }


@dataclass
class GeneratorSpec:
    family: str = "far-domain"
    num_tasks: int = 5
    classes_per_task: int = 2
    examples_per_split: tuple[int, int, int] = (200, 50, 100)
    vocab_size: int = 256
    min_len: int = 12
    max_len: int = 24
    noise_rate: float = 0.0
    purity: float = 0.8
    class_priors: tuple[float, ...] | None = None
    seed: int = 0

    def validate(self) -> "GeneratorSpec":
        if self.family not in FAMILIES:
            raise ConfigError(f"data.family must be one of {FAMILIES}, got {self.family!r}")
        if self.classes_per_task < 2:
            raise ConfigError(f"data.classes_per_task must be >= 2, got {self.classes_per_task}")
        if self.num_tasks < 1:
            raise ConfigError("data.num_tasks must be >= 1")
        if self.family == "hierarchical" and self.num_tasks < 2:
            raise ConfigError("hierarchical streams need at least 2 tasks")
        if len(self.examples_per_split) != 3 or min(self.examples_per_split) < 1:
            raise ConfigError("data.examples_per_split needs three positive sizes (train, val, test)")
        if not 1 <= self.min_len <= self.max_len:
            raise ConfigError("data.min_len/max_len must satisfy 1 <= min_len <= max_len")
        if not 0.0 <= self.noise_rate < 1.0:
            raise ConfigError("data.noise_rate must be in [0, 1)")
        if not 0.0 < self.purity <= 1.0:
            raise ConfigError("data.purity must be in (0, 1]")
        if self.class_priors is not None:
            pri = np.asarray(self.class_priors, dtype=float)
            if pri.shape != (self.num_classes,) or np.any(pri < 0) or not np.isclose(pri.sum(), 1.0):
                raise ConfigError("data.class_priors must be a distribution over the task classes")
        if self.content_vocab < self.min_content_vocab():
            raise ConfigError(
                f"data.vocab_size {self.vocab_size} too small for {self.family} with "
                f"{self.num_tasks} tasks x {self.num_classes} classes"
            )
        return self

    @property
    def num_classes(self) -> int:
        return len(SENTIMENT) if self.family == "multilingual-like" else self.classes_per_task

    @property
    def content_vocab(self) -> int:
        return self.vocab_size - NUM_RESERVED

    def min_content_vocab(self) -> int:
        c = self.num_classes
        if self.family in ("far-domain", "multilingual-like"):
            return self.num_tasks * 2 * c
        if self.family == "hierarchical":
            return (self.num_tasks + 1) * 2 * c
        return 4 * c

    def to_dict(self) -> dict:
        d = asdict(self)
        d["examples_per_split"] = list(self.examples_per_split)
        if self.class_priors is not None:
            d["class_priors"] = list(self.class_priors)
        return d


# -- generation -------------------------------------------------------------

class _TokenModel:
    """Per-class sampler: with prob ``purity`` a signature token, otherwise a
    background token from ``background`` (optionally mixed with a topic set)."""

    def __init__(self, signatures: list[np.ndarray], background: np.ndarray, purity: float,
                 topic: np.ndarray | None = None, topic_rate: float = 0.0):
        self.signatures = signatures
        self.background = background
        self.purity = purity
        self.topic = topic
        self.topic_rate = topic_rate

    def sample(self, rng: np.random.Generator, label: int, length: int) -> np.ndarray:
        u = rng.random(length)
        out = rng.choice(self.background, size=length)
        if self.topic is not None and self.topic_rate > 0:
            use_topic = u >= 1.0 - self.topic_rate
            out[use_topic] = rng.choice(self.topic, size=int(use_topic.sum()))
        sig = u < self.purity
        out[sig] = rng.choice(self.signatures[label], size=int(sig.sum()))
        return out

    def dominant(self, seq: np.ndarray, label: int) -> bool:
        counts = [np.isin(seq, s).sum() for s in self.signatures]
        own = counts[label]
        return all(own > c for i, c in enumerate(counts) if i != label)


def _stratified_labels(rng: np.random.Generator, n: int, priors: np.ndarray) -> np.ndarray:
    raw = priors * n
    counts = np.floor(raw).astype(int)
    rest = n - counts.sum()
    if rest:
        order = np.argsort(-(raw - counts), kind="stable")
        counts[order[:rest]] += 1
    labels = np.repeat(np.arange(len(priors)), counts)
    rng.shuffle(labels)
    return labels


def _make_split(rng, model: _TokenModel, n: int, priors, spec: GeneratorSpec, first_id: int) -> Split:
    width = spec.max_len + 1
    labels = _stratified_labels(rng, n, priors)
    tokens = np.full((n, width), PAD_ID, dtype=np.int64)
    tokens[:, 0] = CLS_ID
    lo, hi = NUM_RESERVED, spec.vocab_size
    for i, y in enumerate(labels):
        length = int(rng.integers(spec.min_len, spec.max_len + 1))
        for _ in range(1000):
            seq = model.sample(rng, int(y), length)
            if model.dominant(seq, int(y)):
                break
        if spec.noise_rate > 0:
            flip = rng.random(length) < spec.noise_rate
            seq = seq.copy()
            seq[flip] = rng.integers(lo, hi, size=int(flip.sum()))
        tokens[i, 1:length + 1] = seq
    ids = np.arange(first_id, first_id + n, dtype=np.int64)
    return Split(ids, tokens, labels.astype(np.int64))


def _blocks(start: int, stop: int, parts: int) -> list[np.ndarray]:
    ids = np.arange(start, stop)
    size = len(ids) // parts
    return [ids[i * size:(i + 1) * size] for i in range(parts)]


def generate_stream(spec: GeneratorSpec) -> TaskStream:
    spec.validate()
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, name_key(spec.family)]))
    C, T = spec.num_classes, spec.num_tasks
    priors = np.full(C, 1.0 / C) if spec.class_priors is None else np.asarray(spec.class_priors, float)
    lo, hi = NUM_RESERVED, spec.vocab_size
    all_content = np.arange(lo, hi)

    models: list[_TokenModel] = []
    names: list[str] = []
    classes: list[list[str]] = []

    if spec.family == "far-domain":
        for t, block in enumerate(_blocks(lo, hi, T)):
            models.append(_TokenModel(_blocks(block[0], block[-1] + 1, C), block, spec.purity))
            names.append(f"task{t + 1}")
            classes.append([f"task{t + 1}:c{c}" for c in range(C)])
    elif spec.family == "near-domain":
        # shared vocabulary; each task owns a random topic set, classes own
        # disjoint signature subsets of the task topic
        topic_size = max(2 * C, len(all_content) // 3)
        for t in range(T):
            topic = rng.choice(all_content, size=topic_size, replace=False)
            sig = np.array_split(topic[: (topic_size // C) * C], C)
            models.append(_TokenModel([np.sort(s) for s in sig], all_content, spec.purity * 0.75,
                                      topic=np.sort(topic), topic_rate=0.15))
            names.append(f"field{t + 1}")
            classes.append([f"field{t + 1}:sub{c}" for c in range(C)])
    elif spec.family == "multilingual-like":
        # a shared lexicon rendered per task through a private dialect block;
        # a small shared slice (e.g. emoji) is common to every dialect
        blocks = _blocks(lo, hi, T + 1)
        shared = _blocks(blocks[0][0], blocks[0][-1] + 1, C)
        for t in range(T):
            own = _blocks(blocks[t + 1][0], blocks[t + 1][-1] + 1, C)
            sigs = [np.concatenate([own[c], shared[c][: max(1, len(shared[c]) // 4)]]) for c in range(C)]
            models.append(_TokenModel(sigs, blocks[t + 1], spec.purity))
            names.append(f"lang{t + 1}")
            classes.append(list(SENTIMENT))
    else:  # hierarchical
        blocks = _blocks(lo, hi, T + 1)
        core_sigs = _blocks(blocks[0][0], blocks[0][-1] + 1, C)
        models.append(_TokenModel(core_sigs, blocks[0], spec.purity))
        names.append("core")
        classes.append([f"core:c{c}" for c in range(C)])
        own = _blocks(blocks[1][0], blocks[1][-1] + 1, C)
        models.append(_TokenModel(core_sigs + own, np.concatenate([blocks[0], blocks[1]]), spec.purity))
        names.append("extended")
        classes.append(classes[0] + [f"extended:c{c}" for c in range(C)])
        for t in range(2, T):
            blk = blocks[t]
            models.append(_TokenModel(_blocks(blk[0], blk[-1] + 1, C), blk, spec.purity))
            names.append(f"task{t + 1}")
            classes.append([f"task{t + 1}:c{c}" for c in range(C)])

    tasks, next_id = [], 0
    for t in range(T):
        task_rng = np.random.default_rng(np.random.SeedSequence([spec.seed, name_key(names[t]), 1]))
        nc = len(classes[t])
        pri = priors if nc == C else np.full(nc, 1.0 / nc)
        splits = []
        for n in spec.examples_per_split:
            splits.append(_make_split(task_rng, models[t], n, pri, spec, next_id))
            next_id += n
        tasks.append(Task(names[t], classes[t], *splits))
    return TaskStream(tasks, spec.family, "i", default_orders(names))


# -- JSONL ------------------------------------------------------------------

def _content(row: np.ndarray) -> list[int]:
    return [int(x) for x in row[1:] if x != PAD_ID]


def stream_schema(stream: TaskStream) -> dict:
    return {
        "tasks": [{"name": t.name, "labels": list(t.classes)} for t in stream.tasks],
        "family": stream.family,
        "orders": stream.orders,
        "seq_len": stream.seq_len,
        "cls_id": CLS_ID,
        "pad_id": PAD_ID,
    }


def export_jsonl(stream: TaskStream, path: Path) -> Path:
    """Write records to ``path`` and the schema next to it; returns the schema path."""
    path = Path(path)
    lines = []
    for task in stream.tasks:
        for split in SPLITS:
            s = task.split(split)
            for i, row, y in zip(s.ids, s.tokens, s.labels):
                rec = {"task": task.name, "split": split, "tokens": _content(row),
                       "label": task.classes[y], "id": int(i)}
                lines.append(json.dumps(rec) + "\n")
    atomic_write(path, "".join(lines))
    schema_path = path.with_name(path.stem + ".schema.json")
    atomic_write(schema_path, json.dumps(stream_schema(stream), indent=1, sort_keys=True))
    return schema_path


def load_vocab(path: Path) -> dict[str, int]:
    words = Path(path).read_text(encoding="utf-8").splitlines()
    return {w: i for i, w in enumerate(words)}


def ingest_jsonl(path: Path, schema: dict | Path, vocab: dict[str, int] | Path | None = None,
                 max_seq_len: int | None = None, split_ratios: tuple[float, float, float] | None = None,
                 seed: int = 0) -> TaskStream:
    """Read a labeled JSONL corpus into a stream.

    Records: {"task", "split", "tokens": [int]} or {"text": "..."} with a vocab,
    and "label"; an optional integer "id" is kept (otherwise ids count
    records in file order). Records without "split" are assigned by ``split_ratios``
    (per task, seeded shuffle). The [CLS] id is prepended here; sequences
    longer than ``max_seq_len`` (including [CLS]) are truncated.
    """
    if not isinstance(schema, dict):
        schema = json.loads(Path(schema).read_text(encoding="utf-8"))
    if isinstance(vocab, (str, Path)):
        vocab = load_vocab(vocab)
    task_specs = schema.get("tasks")
    if not task_specs:
        raise ParseError("schema declares no tasks")
    cls_id = int(schema.get("cls_id", CLS_ID))
    pad_id = int(schema.get("pad_id", PAD_ID))
    width = int(max_seq_len or schema.get("seq_len") or 0)
    labels_of = {t["name"]: list(t["labels"]) for t in task_specs}

    rows: dict[str, dict[str, list]] = {t["name"]: {s: [] for s in SPLITS + ("?",)} for t in task_specs}
    count = 0
    seen_ids: set[int] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"invalid JSON ({exc.msg})", lineno) from None
            if not isinstance(rec, dict):
                raise ParseError("record is not an object", lineno)
            task = rec.get("task")
            if task not in labels_of:
                raise ParseError(f"unknown task {task!r}", lineno)
            label = rec.get("label")
            if label not in labels_of[task]:
                raise ParseError(f"unknown label {label!r} for task {task!r}", lineno)
            split = rec.get("split", "?")
            if split not in SPLITS and not (split == "?" and "split" not in rec):
                raise ParseError(f"bad split {split!r}", lineno)
            if "tokens" in rec:
                toks = rec["tokens"]
                if not isinstance(toks, list) or not all(isinstance(x, int) and x >= 0 for x in toks):
                    raise ParseError("tokens must be a list of non-negative ints", lineno)
            elif "text" in rec:
                if vocab is None:
                    raise ParseError("text record but no vocab supplied", lineno)
                unk = vocab.get("[UNK]", UNK_ID)
                toks = [vocab.get(w, unk) for w in str(rec["text"]).split()]
            else:
                raise ParseError("record has neither tokens nor text", lineno)
            rid = rec.get("id", count)
            if not isinstance(rid, int) or isinstance(rid, bool) or rid in seen_ids:
                raise ParseError(f"bad or duplicate id {rid!r}", lineno)
            seen_ids.add(rid)
            rows[task][split].append((rid, toks, labels_of[task].index(label)))
            count += 1
    if count == 0:
        raise ParseError("no records in file")

    if width <= 0:
        width = 1 + max(len(r[1]) for t in rows.values() for s in t.values() for r in s)

    tasks = []
    for spec in task_specs:
        name = spec["name"]
        parts = rows[name]
        if parts["?"]:
            if split_ratios is None:
                raise ParseError(f"task {name!r} has records without split and no split ratios given")
            rng = np.random.default_rng(np.random.SeedSequence([seed, name_key(name)]))
            pending = parts["?"]
            perm = rng.permutation(len(pending))
            n_train = int(round(split_ratios[0] * len(pending)))
            n_val = int(round(split_ratios[1] * len(pending)))
            for rank, j in enumerate(perm):
                key = "train" if rank < n_train else "val" if rank < n_train + n_val else "test"
                parts[key].append(pending[j])
            for key in SPLITS:
                parts[key].sort(key=lambda r: r[0])
        splits = []
        for key in SPLITS:
            recs = parts[key]
            tokens = np.full((len(recs), width), pad_id, dtype=np.int64)
            tokens[:, 0] = cls_id
            for i, (_, toks, _) in enumerate(recs):
                toks = toks[: width - 1]
                tokens[i, 1:1 + len(toks)] = toks
            splits.append(Split(np.array([r[0] for r in recs], dtype=np.int64), tokens,
                                np.array([r[2] for r in recs], dtype=np.int64)))
        if len(splits[0]) == 0:
            raise ParseError(f"task {name!r} has no training records")
        tasks.append(Task(name, labels_of[name], *splits))
    names = [t.name for t in tasks]
    orders = schema.get("orders") or default_orders(names)
    for oname, perm in orders.items():
        if sorted(perm) != sorted(names):
            raise ParseError(f"order {oname!r} is not a permutation of the schema tasks")
    return TaskStream(tasks, schema.get("family", "custom"), "i", {k: list(v) for k, v in orders.items()})


def check_disjoint(stream: TaskStream) -> None:
    for task in stream.tasks:
        sets = [set(task.split(s).ids.tolist()) for s in SPLITS]
        if sets[0] & sets[1] or sets[0] & sets[2] or sets[1] & sets[2]:
            raise ContractError(f"task {task.name}: splits share example ids")
