"""Continual-learning protocol: stream training, router fitting, evaluation, sweeps."""
from __future__ import annotations

import dataclasses
import functools
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import tensorio
from .adapters import AdapterBank, AdapterConfig
from .backbone import Backbone, BackboneConfig, SharedHead, TaskHead, build_backbone, encode
from .composer import (
    MODES,
    SingleAdapterOverlay,
    WeightedOverlay,
    baseline_weights,
    centroid_weights,
    fixed_weights,
    task_centroid,
)
from .config import RunConfig, TrainConfig
from .data import Task, TaskStream, export_jsonl, generate_stream, ingest_jsonl, name_key
from .errors import ContractError, RunError
from .memory import MemoryBuffer
from .router import RELAXATIONS, RoutedOverlay, RouterConfig, RouterStack, average_routing, routing_score_matrix, train_routers

log = logging.getLogger(__name__)

EVAL_BATCH = 64


def derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])


@dataclass
class TrainedState:
    backbone: Backbone
    bank: AdapterBank
    heads: list[TaskHead]
    stream: TaskStream
    memory: MemoryBuffer
    seed: int = 0
    logs: list[dict] = field(default_factory=list)
    _centroids: np.ndarray | None = None

    @property
    def num_tasks(self) -> int:
        return len(self.bank)

    def shared_head(self) -> SharedHead:
        return SharedHead(self.heads, self.stream.column_groups())

    def centroids(self) -> np.ndarray:
        if self._centroids is None:
            self._centroids = np.stack([task_centroid(self.backbone, t.train.tokens) for t in self.stream.tasks])
        return self._centroids


def _batched_logits(backbone, tokens, overlay_fn, head, batch_size=EVAL_BATCH) -> np.ndarray:
    out = []
    with ad.no_grad():
        for s in range(0, len(tokens), batch_size):
            chunk = tokens[s:s + batch_size]
            _, logits = encode(backbone, chunk, overlay_fn(chunk), head)
            out.append(logits.data)
    return np.concatenate(out)


def _score(backbone, adapter, head, split) -> tuple[float, float]:
    logits = _batched_logits(backbone, split.tokens,
                             lambda _: SingleAdapterOverlay(adapter, backbone.config.hidden_dim), head)
    acc = float(np.mean(logits.argmax(axis=1) == split.labels))
    loss = ad.cross_entropy(logits, split.labels).item()
    return acc, loss


def train_task(backbone: Backbone, bank: AdapterBank, task: Task, cfg: TrainConfig, seed: int) -> tuple[int, TaskHead, dict]:
    """Add and train one task's adapter and head in isolation, then freeze both.

    AdamW with linear warmup/decay; early stopping on validation accuracy
    (validation loss breaks ties) restores the best epoch.
    """
    cfg.validate()
    tid = bank.add_task_adapter(backbone.config, task.name)
    adapter = bank[tid]
    head = TaskHead(backbone.config.hidden_dim, len(task.classes))
    params = adapter.parameters() + head.parameters()
    rng = np.random.default_rng(np.random.SeedSequence([seed, name_key(task.name), 5]))
    train = task.train
    val = task.val if len(task.val) else task.train
    n = len(train)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total = steps_per_epoch * cfg.max_epochs
    warmup = int(round(cfg.warmup_frac * total))
    opt = ad.AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    d = backbone.config.hidden_dim

    best_key, best_arrays, bad, step = None, None, 0, 0
    history = []
    for epoch in range(cfg.max_epochs):
        perm = rng.permutation(n)
        for s in range(0, n, cfg.batch_size):
            idx = perm[s:s + cfg.batch_size]
            overlay = SingleAdapterOverlay(adapter, d, training=True, rng=rng)
            _, logits = encode(backbone, train.tokens[idx], overlay, head)
            loss = ad.cross_entropy(logits, train.labels[idx])
            if not np.isfinite(loss.item()):
                raise RunError(f"training loss is {loss.item()} at epoch {epoch}", task.name)
            opt.zero_grad()
            loss.backward()
            opt.step(cfg.lr * ad.linear_warmup(step, total, warmup))
            step += 1
        acc, vloss = _score(backbone, adapter, head, val)
        history.append({"epoch": epoch, "val_acc": acc, "val_loss": vloss})
        key = (acc, -vloss)
        if best_key is None or key > best_key:
            if best_key is None or acc > best_key[0]:
                bad = -1
            best_key, best_arrays = key, [p.data.copy() for p in params]
        bad += 1
        if bad >= cfg.patience:
            break
    for p, arr in zip(params, best_arrays):
        p.data = arr
    adapter.set_trainable(False)
    head.freeze()
    return tid, head, {"task": task.name, "epochs": len(history), "best_val_acc": best_key[0], "history": history}


def run_stream(stream: TaskStream, backbone: Backbone, adapter_cfg: AdapterConfig, train_cfg: TrainConfig,
               memory_fraction: float, seed: int) -> TrainedState:
    """Train every task in order with isolated adapters, filling memory after each task."""
    if stream.num_tasks == 0:
        raise ContractError("empty task stream")
    bank = AdapterBank(adapter_cfg, seed)
    memory = MemoryBuffer(memory_fraction, seed)
    heads, logs = [], []
    for i, task in enumerate(stream.tasks):
        tid, head, tlog = train_task(backbone, bank, task, train_cfg, seed)
        memory.populate(task, tid, stream.global_map(i))
        heads.append(head)
        logs.append(tlog)
        log.info("task %s: %d epochs, val acc %.3f", task.name, tlog["epochs"], tlog["best_val_acc"])
    bank.freeze_all()
    return TrainedState(backbone, bank, heads, stream, memory, seed, logs)


# -- routers ----------------------------------------------------------------

@dataclass
class Routers:
    cil: RouterStack | None = None
    til: dict[int, RouterStack] = field(default_factory=dict)
    static: dict[str, np.ndarray] = field(default_factory=dict)  # "CIL" / "TIL:<tid>" -> (L, T)
    logs: dict[str, dict] = field(default_factory=dict)

    def stack(self, regime: str, task_id: int) -> RouterStack:
        st = self.cil if regime == "CIL" else self.til.get(task_id)
        if st is None:
            raise ContractError(f"no trained {regime} router for task {task_id}")
        return st


def fit_routers(state: TrainedState, cfg: RouterConfig, regimes=("CIL", "TIL")) -> Routers:
    """Train the CIL stack on all memory and/or one TIL stack per task on its own memory."""
    cfg.validate()
    bb, bank = state.backbone, state.bank
    L, d, T = bb.config.num_layers, bb.config.hidden_dim, len(bank)
    routers = Routers()
    if "CIL" in regimes:
        view = state.memory.router_training_view("CIL")
        tids = state.memory.task_ids
        stack = RouterStack.from_config(cfg, L, d, T, derive_seed(state.seed, 6, *tids))
        routers.logs["CIL"] = train_routers(stack, bb, bank, state.shared_head(), view, cfg)
        routers.cil = stack
        routers.static["CIL"] = average_routing(stack, bb, bank, view.tokens)
    if "TIL" in regimes:
        for i in range(T):
            tid = i + 1
            view = state.memory.router_training_view("TIL", tid)
            stack = RouterStack.from_config(cfg, L, d, T, derive_seed(state.seed, 6, tid))
            routers.logs[f"TIL:{tid}"] = train_routers(stack, bb, bank, state.heads[i], view, cfg)
            routers.til[tid] = stack
            routers.static[f"TIL:{tid}"] = average_routing(stack, bb, bank, view.tokens)
    return routers


# -- evaluation ---------------------------------------------------------------

def _overlay_factory(state: TrainedState, routers: Routers | None, mode: str, regime: str, tid: int):
    bb, bank = state.backbone, state.bank
    L, d, T = bb.config.num_layers, bb.config.hidden_dim, len(bank)
    if mode == "upper-bound":
        adapter = bank[tid]
        return lambda chunk: SingleAdapterOverlay(adapter, d)
    if mode == "lower-bound":
        w = baseline_weights("lower-bound", T)
        return lambda chunk: WeightedOverlay(bank, L, d, fixed_weights(w), "wavg")
    if mode == "centroid":
        cents = state.centroids()

        def make(chunk):
            w = centroid_weights(bb, chunk, cents)
            return WeightedOverlay(bank, L, d, lambda i, h: w, "wavg")

        return make
    if routers is None:
        raise ContractError(f"mode {mode} needs trained routers")
    if mode == "merge-static":
        key = "CIL" if regime == "CIL" else f"TIL:{tid}"
        if key not in routers.static:
            raise ContractError(f"no static merge weights for {key}")
        overlay = WeightedOverlay(bank, L, d, fixed_weights(routers.static[key]), "merge-static")
        return lambda chunk: overlay
    stack = routers.stack(regime, tid)
    return lambda chunk: RoutedOverlay(bank, stack, mode)


def predict(state: TrainedState, routers: Routers | None, mode: str, regime: str, task_index: int,
            split: str = "test", task_id: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """(predicted labels, true labels) for one task's split under a mode and regime.

    In TIL ``task_id`` names the adapter/head to use (defaults to the task's own).
    """
    if mode not in MODES:
        raise ContractError(f"unknown mode {mode!r}")
    if regime not in ("CIL", "TIL"):
        raise ContractError(f"unknown regime {regime!r}")
    task = state.stream.tasks[task_index]
    data = task.split(split)
    tid = task_index + 1 if task_id is None else task_id
    if regime == "CIL":
        head, labels = state.shared_head(), state.stream.global_map(task_index)[data.labels]
    else:
        head, labels = state.heads[tid - 1], data.labels
    logits = _batched_logits(state.backbone, data.tokens, _overlay_factory(state, routers, mode, regime, tid), head)
    return logits.argmax(axis=1), labels


def evaluate(state: TrainedState, routers: Routers | None, mode: str, regime: str,
             task_ids: list[int] | None = None) -> dict:
    """Per-task test accuracy and their mean.

    TIL is given the task identity of every test set: ``task_ids`` holds the
    1-based adapter/head id for each stream task and is required there.
    """
    if regime == "TIL":
        if task_ids is None or len(task_ids) != state.num_tasks:
            raise ContractError("TIL evaluation requires a task id for every task")
        if any(not 1 <= t <= state.num_tasks for t in task_ids):
            raise ContractError(f"task ids must be in 1..{state.num_tasks}, got {list(task_ids)}")
    per_task = {}
    for i, task in enumerate(state.stream.tasks):
        pred, labels = predict(state, routers, mode, regime, i, task_id=None if regime == "CIL" else task_ids[i])
        per_task[task.name] = float(np.mean(pred == labels))
    return {
        "mode": mode,
        "regime": regime,
        "per_task": per_task,
        "average": float(np.mean(list(per_task.values()))),
    }


def oracle_task_ids(state: TrainedState) -> list[int]:
    """Task ids as an oracle would give them: stream position + 1."""
    return list(range(1, state.num_tasks + 1))


def routing_matrices(state: TrainedState, routers: Routers, regime: str = "CIL", task_id: int = 1) -> np.ndarray:
    """(L, T, E) mean routing scores on each task's test set."""
    stack = routers.stack(regime, task_id)
    sets = [t.test.tokens for t in state.stream.tasks]
    return routing_score_matrix(stack, state.backbone, state.bank, sets)


# -- end-to-end pipelines ------------------------------------------------------

def load_stream(config: RunConfig, seed: int) -> TaskStream:
    if config.ingest is not None:
        ing = config.ingest
        return ingest_jsonl(ing.path, ing.schema, ing.vocab, config.backbone.max_seq_len, ing.split_ratios, seed)
    return generate_stream(dataclasses.replace(config.data, seed=seed))


def build_state(config: RunConfig, seed: int, order: str = "i", stream: TaskStream | None = None) -> TrainedState:
    config.validate()
    stream = (stream or load_stream(config, seed)).reorder(order)
    backbone = build_backbone(dataclasses.replace(config.backbone, seed=seed))
    return run_stream(stream, backbone, config.adapter, config.train, config.memory_fraction, seed)


def _map_seeds(fn, seeds, workers: int) -> list:
    """Apply ``fn`` per seed, in seed order; each worker process holds private state."""
    seeds = list(seeds)
    if workers <= 1 or len(seeds) <= 1:
        return [fn(s) for s in seeds]
    from concurrent.futures import ProcessPoolExecutor

    with ProcessPoolExecutor(max_workers=min(workers, len(seeds))) as pool:
        return list(pool.map(fn, seeds))


def _eval_ids(state: TrainedState, regime: str):
    return oracle_task_ids(state) if regime == "TIL" else None


def _sweep_seed(seed, config, fractions, mode, regime):
    state = build_state(config, seed, config.orders[0])
    rows = []
    for p in fractions:
        memory = MemoryBuffer(p, seed)
        for i, task in enumerate(state.stream.tasks):
            memory.populate(task, i + 1, state.stream.global_map(i))
        swept = dataclasses.replace(state, memory=memory)
        routers = fit_routers(swept, config.router, (regime,))
        rep = evaluate(swept, routers, mode, regime, _eval_ids(swept, regime))
        rows.append({"seed": seed, "fraction": p, "memory_size": len(memory), "average": rep["average"]})
    return rows


def sweep_memory(config: RunConfig, fractions, seeds, mode: str = "wavg", regime: str = "CIL",
                 workers: int = 1) -> list[dict]:
    """Re-sample memory and refit routers per fraction; adapters are trained once per seed.

    Returns one row per (seed, fraction).
    """
    fractions = list(fractions)
    if not fractions:
        raise ContractError("no memory fractions given")
    if any(p <= 0 for p in fractions):
        raise ContractError("memory fractions must be > 0: the routers need stored examples")
    if fractions != sorted(fractions):
        raise ContractError("memory fractions must be sorted ascending")
    fn = functools.partial(_sweep_seed, config=config, fractions=fractions, mode=mode, regime=regime)
    return [row for rows in _map_seeds(fn, seeds, workers) for row in rows]


def _ablate_seed(seed, config, regime):
    state = build_state(config, seed, config.orders[0])
    results, routing = [], {}
    for relax in RELAXATIONS:
        cfg = dataclasses.replace(config.router, relaxation=relax)
        routers = fit_routers(state, cfg, (regime,))
        rep = evaluate(state, routers, "wavg", regime, _eval_ids(state, regime))
        results.append({"seed": seed, "relaxation": relax, "average": rep["average"], "per_task": rep["per_task"]})
        routing[relax] = routing_matrices(state, routers, regime)
    return results, routing


def ablate_relaxation(config: RunConfig, seeds, regime: str = "CIL", workers: int = 1) -> dict:
    """Same trained adapters per seed; routers fitted with Gumbel-sigmoid and with softmax.

    ``routing`` holds each mode's (L, T, E) test-set routing matrix for the first seed.
    """
    seeds = list(seeds)
    fn = functools.partial(_ablate_seed, config=config, regime=regime)
    per_seed = _map_seeds(fn, seeds, workers)
    out = {"seeds": seeds, "results": [r for res, _ in per_seed for r in res],
           "routing": {k: v.tolist() for k, v in per_seed[0][1].items()} if per_seed else {}}
    for relax in RELAXATIONS:
        vals = [r["average"] for r in out["results"] if r["relaxation"] == relax]
        out[f"mean_{relax}"] = float(np.mean(vals)) if vals else float("nan")
    return out


# -- persistence ----------------------------------------------------------------

def save_state(state: TrainedState, directory: Path) -> None:
    """Backbone, adapters, heads, memory and the (ordered) stream under ``directory``."""
    directory = Path(directory)
    state.backbone.save(directory / "backbone.bin")
    state.bank.save(directory)
    for i, head in enumerate(state.heads):
        tensorio.save(directory / f"head_task{i + 1}.bin", head.arrays(), {"task": state.stream.tasks[i].name})
    state.memory.to_jsonl(directory / "memory.jsonl")
    export_jsonl(state.stream, directory / "stream.jsonl")
    meta = {"seed": state.seed, "order": state.stream.order, "family": state.stream.family,
            "memory_fraction": state.memory.fraction, "num_tasks": state.num_tasks, "logs": state.logs}
    tensorio.atomic_write(directory / "state.json", json.dumps(meta, indent=1, sort_keys=True))


def load_state(directory: Path) -> TrainedState:
    directory = Path(directory)
    meta = json.loads((directory / "state.json").read_text(encoding="utf-8"))
    backbone = Backbone.load(directory / "backbone.bin")
    T = int(meta["num_tasks"])
    bank = AdapterBank.load(directory, T, meta["seed"])
    bank.freeze_all()
    heads = []
    for t in range(1, T + 1):
        arrays, _ = tensorio.load(directory / f"head_task{t}.bin")
        head = TaskHead(backbone.config.hidden_dim, arrays["bias"].shape[0], arrays["weight"], arrays["bias"])
        head.freeze()
        heads.append(head)
    stream = ingest_jsonl(directory / "stream.jsonl", directory / "stream.schema.json")
    stream = TaskStream(stream.tasks, meta["family"], meta["order"], stream.orders)
    memory = MemoryBuffer.from_jsonl(directory / "memory.jsonl", meta["memory_fraction"], meta["seed"])
    return TrainedState(backbone, bank, heads, stream, memory, meta["seed"], meta["logs"])


def save_routers(routers: Routers, directory: Path) -> list[Path]:
    directory = Path(directory)
    written = []
    if routers.cil is not None:
        routers.cil.save(directory / "router_cil.bin")
        written.append(directory / "router_cil.bin")
    for tid, stack in sorted(routers.til.items()):
        stack.save(directory / f"router_til_task{tid}.bin")
        written.append(directory / f"router_til_task{tid}.bin")
    return written


def load_routers(state: TrainedState, directory: Path) -> Routers:
    """Reload saved stacks; static merge weights are recomputed from memory."""
    directory = Path(directory)
    bb, bank = state.backbone, state.bank
    routers = Routers()
    path = directory / "router_cil.bin"
    if path.exists():
        routers.cil = RouterStack.load(path)
        view = state.memory.router_training_view("CIL")
        routers.static["CIL"] = average_routing(routers.cil, bb, bank, view.tokens)
    for tid in range(1, state.num_tasks + 1):
        path = directory / f"router_til_task{tid}.bin"
        if path.exists():
            routers.til[tid] = RouterStack.load(path)
            view = state.memory.router_training_view("TIL", tid)
            routers.static[f"TIL:{tid}"] = average_routing(routers.til[tid], bb, bank, view.tokens)
    return routers
