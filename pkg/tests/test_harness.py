import dataclasses

import numpy as np
import pytest

from adaptroute.config import TrainConfig
from adaptroute.data import generate_stream
from adaptroute.errors import ContractError
from adaptroute.harness import (
    ablate_relaxation,
    build_state,
    evaluate,
    fit_routers,
    load_routers,
    load_state,
    oracle_task_ids,
    predict,
    routing_matrices,
    save_routers,
    save_state,
    sweep_memory,
    train_task,
)
from adaptroute.adapters import AdapterBank

from conftest import small_config

TRAIN = TrainConfig(lr=3e-3, max_epochs=12, patience=4)


@pytest.fixture(scope="module")
def three():
    cfg = small_config(3, train=TRAIN)
    state = build_state(cfg, 0)
    return cfg, state, fit_routers(state, cfg.router)


def snapshot(state, routers=None):
    parts = [state.backbone.state_bytes()] + [a.to_bytes() for a in state.bank.adapters]
    parts += [h.weight.data.tobytes() + h.bias.data.tobytes() for h in state.heads]
    if routers is not None:
        parts += [routers.cil.to_bytes()] + [s.to_bytes() for s in routers.til.values()]
    return parts


def test_each_task_learns(three):
    _, state, _ = three
    assert all(log["best_val_acc"] >= 0.95 for log in state.logs)
    assert all(log["epochs"] <= TRAIN.max_epochs for log in state.logs)


def test_every_adapter_and_head_is_frozen(three):
    _, state, _ = three
    assert state.bank.trainable_mask == [False] * 3
    assert not any(p.requires_grad for h in state.heads for p in h.parameters())


def test_til_upper_bound_equals_standalone(three):
    cfg, state, _ = three
    for i, task in enumerate(state.stream.tasks):
        bank = AdapterBank(cfg.adapter, state.seed)
        _, head, _ = train_task(state.backbone, bank, task, cfg.train, state.seed)
        assert bank[1].to_bytes() == state.bank[i + 1].to_bytes()
        assert head.weight.data.tobytes() == state.heads[i].weight.data.tobytes()
    rep = evaluate(state, None, "upper-bound", "TIL", oracle_task_ids(state))
    assert rep["average"] >= 0.9


def test_til_needs_task_ids(three):
    _, state, routers = three
    for ids in (None, [1, 2], [1, 2, 4]):
        with pytest.raises(ContractError):
            evaluate(state, routers, "wavg", "TIL", ids)


def test_til_uses_the_given_ids(three):
    _, state, _ = three
    own = predict(state, None, "upper-bound", "TIL", 0, task_id=1)
    other = predict(state, None, "upper-bound", "TIL", 0, task_id=2)
    assert np.mean(own[0] == own[1]) > np.mean(other[0] == other[1])


def test_routed_modes_need_routers(three):
    _, state, _ = three
    for mode in ("wavg", "merge-per-input", "merge-static"):
        with pytest.raises(ContractError):
            evaluate(state, None, mode, "CIL")
    with pytest.raises(ContractError):
        evaluate(state, None, "ensemble", "CIL")


def test_evaluation_does_not_mutate(three):
    _, state, routers = three
    before = snapshot(state, routers)
    for mode in ("wavg", "merge-per-input", "merge-static", "centroid", "lower-bound", "upper-bound"):
        evaluate(state, routers, mode, "CIL")
        evaluate(state, routers, mode, "TIL", oracle_task_ids(state))
    assert snapshot(state, routers) == before


def test_wavg_and_per_input_merge_agree(three):
    _, state, routers = three
    a = evaluate(state, routers, "wavg", "CIL")
    b = evaluate(state, routers, "merge-per-input", "CIL")
    assert a["per_task"] == b["per_task"]


def test_til_router_prefers_own_adapter(three):
    _, state, routers = three
    for tid in (1, 2, 3):
        scores = routing_matrices(state, routers, "TIL", tid).mean(axis=(0, 2))
        assert scores.argmax() == tid - 1


def test_routing_matrix_shape(three):
    _, state, routers = three
    m = routing_matrices(state, routers)
    assert m.shape == (2, 3, 3) and np.all((m >= 0) & (m <= 1))


def test_routers_only_train_the_routers(three):
    cfg, state, _ = three
    before = snapshot(state)
    fit_routers(state, dataclasses.replace(cfg.router, epochs=2), ("CIL",))
    assert snapshot(state) == before


def test_single_task_stream():
    cfg = small_config(1, train=TRAIN)
    state = build_state(cfg, 0)
    routers = fit_routers(state, cfg.router)
    ub_til = evaluate(state, routers, "upper-bound", "TIL", [1])["average"]
    for mode in ("wavg", "merge-static", "centroid", "lower-bound", "upper-bound"):
        assert evaluate(state, routers, mode, "CIL")["average"] == evaluate(state, None if mode in (
            "centroid", "lower-bound", "upper-bound") else routers, mode, "TIL", [1])["average"]
    for mode in ("centroid", "lower-bound"):
        assert evaluate(state, None, mode, "TIL", [1])["average"] == ub_til


def test_save_load_reproduces_evaluation(three, tmp_path):
    _, state, routers = three
    save_state(state, tmp_path)
    save_routers(routers, tmp_path)
    s2 = load_state(tmp_path)
    r2 = load_routers(s2, tmp_path)
    assert snapshot(s2, r2) == snapshot(state, routers)
    for mode in ("wavg", "merge-static", "centroid"):
        assert evaluate(s2, r2, mode, "CIL") == evaluate(state, routers, mode, "CIL")
    ids = oracle_task_ids(state)
    assert evaluate(s2, r2, "wavg", "TIL", ids) == evaluate(state, routers, "wavg", "TIL", ids)


def test_task_order_changes_the_stream():
    cfg = small_config(3, train=TRAIN)
    state = build_state(cfg, 0, "ii")
    assert [t.name for t in state.stream.tasks] == ["task3", "task2", "task1"]
    assert state.stream.order == "ii"


def test_build_is_deterministic():
    cfg = small_config(2, train=TRAIN)
    a, b = build_state(cfg, 3), build_state(cfg, 3)
    assert snapshot(a) == snapshot(b)
    assert snapshot(build_state(cfg, 4)) != snapshot(a)


def test_fixed_stream_can_be_passed_in():
    cfg = small_config(2, train=TRAIN)
    stream = generate_stream(dataclasses.replace(cfg.data, seed=9))
    state = build_state(cfg, 9, stream=stream)
    assert state.stream.tasks[0].train.tokens is stream.tasks[0].train.tokens


@pytest.mark.parametrize("fractions", [[], [0.0, 0.1], [0.2, 0.1]])
def test_sweep_rejects_bad_fractions(fractions):
    with pytest.raises(ContractError):
        sweep_memory(small_config(2), fractions, [0])


def test_sweep_rows():
    cfg = small_config(2, train=TRAIN)
    cfg.router = dataclasses.replace(cfg.router, epochs=3)
    rows = sweep_memory(cfg, [0.05, 0.5], [0, 1])
    assert [(r["seed"], r["fraction"]) for r in rows] == [(0, 0.05), (0, 0.5), (1, 0.05), (1, 0.5)]
    assert [r["memory_size"] for r in rows[:2]] == [8, 80]
    assert all(0 <= r["average"] <= 1 for r in rows)


def test_workers_do_not_change_results():
    cfg = small_config(2, train=TRAIN)
    cfg.router = dataclasses.replace(cfg.router, epochs=2)
    assert sweep_memory(cfg, [0.1], [0, 1], workers=2) == sweep_memory(cfg, [0.1], [0, 1], workers=1)


def test_ablation_with_one_task_is_a_tie():
    cfg = small_config(1, train=TRAIN)
    cfg.router = dataclasses.replace(cfg.router, epochs=3)
    out = ablate_relaxation(cfg, [0])
    assert out["mean_gumbel-sigmoid"] == out["mean_softmax"]
    assert set(out["routing"]) == {"gumbel-sigmoid", "softmax"}
    assert np.allclose(np.array(out["routing"]["softmax"]), 1.0)


def test_ablation_til_regime():
    cfg = small_config(2, train=TRAIN)
    cfg.router = dataclasses.replace(cfg.router, epochs=2)
    out = ablate_relaxation(cfg, [0], regime="TIL")
    assert len(out["results"]) == 2 and np.array(out["routing"]["gumbel-sigmoid"]).shape == (2, 2, 2)
