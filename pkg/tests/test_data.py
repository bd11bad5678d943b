import json
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from adaptroute.backbone import CLS_ID, PAD_ID
from adaptroute.data import (
    FAMILIES,
    GeneratorSpec,
    check_disjoint,
    default_orders,
    export_jsonl,
    generate_stream,
    ingest_jsonl,
)
from adaptroute.errors import ConfigError, ContractError, ParseError

from conftest import tiny_spec


def naive_bayes_accuracy(task, vocab):
    """Multinomial naive Bayes fitted on train, scored on test."""
    tr = task.train
    C = len(task.classes)
    counts = np.ones((C, vocab))
    for row, y in zip(tr.tokens, tr.labels):
        np.add.at(counts[y], row[(row != PAD_ID) & (row != CLS_ID)], 1)
    logp = np.log(counts / counts.sum(axis=1, keepdims=True))
    prior = np.log(np.bincount(tr.labels, minlength=C) / len(tr))
    correct = 0
    for row, y in zip(task.test.tokens, task.test.labels):
        toks = row[(row != PAD_ID) & (row != CLS_ID)]
        correct += int(np.argmax(prior + logp[:, toks].sum(axis=1)) == y)
    return correct / len(task.test)


@pytest.mark.parametrize("family", ["far-domain", "multilingual-like", "hierarchical"])
def test_tasks_are_learnable_by_a_bag_of_words_oracle(family):
    spec = GeneratorSpec(family=family, num_tasks=3, examples_per_split=(200, 20, 100), vocab_size=96)
    for task in generate_stream(spec).tasks:
        assert naive_bayes_accuracy(task, 96) >= 0.97, task.name


def test_near_domain_is_learnable_but_harder():
    spec = GeneratorSpec(family="near-domain", num_tasks=3, examples_per_split=(200, 20, 100), vocab_size=96)
    accs = [naive_bayes_accuracy(t, 96) for t in generate_stream(spec).tasks]
    assert min(accs) >= 0.9


def test_far_domain_vocabularies_are_disjoint():
    stream = generate_stream(tiny_spec(3))
    used = []
    for task in stream.tasks:
        rows = task.train.tokens
        used.append(set(rows[(rows != PAD_ID) & (rows != CLS_ID)].tolist()))
    assert not (used[0] & used[1]) and not (used[1] & used[2])


@pytest.mark.parametrize("family", FAMILIES)
def test_deterministic(family):
    spec = tiny_spec(2 if family != "hierarchical" else 3, family, vocab_size=96)
    a, b = generate_stream(spec), generate_stream(spec)
    for ta, tb in zip(a.tasks, b.tasks):
        for s in ("train", "val", "test"):
            np.testing.assert_array_equal(ta.split(s).tokens, tb.split(s).tokens)
            np.testing.assert_array_equal(ta.split(s).labels, tb.split(s).labels)
    other = generate_stream(tiny_spec(2 if family != "hierarchical" else 3, family, seed=1, vocab_size=96))
    assert not np.array_equal(a.tasks[0].train.tokens, other.tasks[0].train.tokens)


def test_multilingual_label_sets_are_shared():
    stream = generate_stream(tiny_spec(3, "multilingual-like", vocab_size=96))
    assert all(t.classes == stream.tasks[0].classes for t in stream.tasks)
    assert len(stream.global_classes) == 3
    assert stream.column_groups() == [[0, 3, 6], [1, 4, 7], [2, 5, 8]]


def test_hierarchical_second_task_subsumes_first():
    stream = generate_stream(tiny_spec(3, "hierarchical", vocab_size=96))
    core, ext = stream.tasks[0], stream.tasks[1]
    assert set(core.classes) < set(ext.classes)
    assert len(stream.global_classes) == len(ext.classes) + len(stream.tasks[2].classes)


def test_fewer_than_two_classes_rejected():
    with pytest.raises(ConfigError):
        generate_stream(tiny_spec(2, classes_per_task=1))


@pytest.mark.parametrize("bad", [dict(family="poetry"), dict(vocab_size=8), dict(min_len=9, max_len=4),
                                 dict(examples_per_split=(10, 0, 5)), dict(class_priors=(0.2, 0.2))])
def test_spec_validation(bad):
    with pytest.raises(ConfigError):
        tiny_spec(2, **bad).validate()


def test_ids_unique_and_splits_disjoint():
    stream = generate_stream(tiny_spec(3))
    check_disjoint(stream)
    ids = np.concatenate([t.split(s).ids for t in stream.tasks for s in ("train", "val", "test")])
    assert len(set(ids.tolist())) == len(ids)


def test_check_disjoint_detects_overlap():
    stream = generate_stream(tiny_spec(1))
    stream.tasks[0].val.ids[0] = stream.tasks[0].train.ids[0]
    with pytest.raises(ContractError):
        check_disjoint(stream)


def test_class_priors_respected():
    spec = tiny_spec(1, examples_per_split=(1000, 10, 10), class_priors=(0.7, 0.3))
    labels = generate_stream(spec).tasks[0].train.labels
    freq = np.bincount(labels, minlength=2) / len(labels)
    assert np.all(np.abs(freq - [0.7, 0.3]) <= 0.02)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_uniform_priors_balanced(seed):
    labels = generate_stream(tiny_spec(1, seed=seed, examples_per_split=(1000, 5, 5))).tasks[0].train.labels
    assert abs(labels.mean() - 0.5) <= 0.02


def test_row_layout():
    spec = tiny_spec(2)
    stream = generate_stream(spec)
    tok = stream.tasks[0].train.tokens
    assert tok.shape[1] == spec.max_len + 1 and np.all(tok[:, 0] == CLS_ID)
    lengths = (tok[:, 1:] != PAD_ID).sum(axis=1)
    assert lengths.min() >= spec.min_len and lengths.max() <= spec.max_len


def test_default_orders():
    orders = default_orders(["a", "b", "c", "d"])
    assert orders == {"i": ["a", "b", "c", "d"], "ii": ["d", "c", "b", "a"], "iii": ["a", "c", "b", "d"]}
    stream = generate_stream(tiny_spec(3))
    assert [t.name for t in stream.reorder("ii").tasks] == ["task3", "task2", "task1"]
    with pytest.raises(ConfigError):
        stream.reorder("iv")


def test_jsonl_round_trip_is_identity(tmp_path):
    stream = generate_stream(tiny_spec(2, "multilingual-like", vocab_size=96))
    schema = export_jsonl(stream, tmp_path / "stream.jsonl")
    back = ingest_jsonl(tmp_path / "stream.jsonl", schema)
    assert back.orders == stream.orders and back.family == stream.family
    for a, b in zip(stream.tasks, back.tasks):
        assert a.name == b.name and a.classes == b.classes
        for s in ("train", "val", "test"):
            np.testing.assert_array_equal(a.split(s).ids, b.split(s).ids)
            np.testing.assert_array_equal(a.split(s).tokens, b.split(s).tokens)
            np.testing.assert_array_equal(a.split(s).labels, b.split(s).labels)


def _schema(tmp_path, **extra):
    schema = {"tasks": [{"name": "a", "labels": ["x", "y"]}], **extra}
    (tmp_path / "s.json").write_text(json.dumps(schema))
    return tmp_path / "s.json"


def _write(tmp_path, lines):
    p = tmp_path / "d.jsonl"
    p.write_text("\n".join(lines) + "\n")
    return p


def test_empty_file(tmp_path):
    with pytest.raises(ParseError):
        ingest_jsonl(_write(tmp_path, [""]), _schema(tmp_path))


def test_malformed_line_reports_line_number(tmp_path):
    good = json.dumps({"task": "a", "split": "train", "tokens": [5], "label": "x"})
    with pytest.raises(ParseError) as exc:
        ingest_jsonl(_write(tmp_path, [good, good, "{oops"]), _schema(tmp_path))
    assert exc.value.line == 3 and "line 3" in str(exc.value)


@pytest.mark.parametrize("rec", [
    {"task": "a", "split": "train", "tokens": [5], "label": "z"},
    {"task": "b", "split": "train", "tokens": [5], "label": "x"},
    {"task": "a", "split": "dev", "tokens": [5], "label": "x"},
    {"task": "a", "split": "train", "tokens": [-1], "label": "x"},
    {"task": "a", "split": "train", "label": "x"},
    {"task": "a", "split": "train", "text": "hello", "label": "x"},
    {"task": "a", "split": "train", "tokens": [5], "label": "x", "id": "7"},
])
def test_bad_records(tmp_path, rec):
    with pytest.raises(ParseError) as exc:
        ingest_jsonl(_write(tmp_path, [json.dumps(rec)]), _schema(tmp_path))
    assert exc.value.line == 1


def test_duplicate_ids_rejected(tmp_path):
    rec = json.dumps({"task": "a", "split": "train", "tokens": [5], "label": "x", "id": 3})
    with pytest.raises(ParseError) as exc:
        ingest_jsonl(_write(tmp_path, [rec, rec]), _schema(tmp_path))
    assert exc.value.line == 2


def test_text_records_truncation_and_split_ratios(tmp_path):
    vocab = ["[PAD]", "[CLS]", "[UNK]", "good", "bad", "film"]
    (tmp_path / "v.txt").write_text("\n".join(vocab))
    recs = [json.dumps({"task": "a", "text": ("good film " * 5 if i % 2 else "bad movie"), "label": "xy"[i % 2]})
            for i in range(100)]
    stream = ingest_jsonl(_write(tmp_path, recs), _schema(tmp_path), tmp_path / "v.txt",
                          max_seq_len=6, split_ratios=(0.6, 0.2, 0.2), seed=3)
    task = stream.tasks[0]
    assert (len(task.train), len(task.val), len(task.test)) == (60, 20, 20)
    check_disjoint(stream)
    row = task.train.tokens[task.train.labels == 1][0]
    assert row.tolist() == [CLS_ID, 3, 5, 3, 5, 3]
    row = task.train.tokens[task.train.labels == 0][0]
    assert row.tolist() == [CLS_ID, 4, 2, PAD_ID, PAD_ID, PAD_ID]


def test_missing_split_needs_ratios(tmp_path):
    rec = json.dumps({"task": "a", "tokens": [5], "label": "x"})
    with pytest.raises(ParseError):
        ingest_jsonl(_write(tmp_path, [rec]), _schema(tmp_path))


def test_bad_order_in_schema(tmp_path):
    rec = json.dumps({"task": "a", "split": "train", "tokens": [5], "label": "x"})
    with pytest.raises(ParseError):
        ingest_jsonl(_write(tmp_path, [rec]), _schema(tmp_path, orders={"i": ["a", "b"]}))


def test_global_class_map_for_far_domain():
    stream = generate_stream(tiny_spec(3))
    assert [stream.global_map(i).tolist() for i in range(3)] == [[0, 1], [2, 3], [4, 5]]
    assert Counter(len(g) for g in stream.column_groups()) == {1: 6}
