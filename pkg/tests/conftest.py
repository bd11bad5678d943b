import dataclasses
from pathlib import Path

import numpy as np
import pytest

from adaptroute.adapters import AdapterConfig
from adaptroute.backbone import BackboneConfig, build_backbone
from adaptroute.config import RunConfig, TrainConfig
from adaptroute.data import GeneratorSpec, generate_stream
from adaptroute.harness import run_stream
from adaptroute.router import RouterConfig

REPO = Path(__file__).resolve().parents[1]
CONFIGS = REPO / "configs"

# acceptance results, printed once at the end of the session
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


TINY_BACKBONE = BackboneConfig(num_layers=2, hidden_dim=16, num_heads=2, ffn_dim=32, vocab_size=64, max_seq_len=16)


def tiny_spec(num_tasks=3, family="far-domain", seed=0, **kw) -> GeneratorSpec:
    base = dict(family=family, num_tasks=num_tasks, classes_per_task=2, examples_per_split=(40, 20, 20),
                vocab_size=64, min_len=6, max_len=12, seed=seed)
    base.update(kw)
    return GeneratorSpec(**base)


def small_config(num_tasks=2, family="far-domain", **kw) -> RunConfig:
    """A fast config that still learns: 2-layer encoder, desk learning rates."""
    cfg = RunConfig(
        backbone=BackboneConfig(num_layers=2, hidden_dim=32, num_heads=2, ffn_dim=64, vocab_size=128, max_seq_len=16),
        adapter=AdapterConfig(rank=4),
        train=TrainConfig(lr=3e-3, max_epochs=8, patience=2),
        router=RouterConfig(lr=3e-2, epochs=15),
        data=GeneratorSpec(family=family, num_tasks=num_tasks, examples_per_split=(80, 30, 40),
                           vocab_size=96, min_len=8, max_len=14),
    )
    for k, v in kw.items():
        setattr(cfg, k, v)
    return cfg.validate()


@pytest.fixture(scope="session")
def tiny_backbone():
    return build_backbone(TINY_BACKBONE)


@pytest.fixture(scope="session")
def tiny_state():
    """Three tasks trained for a few epochs on the tiny encoder."""
    stream = generate_stream(tiny_spec(3))
    bb = build_backbone(TINY_BACKBONE)
    return run_stream(stream, bb, AdapterConfig(rank=4), TrainConfig(lr=3e-3, max_epochs=3, patience=2), 0.25, 0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def replace(obj, **kw):
    return dataclasses.replace(obj, **kw)
