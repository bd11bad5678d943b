import numpy as np
import pytest

from adaptroute import autodiff as ad
from adaptroute.adapters import AdapterBank, AdapterConfig
from adaptroute.backbone import (
    Backbone,
    BackboneConfig,
    CLS_ID,
    PAD_ID,
    SharedHead,
    TaskHead,
    build_backbone,
    encode,
    parameter_count,
)
from adaptroute.composer import SingleAdapterOverlay, WeightedOverlay, fixed_weights
from adaptroute.errors import ConfigError, ContractError

from conftest import TINY_BACKBONE


def tokens_for(cfg, n=3, length=10, seed=0):
    r = np.random.default_rng(seed)
    t = np.full((n, length), PAD_ID)
    t[:, 0] = CLS_ID
    for i in range(n):
        k = r.integers(3, length)
        t[i, 1:k] = r.integers(3, cfg.vocab_size, size=k - 1)
    return t


def randomise_b(bank, seed=0):
    r = np.random.default_rng(seed)
    for a in bank.adapters:
        for pair in a.pairs.values():
            pair.B.data = r.normal(0, 0.3, pair.B.shape)


def test_parameter_count_formula_matches_enumeration():
    cfg = BackboneConfig(num_layers=2, hidden_dim=32, num_heads=4, ffn_dim=64, vocab_size=100, max_seq_len=16, seed=7)
    bb = build_backbone(cfg)
    assert bb.num_parameters == parameter_count(cfg) == sum(a.size for a in bb.params.values())


def test_same_seed_bitwise_identical():
    a, b = build_backbone(TINY_BACKBONE), build_backbone(TINY_BACKBONE)
    assert a.state_bytes() == b.state_bytes()
    c = build_backbone(BackboneConfig(**{**TINY_BACKBONE.to_dict(), "seed": 1}))
    assert a.state_bytes() != c.state_bytes()


@pytest.mark.parametrize("bad", [dict(num_heads=5, hidden_dim=32), dict(num_layers=0), dict(vocab_size=3)])
def test_invalid_config(bad):
    with pytest.raises(ConfigError):
        BackboneConfig(**bad).validate()


def test_parameters_are_read_only(tiny_backbone):
    with pytest.raises(ValueError):
        tiny_backbone.params["tok_emb"][0, 0] = 1.0


def test_encode_is_deterministic(tiny_backbone):
    t = tokens_for(TINY_BACKBONE)
    head = TaskHead(16, 3, np.random.default_rng(0).normal(size=(16, 3)), np.zeros(3))
    _, l1 = encode(tiny_backbone, t, head=head)
    _, l2 = encode(tiny_backbone, t, head=head)
    np.testing.assert_array_equal(l1.data, l2.data)


def test_zero_adapter_overlay_is_identity(tiny_backbone):
    bank = AdapterBank(AdapterConfig(rank=4))
    bank.add_task_adapter(TINY_BACKBONE, "a")
    t = tokens_for(TINY_BACKBONE)
    head = TaskHead(16, 2, np.random.default_rng(0).normal(size=(16, 2)), np.ones(2))
    _, base = encode(tiny_backbone, t, head=head)
    _, over = encode(tiny_backbone, t, SingleAdapterOverlay(bank[1], 16), head)
    assert np.max(np.abs(base.data - over.data)) == 0.0


def test_one_hot_routing_equals_single_adapter(tiny_backbone):
    bank = AdapterBank(AdapterConfig(rank=4))
    for name in ("a", "b", "c"):
        bank.add_task_adapter(TINY_BACKBONE, name)
    randomise_b(bank)
    t = tokens_for(TINY_BACKBONE, n=4)
    head = TaskHead(16, 2, np.random.default_rng(1).normal(size=(16, 2)), np.zeros(2))
    for tid in (1, 2, 3):
        w = np.eye(3)[tid - 1]
        _, routed = encode(tiny_backbone, t, WeightedOverlay(bank, 2, 16, fixed_weights(w)), head)
        _, single = encode(tiny_backbone, t, SingleAdapterOverlay(bank[tid], 16), head)
        np.testing.assert_allclose(routed.data, single.data, rtol=0, atol=1e-12)


def test_padding_does_not_change_pooled_state(tiny_backbone):
    t = tokens_for(TINY_BACKBONE, length=8)
    padded = np.concatenate([t, np.full((len(t), 4), PAD_ID)], axis=1)
    a, _ = encode(tiny_backbone, t)
    b, _ = encode(tiny_backbone, padded)
    np.testing.assert_allclose(a.pooled.data, b.pooled.data, atol=1e-12)


def test_encoder_state_shapes(tiny_backbone):
    t = tokens_for(TINY_BACKBONE, n=2, length=7)
    state, logits = encode(tiny_backbone, t)
    assert logits is None
    assert len(state.hidden) == len(state.cls) == TINY_BACKBONE.num_layers + 1
    assert state.hidden[-1].shape == (2, 7, 16) and state.pooled.shape == (2, 16)


def test_encode_contract_errors(tiny_backbone):
    with pytest.raises(ContractError):
        encode(tiny_backbone, np.ones((1, TINY_BACKBONE.max_seq_len + 1), dtype=int))
    with pytest.raises(ContractError):
        encode(tiny_backbone, np.array([[CLS_ID, TINY_BACKBONE.vocab_size]]))
    other = BackboneConfig(num_layers=3, hidden_dim=16, num_heads=2, ffn_dim=32, vocab_size=64, max_seq_len=16)
    bank = AdapterBank(AdapterConfig(rank=2))
    bank.add_task_adapter(other, "x")
    with pytest.raises(ContractError):
        encode(tiny_backbone, tokens_for(TINY_BACKBONE), SingleAdapterOverlay(bank[1], 16))


def test_no_gradient_reaches_backbone(tiny_backbone):
    bank = AdapterBank(AdapterConfig(rank=4))
    bank.add_task_adapter(TINY_BACKBONE, "a")
    head = TaskHead(16, 2)
    before = tiny_backbone.state_bytes()
    _, logits = encode(tiny_backbone, tokens_for(TINY_BACKBONE), SingleAdapterOverlay(bank[1], 16), head)
    ad.cross_entropy(logits, np.array([0, 1, 0])).backward()
    assert all(not t.requires_grad for t in tiny_backbone.tensors.values())
    assert tiny_backbone.state_bytes() == before
    assert bank[1].pairs[(0, "q")].B.grad is not None


def test_save_load_round_trip(tmp_path, tiny_backbone):
    tiny_backbone.save(tmp_path / "backbone.bin")
    loaded = Backbone.load(tmp_path / "backbone.bin")
    assert loaded.state_bytes() == tiny_backbone.state_bytes()
    assert loaded.config == tiny_backbone.config


def test_shared_head_disjoint_groups_is_concatenation():
    r = np.random.default_rng(0)
    heads = [TaskHead(4, 2, r.normal(size=(4, 2)), r.normal(size=2)), TaskHead(4, 3, r.normal(size=(4, 3)), r.normal(size=3))]
    h = ad.Tensor(r.normal(size=(5, 4)))
    out = SharedHead(heads, [[0], [1], [2], [3], [4]])(h).data
    np.testing.assert_allclose(out, np.concatenate([heads[0](h).data, heads[1](h).data], axis=1), atol=1e-12)


def test_shared_head_pools_shared_labels():
    r = np.random.default_rng(0)
    heads = [TaskHead(3, 2, r.normal(size=(3, 2)), np.zeros(2)), TaskHead(3, 2, r.normal(size=(3, 2)), np.zeros(2))]
    h = ad.Tensor(r.normal(size=(2, 3)))
    a, b = heads[0](h).data, heads[1](h).data
    out = SharedHead(heads, [[0, 2], [1, 3]])(h).data
    np.testing.assert_allclose(out[:, 0], np.logaddexp(a[:, 0], b[:, 0]), atol=1e-12)


def test_task_head_starts_at_zero():
    head = TaskHead(8, 3)
    assert not head.weight.data.any() and not head.bias.data.any()
    head.freeze()
    assert not any(p.requires_grad for p in head.parameters())
