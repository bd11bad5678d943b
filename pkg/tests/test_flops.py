import pytest

from adaptroute.backbone import BackboneConfig
from adaptroute.flops import adapter_path_flops, base_flops, estimate_flops, flops_table, router_flops

BERT_BASE = BackboneConfig(num_layers=12, hidden_dim=768, num_heads=12, ffn_dim=3072, vocab_size=30522, max_seq_len=512)


def brute_force_base(cfg, n, classes):
    """Count multiply-adds of each matrix product one by one."""
    d, f = cfg.hidden_dim, cfg.ffn_dim
    macs = 0
    for _ in range(cfg.num_layers):
        macs += 3 * n * d * d        # q, k, v projections
        macs += n * n * d            # scores over all heads
        macs += n * n * d            # weighted values
        macs += n * d * d            # output projection
        macs += n * d * f + n * f * d  # feed-forward
    macs += d * classes
    return 2 * macs


@pytest.mark.parametrize("cfg", [BackboneConfig(), BERT_BASE])
def test_base_matches_brute_force(cfg):
    assert base_flops(cfg, 128, 2) == brute_force_base(cfg, 128, 2)


def test_method_structure():
    cfg, T, r, n = BackboneConfig(), 5, 8, 128
    table = {e.method: e.flops for e in flops_table(cfg, T, r, n)}
    path = adapter_path_flops(cfg, n, r)
    assert path == 2 * cfg.num_layers * 2 * (n * cfg.hidden_dim * r * 2)
    assert table["merge"] == table["centroid"] == table["base"] + path
    assert table["wavg"] == table["base"] + T * path + router_flops(cfg, T)
    assert table["base"] < table["merge"] < table["wavg"]


def test_wavg_grows_linearly_in_tasks():
    cfg = BackboneConfig()
    f = [estimate_flops(cfg, "wavg", t).flops for t in (1, 2, 3, 4)]
    steps = {b - a for a, b in zip(f, f[1:])}
    assert len(steps) == 1
    assert estimate_flops(cfg, "merge", 1).flops == estimate_flops(cfg, "merge", 9).flops


def test_bert_base_overhead_ratio():
    # with five rank-8 adapters on a BERT-base encoder at 128 tokens the extra
    # cost of output averaging over a single merged adapter is about 4x the
    # cost of the merged adapter over the bare encoder (published 4.31 vs 1.07)
    t = {e.method: e.flops for e in flops_table(BERT_BASE, 5, 8, 128)}
    ratio = (t["wavg"] - t["merge"]) / (t["merge"] - t["base"])
    assert 4.31 / 1.07 - 0.05 < ratio < 4.315 / 1.065
    assert ratio == pytest.approx(4.0, abs=0.01)


def test_unknown_method():
    with pytest.raises(ValueError):
        estimate_flops(BackboneConfig(), "ensemble", 3)
