import numpy as np

from emic.flops import count_flops, linear_flops
from emic.geometry import full_mask, gen_group_mask, mask_from_units
from emic.network import StageConfig


def test_linear_example():
    assert linear_flops(16, 128, 256) == 1_048_576


def test_totals_equal_sum_of_parts():
    rep = count_flops(StageConfig(), gen_group_mask(128, 128, 0.5, 0))
    assert rep.total == sum(rep.stages.values()) == sum(rep.categories.values())
    assert rep.total == sum(sum(m.values()) for m in rep.modules.values())


def test_halving_units_halves_linear_terms():
    cfg = StageConfig()
    units = np.zeros((8, 8), bool)
    units[:4] = True
    full = count_flops(cfg, mask_from_units(units))
    units[:2] = False
    half = count_flops(cfg, mask_from_units(units))
    assert full.categories["linear"] == 2 * half.categories["linear"]
    assert full.module_total("encoder.embed") == 2 * half.module_total("encoder.embed")


def test_attention_terms_follow_the_formula():
    cfg = StageConfig()
    mask = gen_group_mask(128, 128, 0.5, 3)
    M = mask.n_visible
    rep = count_flops(cfg, mask)
    # stage 0: width 32 -> 2 heads of 16, 8x8 slots per unit
    S, H, dh = 64, 2, 16
    assert rep.modules["encoder.s0.b0"]["attention"] == H * (S * 4 * M * M * dh + M * 4 * S * S * dh)
    # last stage: single-level attention over M tokens, width 256 -> 16 heads
    assert rep.modules["encoder.s3.b0"]["attention"] == 16 * 4 * M * M * 16
    qkv_out = linear_flops(M * S, 32, 96, True) + linear_flops(M * S, 32, 32, True)
    ffn = linear_flops(M * S, 32, 64, True) + linear_flops(M * S, 64, 32, True)
    assert rep.modules["encoder.s0.b0"]["linear"] == qkv_out + ffn


def test_report_text_and_ratio():
    rep = count_flops(StageConfig(), full_mask(64, 64))
    text = rep.as_text()
    assert f"total_flops={rep.total}" in text
    assert "visible_ratio=1.000000" in text
    assert rep.visible_units == 16
