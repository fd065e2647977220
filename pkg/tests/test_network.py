import numpy as np
import pytest

from emic import numcore as nc
from emic.geometry import full_mask, gen_group_mask, initial_index_list, mask_from_units, merge_indices, split_indices
from emic.network import (StageConfig, TokenSeq, decode_net, emic_block, encode_net, init_block, init_decoder,
                          init_encoder, init_linear, patch_embed, patch_merge, patch_split)
from conftest import rel_err


def _linear_params(prefix, din, dout, seed=0):
    params = nc.ModelParams(seed)
    init_linear(params, prefix, din, dout, 0.5)
    params[f"{prefix}.b"].data = np.random.default_rng(seed).standard_normal(dout)
    return params


def test_patch_embed_examples():
    params = _linear_params("enc.embed", 12, 16)
    out = patch_embed(np.zeros((5, 12)), params).data
    assert np.array_equal(out, np.tile(params["enc.embed.b"].data, (5, 1)))
    params["enc.embed.w"].data = np.eye(12, 16)
    params["enc.embed.b"].data = np.zeros(16)
    x = np.random.default_rng(1).random((5, 12))
    assert np.array_equal(patch_embed(x, params).data[:, :12], x)
    p2 = _linear_params("enc.embed", 12, 16, 3)
    ref = x @ p2["enc.embed.w"].data + p2["enc.embed.b"].data
    assert np.max(np.abs(patch_embed(x, p2).data - ref)) < 1e-12


def test_block_with_zero_output_projections_is_identity():
    params = nc.ModelParams(0)
    init_block(params, "b", 16, 2, 0.3)
    params["b.attn.out.w"].data[:] = 0.0
    params["b.fc2.w"].data[:] = 0.0
    lst = initial_index_list(gen_group_mask(32, 32, 0.5, 0))
    x = np.random.default_rng(0).standard_normal((len(lst), 16))
    out = emic_block(x, lst, StageConfig().attn(16), params, "b").data
    assert np.array_equal(out, x)


def test_block_input_gradient():
    params = nc.ModelParams(1)
    init_block(params, "b", 16, 2, 0.3)
    lst = merge_indices(merge_indices(initial_index_list(full_mask(32, 16))))
    cfg = StageConfig().attn(16)
    rng = np.random.default_rng(2)
    x0 = rng.standard_normal((len(lst), 16))
    w = rng.standard_normal(x0.shape)

    def f(x):
        return float(np.sum(emic_block(x, lst, cfg, params, "b").data * w))

    xt = nc.Tensor(x0, "x", tracked=True)
    with nc.Tape() as tape:
        loss = nc.sum_all(nc.mul(emic_block(xt, lst, cfg, params, "b"), w))
    g = nc.backward(tape, loss)["x"]
    for _ in range(20):
        i, j = rng.integers(x0.shape[0]), rng.integers(16)
        xp, xm = x0.copy(), x0.copy()
        xp[i, j] += 1e-5
        xm[i, j] -= 1e-5
        fd = (f(xp) - f(xm)) / 2e-5
        assert rel_err(fd, g[i, j], 1e-8) < 1e-4


def test_patch_merge_gather_oracle():
    mask = gen_group_mask(64, 48, 0.6, 3)
    lst = initial_index_list(mask)
    C = 6
    feats = np.random.default_rng(4).standard_normal((len(lst), C))
    params = _linear_params("m", 4 * C, 2 * C)
    out = patch_merge(TokenSeq(feats, lst), params, "m")
    assert len(out) * 4 == len(lst) and out.channels == 2 * C
    assert out.index_list == merge_indices(lst)
    pos = {int(v): j for j, v in enumerate(lst.indices)}
    W, b = params["m.w"].data, params["m.b"].data
    for j, idx in enumerate(out.index_list.indices):
        r, c = divmod(int(idx), out.index_list.r1)
        kids = [(2 * r + dy) * lst.r1 + 2 * c + dx for dy in (0, 1) for dx in (0, 1)]  # TL, TR, BL, BR
        cat = np.concatenate([feats[pos[k]] for k in kids])
        assert np.max(np.abs(out.features.data[j] - (cat @ W + b))) < 1e-12


def test_patch_split_gather_oracle():
    mask = gen_group_mask(64, 64, 0.5, 5)
    lst = merge_indices(merge_indices(initial_index_list(mask)))
    C = 8
    feats = np.random.default_rng(6).standard_normal((len(lst), C))
    params = _linear_params("s", C, 2 * C)
    out = patch_split(TokenSeq(feats, lst), params, "s")
    assert len(out) == 4 * len(lst) and out.channels == C // 2
    assert out.index_list == split_indices(lst)
    lin = feats @ params["s.w"].data + params["s.b"].data
    pos = {int(v): j for j, v in enumerate(out.index_list.indices)}
    half = C // 2
    for j, idx in enumerate(lst.indices):
        r, c = divmod(int(idx), lst.r1)
        for q, (dy, dx) in enumerate([(0, 0), (0, 1), (1, 0), (1, 1)]):
            child = (2 * r + dy) * out.index_list.r1 + 2 * c + dx
            assert np.array_equal(out.features.data[pos[child]], lin[j, q * half:(q + 1) * half])


@pytest.fixture(scope="module")
def default_params():
    cfg = StageConfig()
    params = nc.ModelParams(0)
    init_encoder(params, cfg)
    init_decoder(params, cfg)
    return cfg, params


def test_encode_net_shapes_and_token_accounting(default_params):
    cfg, params = default_params
    img = np.random.default_rng(0).random((64, 64, 3))
    y = encode_net(img, full_mask(64, 64), params, cfg)
    assert y.features.shape == (16, 128)
    half = mask_from_units(np.array([[1, 0, 1, 0]] * 4, bool))
    assert len(encode_net(img, half, params, cfg)) == 8


def test_encode_net_ignores_masked_pixels(default_params):
    cfg, params = default_params
    rng = np.random.default_rng(1)
    mask = gen_group_mask(64, 64, 0.5, 8)
    img = rng.random((64, 64, 3))
    y1 = encode_net(img, mask, params, cfg).features.data
    img2 = img.copy()
    img2[~mask.pixel_mask()] = rng.random(((~mask.pixel_mask()).sum(), 3)) * 1e6
    assert np.array_equal(encode_net(img2, mask, params, cfg).features.data, y1)


def test_decode_net_zero_fill(default_params):
    cfg, params = default_params
    mask = gen_group_mask(48, 64, 0.5, 9)
    lst = merge_indices(merge_indices(merge_indices(initial_index_list(mask))))
    y = TokenSeq(np.random.default_rng(2).standard_normal((len(lst), 128)), lst)
    out = decode_net(y, params, cfg)
    assert out.shape == (48, 64, 3)
    pm = mask.pixel_mask()
    assert np.all(out[~pm] == 0.0)
    assert np.any(out[pm] != 0.0)


def test_stage_channels_and_depths():
    cfg = StageConfig()
    assert cfg.stage_channels == (32, 64, 128, 256)
    assert cfg.depths == (2, 2, 6, 2)
    assert cfg.decoder_depths == (2, 6, 2, 2)
    with pytest.raises(ValueError):
        StageConfig(latent=20)
