"""Image encoder / decoder that run on visible tokens only.

Encoder: gather 2x2 patches -> embed -> [blocks -> merge] x3 -> blocks -> latent
projection.  Decoder mirrors it with patch splits.  Every stage carries the
index list of its tokens so attention can build its decay matrices.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Tuple

import numpy as np

from . import numcore as nc
from .attention import AttentionConfig, init_mha, mha_block
from .geometry import (IndexList, MaskMap, PATCH, gather_visible, initial_index_list,
                       merge_indices, pad_image, scatter_zero_fill, split_indices)

PATCH_VALUES = PATCH * PATCH * 3


@dataclass
class StageConfig:
    depths: Tuple[int, int, int, int] = (2, 2, 6, 2)
    channels: int = 32
    latent: int = 128
    ffn_ratio: int = 2
    head_dim: int = 16
    n_slices: int = 4
    init_std: float = 0.02

    def __post_init__(self):
        self.depths = tuple(int(d) for d in self.depths)
        if len(self.depths) != 4:
            raise ValueError("need four stage depths")
        if self.latent % 8 or self.latent % self.n_slices:
            raise ValueError("latent width must be divisible by 8 and by the slice count")

    @property
    def stage_channels(self) -> Tuple[int, int, int, int]:
        c = self.channels
        return (c, 2 * c, 4 * c, 8 * c)

    @property
    def decoder_depths(self) -> Tuple[int, ...]:
        return tuple(reversed(self.depths))

    def attn(self, dim: int) -> AttentionConfig:
        return AttentionConfig.for_width(dim, self.head_dim)


@dataclass
class TokenSeq:
    """Visible-token features; row j belongs to ``index_list.indices[j]``."""

    features: nc.Tensor
    index_list: IndexList

    def __post_init__(self):
        self.features = nc.as_tensor(self.features)
        if self.features.shape[0] != len(self.index_list):
            raise ValueError(f"{self.features.shape[0]} rows for {len(self.index_list)} indices")

    def __len__(self):
        return self.features.shape[0]

    @property
    def channels(self) -> int:
        return self.features.shape[1]


# ---------------------------------------------------------------------------
# layers


def init_linear(params: nc.ModelParams, prefix: str, din: int, dout: int, std: float = 0.02) -> None:
    params.normal(f"{prefix}.w", (din, dout), std)
    params.zeros(f"{prefix}.b", (dout,))


def linear(x, params: nc.ModelParams, prefix: str) -> nc.Tensor:
    return nc.add(nc.matmul(x, params[f"{prefix}.w"]), params[f"{prefix}.b"])


def init_norm(params: nc.ModelParams, prefix: str, dim: int) -> None:
    params.ones(f"{prefix}.g", (dim,))
    params.zeros(f"{prefix}.b", (dim,))


def norm(x, params: nc.ModelParams, prefix: str) -> nc.Tensor:
    return nc.layer_norm(x, params[f"{prefix}.g"], params[f"{prefix}.b"], 1e-5)


def init_block(params: nc.ModelParams, prefix: str, dim: int, ffn_ratio: int, std: float = 0.02) -> None:
    init_norm(params, f"{prefix}.norm1", dim)
    init_mha(params, f"{prefix}.attn", dim, std)
    init_norm(params, f"{prefix}.norm2", dim)
    init_linear(params, f"{prefix}.fc1", dim, ffn_ratio * dim, std)
    init_linear(params, f"{prefix}.fc2", ffn_ratio * dim, dim, std)


def emic_block(x, lst: IndexList, cfg: AttentionConfig, params: nc.ModelParams, prefix: str) -> nc.Tensor:
    """Pre-norm residual block: attention, then a GELU feed-forward."""
    x = nc.add(x, mha_block(norm(x, params, f"{prefix}.norm1"), lst, cfg, params, f"{prefix}.attn"))
    h = nc.gelu(linear(norm(x, params, f"{prefix}.norm2"), params, f"{prefix}.fc1"))
    return nc.add(x, linear(h, params, f"{prefix}.fc2"))


def run_blocks(x, lst, cfg: AttentionConfig, params, prefix: str, depth: int) -> nc.Tensor:
    for j in range(depth):
        x = emic_block(x, lst, cfg, params, f"{prefix}.b{j}")
    return x


def patch_embed(patches, params: nc.ModelParams, prefix: str = "enc.embed") -> nc.Tensor:
    return linear(nc.as_tensor(patches), params, prefix)


def merge_order(n_units: int, r2: int, channels: int):
    """Reshape/transpose that groups 2x2 children as (TL, TR, BL, BR) per merged token."""
    h = r2 // 2
    return (n_units, h, 2, h, 2, channels), (0, 1, 3, 2, 4, 5), (n_units * h * h, 4 * channels)


def patch_merge(x: TokenSeq, params: nc.ModelParams, prefix: str) -> TokenSeq:
    lst = x.index_list
    new_list = merge_indices(lst)
    shape, axes, flat = merge_order(lst.n_units, lst.r2, x.channels)
    cat = nc.reshape(nc.transpose(nc.reshape(x.features, shape), axes), flat)
    return TokenSeq(linear(cat, params, prefix), new_list)


def patch_split(x: TokenSeq, params: nc.ModelParams, prefix: str) -> TokenSeq:
    """Linear C -> 2C, then hand C/2 channels to each of the four children."""
    lst = x.index_list
    c = x.channels
    if c % 2:
        raise ValueError("patch_split needs an even channel count")
    new_list = split_indices(lst)
    h = linear(x.features, params, prefix)
    n, r2, half = lst.n_units, lst.r2, c // 2
    h = nc.reshape(h, (n, r2, r2, 2, 2, half))
    h = nc.reshape(nc.transpose(h, (0, 1, 3, 2, 4, 5)), (n * 4 * r2 * r2, half))
    return TokenSeq(h, new_list)


# ---------------------------------------------------------------------------
# whole networks


def init_encoder(params: nc.ModelParams, cfg: StageConfig) -> None:
    ch = cfg.stage_channels
    s = cfg.init_std
    init_linear(params, "enc.embed", PATCH_VALUES, ch[0], s)
    for i, depth in enumerate(cfg.depths):
        for j in range(depth):
            init_block(params, f"enc.s{i}.b{j}", ch[i], cfg.ffn_ratio, s)
        if i < 3:
            init_linear(params, f"enc.merge{i}", 4 * ch[i], ch[i + 1], s)
    init_linear(params, "enc.out", ch[3], cfg.latent, s)


def init_decoder(params: nc.ModelParams, cfg: StageConfig) -> None:
    ch = tuple(reversed(cfg.stage_channels))
    s = cfg.init_std
    init_linear(params, "dec.in", cfg.latent, ch[0], s)
    for i, depth in enumerate(cfg.decoder_depths):
        for j in range(depth):
            init_block(params, f"dec.s{i}.b{j}", ch[i], cfg.ffn_ratio, s)
        if i < 3:
            init_linear(params, f"dec.split{i}", ch[i], 2 * ch[i], s)
    init_linear(params, "dec.head", ch[3], PATCH_VALUES, s)


def encode_patches(patches, lst: IndexList, params: nc.ModelParams, cfg: StageConfig) -> TokenSeq:
    ch = cfg.stage_channels
    x = TokenSeq(patch_embed(patches, params), lst)
    for i, depth in enumerate(cfg.depths):
        feats = run_blocks(x.features, x.index_list, cfg.attn(ch[i]), params, f"enc.s{i}", depth)
        x = TokenSeq(feats, x.index_list)
        if i < 3:
            x = patch_merge(x, params, f"enc.merge{i}")
    return TokenSeq(linear(x.features, params, "enc.out"), x.index_list)


def encode_net(image: np.ndarray, mask: MaskMap, params: nc.ModelParams, cfg: StageConfig) -> TokenSeq:
    """Latent ``y`` with one token per visible mask unit."""
    image = np.asarray(image, dtype=np.float64)
    if image.shape[:2] != (mask.height, mask.width):
        image = pad_image(image)
    lst = initial_index_list(mask)
    return encode_patches(gather_visible(image, mask, lst), lst, params, cfg)


def decode_patches(y_hat: TokenSeq, params: nc.ModelParams, cfg: StageConfig) -> TokenSeq:
    """Decoder up to the pixel head; rows are 12-value 2x2x3 patches."""
    ch = tuple(reversed(cfg.stage_channels))
    x = TokenSeq(linear(y_hat.features, params, "dec.in"), y_hat.index_list)
    for i, depth in enumerate(cfg.decoder_depths):
        feats = run_blocks(x.features, x.index_list, cfg.attn(ch[i]), params, f"dec.s{i}", depth)
        x = TokenSeq(feats, x.index_list)
        if i < 3:
            x = patch_split(x, params, f"dec.split{i}")
    return TokenSeq(linear(x.features, params, "dec.head"), x.index_list)


def decode_net(y_hat: TokenSeq, params: nc.ModelParams, cfg: StageConfig) -> np.ndarray:
    """Zero-filled padded-size reconstruction; values are not clamped."""
    out = decode_patches(y_hat, params, cfg)
    lst = out.index_list
    return scatter_zero_fill(out.features.data, lst, lst.rows * PATCH, lst.r1 * PATCH)
