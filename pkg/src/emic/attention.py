"""Position-indexed self-attention over visible tokens.

The spatial prior is a Manhattan-distance decay matrix ``gamma ** (|dr| + |dc|)``
computed only between the tokens that are present, from their raster indices.
It multiplies the softmax attention map element-wise; rows are not
re-normalised afterwards.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List

import numpy as np

from . import numcore as nc
from .geometry import IndexList


class AttentionConfigError(ValueError):
    pass


def default_gammas(heads: int) -> List[float]:
    return [1.0 - 2.0 ** -(3 + h) for h in range(heads)]


@dataclass
class AttentionConfig:
    heads: int
    head_dim: int
    gammas: List[float] = field(default_factory=list)
    level: str = "auto"  # "single", "decomposed", or "auto" (decomposed iff r2 > 1)

    def __post_init__(self):
        if not self.gammas:
            self.gammas = default_gammas(self.heads)
        if len(self.gammas) != self.heads:
            raise AttentionConfigError("need one decay rate per head")
        for g in self.gammas:
            _check_gamma(g)
        if self.level not in ("single", "decomposed", "auto"):
            raise AttentionConfigError(f"unknown attention level {self.level!r}")

    @property
    def dim(self) -> int:
        return self.heads * self.head_dim

    @classmethod
    def for_width(cls, dim: int, head_dim: int = 16, level: str = "auto") -> "AttentionConfig":
        hd = min(head_dim, dim)
        if dim % hd:
            raise AttentionConfigError(f"width {dim} not divisible by head dim {hd}")
        return cls(dim // hd, hd, level=level)


def _check_gamma(gamma: float) -> None:
    if not 0.0 < gamma < 1.0:
        raise AttentionConfigError(f"decay rate must lie in (0, 1), got {gamma}")


# ---------------------------------------------------------------------------
# decay matrices


def decay_matrix(rows, cols, gamma: float) -> np.ndarray:
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    dist = np.abs(rows[:, None] - rows[None, :]) + np.abs(cols[:, None] - cols[None, :])
    return np.power(gamma, dist.astype(np.float64))


def decay_from_indices(lst: IndexList, gamma: float) -> np.ndarray:
    """Decay matrix between the listed attention units (row = idx // r1, col = idx % r1)."""
    _check_gamma(gamma)
    r, c = lst.coords()
    return decay_matrix(r, c, gamma)


def unit_decay(lst: IndexList, gamma: float) -> np.ndarray:
    """Decay between mask units (one entry per group of r2*r2 tokens)."""
    _check_gamma(gamma)
    r, c = lst.unit_coords()
    return decay_matrix(r, c, gamma)


def slot_decay(r2: int, gamma: float) -> np.ndarray:
    """Decay between the r2*r2 within-unit slots; the same for every mask unit."""
    _check_gamma(gamma)
    r, c = np.divmod(np.arange(r2 * r2), r2)
    return decay_matrix(r, c, gamma)


# ---------------------------------------------------------------------------
# attention kernels


def _swap(t: nc.Tensor, a: int, b: int) -> nc.Tensor:
    axes = list(range(t.ndim))
    axes[a], axes[b] = axes[b], axes[a]
    return nc.transpose(t, tuple(axes))


def attention_map(q, k, decay) -> nc.Tensor:
    """softmax(q k^T / sqrt(d)) * decay over the last two axes."""
    q, k = nc.as_tensor(q), nc.as_tensor(k)
    scores = nc.matmul(q, _swap(k, -1, -2)) * (1.0 / math.sqrt(q.shape[-1]))
    return nc.mul(nc.softmax_rows(scores), decay)


def pisa(q, k, v, decay) -> nc.Tensor:
    """Single-level position-indexed attention; any leading batch axes allowed."""
    q, k, v = nc.as_tensor(q), nc.as_tensor(k), nc.as_tensor(v)
    if q.shape != k.shape or q.shape[:-1] != v.shape[:-1]:
        raise nc.DimensionError(f"pisa: q {q.shape}, k {k.shape}, v {v.shape}")
    return nc.matmul(attention_map(q, k, decay), v)


def dpisa(q, k, v, decay_mu, decay_au) -> nc.Tensor:
    """Decomposed attention on ``[..., M, S, d]`` token blocks.

    Pass 1 mixes across the M mask units separately for each slot s; pass 2
    mixes the S slots inside each mask unit, reading pass-1 output.
    """
    q, k, v = nc.as_tensor(q), nc.as_tensor(k), nc.as_tensor(v)
    decay_mu = np.asarray(decay_mu)
    decay_au = np.asarray(decay_au)
    # pass 1: [..., S, M, d]
    qs, ks, vs = _swap(q, -3, -2), _swap(k, -3, -2), _swap(v, -3, -2)
    mixed = nc.matmul(attention_map(qs, ks, decay_mu[..., None, :, :]), vs)
    mixed = _swap(mixed, -3, -2)
    # pass 2: [..., M, S, d]
    return nc.matmul(attention_map(q, k, decay_au[..., None, :, :]), mixed)


# ---------------------------------------------------------------------------
# multi-head block


def init_mha(params: nc.ModelParams, prefix: str, dim: int, std: float = 0.02) -> None:
    params.normal(f"{prefix}.qkv.w", (dim, 3 * dim), std)
    params.zeros(f"{prefix}.qkv.b", (3 * dim,))
    params.normal(f"{prefix}.out.w", (dim, dim), std)
    params.zeros(f"{prefix}.out.b", (dim,))


def use_decomposed(lst: IndexList, cfg: AttentionConfig) -> bool:
    if cfg.level == "auto":
        return lst.r2 > 1
    return cfg.level == "decomposed"


def mha_block(x, lst: IndexList, cfg: AttentionConfig, params: nc.ModelParams, prefix: str) -> nc.Tensor:
    """Multi-head PISA/DPISA with per-head decay rates. ``x`` is ``L x D``."""
    x = nc.as_tensor(x)
    L, D = x.shape
    if D != cfg.dim:
        raise AttentionConfigError(f"input width {D} != heads*head_dim {cfg.dim}")
    if L != len(lst):
        raise AttentionConfigError(f"{L} tokens but {len(lst)} indices")
    H, dh = cfg.heads, cfg.head_dim
    qkv = nc.add(nc.matmul(x, params[f"{prefix}.qkv.w"]), params[f"{prefix}.qkv.b"])
    if use_decomposed(lst, cfg):
        S = lst.r2 * lst.r2
        M = L // S
        qkv = nc.transpose(nc.reshape(qkv, (M, S, 3, H, dh)), (2, 3, 0, 1, 4))  # 3,H,M,S,dh
        q, k, v = (_pick(qkv, i) for i in range(3))
        d_mu = np.stack([unit_decay(lst, g) for g in cfg.gammas])
        d_au = np.stack([slot_decay(lst.r2, g) for g in cfg.gammas])
        out = dpisa(q, k, v, d_mu, d_au)  # H,M,S,dh
        out = nc.reshape(nc.transpose(out, (1, 2, 0, 3)), (L, D))
    else:
        qkv = nc.transpose(nc.reshape(qkv, (L, 3, H, dh)), (1, 2, 0, 3))  # 3,H,L,dh
        q, k, v = (_pick(qkv, i) for i in range(3))
        dec = np.stack([decay_from_indices(lst, g) for g in cfg.gammas])
        out = pisa(q, k, v, dec)  # H,L,dh
        out = nc.reshape(nc.transpose(out, (1, 0, 2)), (L, D))
    return nc.add(nc.matmul(out, params[f"{prefix}.out.w"]), params[f"{prefix}.out.b"])


def _pick(t: nc.Tensor, i: int) -> nc.Tensor:
    return nc.select(t, i)
