"""Analytic FLOPs accounting for the whole codec under a given mask.

Conventions: one multiply-add counts as 2 FLOPs.  Linear layers cost
2*L*din*dout; each attention matmul (QK^T and AV) costs 2*n*n*d per head for
an n-token attention window; softmax plus decay cost a few FLOPs per score;
norms, GELU and residual adds are linear in L*D.  Token counts at every stage
come from the number of visible mask units.
"""
from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Dict

import numpy as np

from .attention import AttentionConfig
from .geometry import MASK_UNIT, PATCH, MaskMap
from .network import PATCH_VALUES, StageConfig

SOFTMAX_PER_SCORE = 5  # max, sub, exp, sum, div
DECAY_PER_SCORE = 1
NORM_PER_VALUE = 8
GELU_PER_VALUE = 8
CATEGORIES = ("linear", "attention", "elementwise")


def linear_flops(tokens: int, din: int, dout: int, bias: bool = False) -> int:
    """2 * tokens * din * dout (plus one add per output if ``bias``)."""
    return 2 * tokens * din * dout + (tokens * dout if bias else 0)


@dataclass
class FlopsReport:
    modules: Dict[str, Dict[str, int]] = field(default_factory=OrderedDict)
    visible_ratio: float = 1.0
    visible_units: int = 0

    def add(self, module: str, category: str, amount: int) -> None:
        if category not in CATEGORIES:
            raise ValueError(f"unknown category {category!r}")
        part = self.modules.setdefault(module, {c: 0 for c in CATEGORIES})
        part[category] += int(amount)

    def module_total(self, module: str) -> int:
        return sum(self.modules[module].values())

    @property
    def stages(self) -> Dict[str, int]:
        """Totals per top-level stage (the module name up to its first dot)."""
        out: Dict[str, int] = OrderedDict()
        for name in self.modules:
            key = name.split(".")[0]
            out[key] = out.get(key, 0) + self.module_total(name)
        return out

    @property
    def categories(self) -> Dict[str, int]:
        return {c: sum(m[c] for m in self.modules.values()) for c in CATEGORIES}

    @property
    def total(self) -> int:
        return sum(self.module_total(m) for m in self.modules)

    def as_text(self, detail: bool = False) -> str:
        lines = [f"visible_ratio={self.visible_ratio:.6f}", f"visible_units={self.visible_units}",
                 f"total_flops={self.total}", f"total_gflops={self.total / 1e9:.6f}"]
        lines += [f"category.{k}={v}" for k, v in self.categories.items()]
        lines += [f"stage.{k}={v}" for k, v in self.stages.items()]
        if detail:
            lines += [f"module.{k}={self.module_total(k)}" for k in self.modules]
        return "\n".join(lines)


def _block(rep: FlopsReport, name: str, n_units: int, r2: int, dim: int, ffn: int,
           attn: AttentionConfig) -> None:
    S = r2 * r2
    L = n_units * S
    hidden = ffn * dim
    rep.add(name, "elementwise", 2 * NORM_PER_VALUE * L * dim)
    rep.add(name, "linear", linear_flops(L, dim, 3 * dim, True) + linear_flops(L, dim, dim, True))
    H, dh = attn.heads, attn.head_dim
    if r2 > 1:
        # across units for every slot, then within every unit
        windows = [(S, n_units), (n_units, S)]
    else:
        windows = [(1, L)]
    for count, n in windows:
        rep.add(name, "attention", H * count * 2 * (2 * n * n * dh))
        rep.add(name, "elementwise", H * count * n * n * (SOFTMAX_PER_SCORE + DECAY_PER_SCORE + 1))
    rep.add(name, "linear", linear_flops(L, dim, hidden, True) + linear_flops(L, hidden, dim, True))
    rep.add(name, "elementwise", GELU_PER_VALUE * L * hidden + 2 * L * dim)


def count_flops(cfg: StageConfig, mask: MaskMap) -> FlopsReport:
    """FLOPs of one encode + decode (entropy parameter networks included)."""
    M = mask.n_visible
    rep = FlopsReport(visible_ratio=mask.visible_ratio, visible_units=M)
    r2 = MASK_UNIT // PATCH
    ch = cfg.stage_channels
    d = cfg.latent

    # encoder
    rep.add("encoder.embed", "linear", linear_flops(M * r2 * r2, PATCH_VALUES, ch[0], True))
    r = r2
    for i, depth in enumerate(cfg.depths):
        for j in range(depth):
            _block(rep, f"encoder.s{i}.b{j}", M, r, ch[i], cfg.ffn_ratio, cfg.attn(ch[i]))
        if i < 3:
            r //= 2
            rep.add(f"encoder.merge{i}", "linear", linear_flops(M * r * r, 4 * ch[i], ch[i + 1], True))
    rep.add("encoder.out", "linear", linear_flops(M, ch[3], d, True))

    # hyperprior and slice networks; token count M, one per mask unit
    d8 = d // 8
    lz = -(-M // 4)
    for j in range(2):
        _block(rep, f"hyper.enc.b{j}", M, 1, d, cfg.ffn_ratio, cfg.attn(d))
    rep.add("hyper.enc.out", "linear", linear_flops(M, d, d8, True))
    rep.add("hyper.quant", "elementwise", 2 * lz * 4 * d8)
    for j in range(2):
        _block(rep, f"hyper.dec.b{j}", M, 1, d8, cfg.ffn_ratio, cfg.attn(d8))
    rep.add("hyper.dec.up", "linear", linear_flops(M, d8, d, True))
    _block(rep, "hyper.dec.extra", M, 1, d, cfg.ffn_ratio, cfg.attn(d))
    rep.add("hyper.dec.out", "linear", linear_flops(M, d, 2 * d, True))
    w = d // cfg.n_slices
    for i in range(cfg.n_slices):
        rep.add(f"slices.s{i}", "linear", linear_flops(M, 2 * d + i * w, d, True) + linear_flops(M, d, 2 * w, True))
        rep.add(f"slices.s{i}", "elementwise", GELU_PER_VALUE * M * d + 2 * M * w)

    # decoder
    rch = tuple(reversed(ch))
    rep.add("decoder.in", "linear", linear_flops(M, d, rch[0], True))
    r = 1
    for i, depth in enumerate(cfg.decoder_depths):
        for j in range(depth):
            _block(rep, f"decoder.s{i}.b{j}", M, r, rch[i], cfg.ffn_ratio, cfg.attn(rch[i]))
        if i < 3:
            rep.add(f"decoder.split{i}", "linear", linear_flops(M * r * r, rch[i], 2 * rch[i], True))
            r *= 2
    rep.add("decoder.head", "linear", linear_flops(M * r * r, rch[3], PATCH_VALUES, True))
    return rep


def linear_fit(ratios, totals):
    """Least-squares a*ratio + b; returns (a, b, r_squared)."""
    x = np.asarray(ratios, dtype=np.float64)
    y = np.asarray(totals, dtype=np.float64)
    a, b = np.polyfit(x, y, 1)
    resid = y - (a * x + b)
    ss_tot = float(((y - y.mean()) ** 2).sum())
    r2 = 1.0 - float((resid ** 2).sum()) / ss_tot if ss_tot else 1.0
    return float(a), float(b), r2
