"""Hyperprior entropy model built from attention blocks and linear maps.

The hyper encoder runs two position-indexed blocks on ``y``, reduces channels
D -> D/8 and concatenates every four consecutive tokens (zero-padded to a
multiple of four), giving ``z`` of shape (ceil(L/4), D/2).  The hyper decoder
undoes the grouping and lifts the result to a (L, 2D) context.  ``y`` is coded
in channel slices; slice i is conditioned on the context and slices < i.
"""
from __future__ import annotations

import math

import numpy as np
from scipy import special

from . import numcore as nc
from .geometry import IndexList
from .network import StageConfig, init_block, init_linear, linear, run_blocks

SIGMA_MIN = 0.11
SIGMA_MAX = 256.0
SUPPORT = 127  # symbols live in [-SUPPORT, SUPPORT]
LIKELIHOOD_FLOOR = 1e-9
_SOFTPLUS_INV_1 = math.log(math.e - 1.0)


def init_entropy(params: nc.ModelParams, cfg: StageConfig) -> None:
    d, s = cfg.latent, cfg.init_std
    d8 = d // 8
    for j in range(2):
        init_block(params, f"hyper.enc.b{j}", d, cfg.ffn_ratio, s)
    init_linear(params, "hyper.enc.out", d, d8, s)
    for j in range(2):
        init_block(params, f"hyper.dec.b{j}", d8, cfg.ffn_ratio, s)
    init_linear(params, "hyper.dec.up", d8, d, s)
    init_block(params, "hyper.dec.extra.b0", d, cfg.ffn_ratio, s)
    init_linear(params, "hyper.dec.out", d, 2 * d, s)
    params.zeros("prior.mu", (d // 2,))
    params.add("prior.sigma", np.full(d // 2, _SOFTPLUS_INV_1))
    width = d // cfg.n_slices
    for i in range(cfg.n_slices):
        init_linear(params, f"slice{i}.fc1", 2 * d + i * width, d, s)
        init_linear(params, f"slice{i}.fc2", d, 2 * width, s)


# ---------------------------------------------------------------------------
# hyper networks


def hyper_encode(y, lst: IndexList, params: nc.ModelParams, cfg: StageConfig) -> nc.Tensor:
    h = run_blocks(nc.as_tensor(y), lst, cfg.attn(cfg.latent), params, "hyper.enc", 2)
    h = linear(h, params, "hyper.enc.out")
    return group_tokens(h)


def group_tokens(h) -> nc.Tensor:
    """(L, C) -> (ceil(L/4), 4C): zero-pad, then concat each run of four tokens."""
    h = nc.as_tensor(h)
    L, c = h.shape
    lz = -(-L // 4)
    if lz * 4 != L:
        h = nc.pad_rows(h, lz * 4)
    return nc.reshape(h, (lz, 4 * c))


def ungroup_tokens(z, length: int) -> nc.Tensor:
    z = nc.as_tensor(z)
    c = z.shape[1] // 4
    flat = nc.reshape(z, (z.shape[0] * 4, c))
    if flat.shape[0] != length:
        flat = nc.take_rows(flat, np.arange(length))
    return flat


def hyper_decode(z_hat, lst: IndexList, params: nc.ModelParams, cfg: StageConfig) -> nc.Tensor:
    """Context of shape (L, 2*latent) for the slice parameter networks."""
    d = cfg.latent
    h = ungroup_tokens(z_hat, len(lst))
    h = run_blocks(h, lst, cfg.attn(d // 8), params, "hyper.dec", 2)
    h = linear(h, params, "hyper.dec.up")
    h = run_blocks(h, lst, cfg.attn(d), params, "hyper.dec.extra", 1)
    return linear(h, params, "hyper.dec.out")


def prior_params(params: nc.ModelParams):
    """Per-channel (mu, sigma) of the factorized prior on z."""
    sigma = nc.maximum(nc.softplus(params["prior.sigma"]), SIGMA_MIN)
    return params["prior.mu"], sigma


def slice_params(ctx, decoded, i: int, params: nc.ModelParams):
    """(mu, sigma) for slice ``i`` from the context and the already-decoded slices."""
    inp = nc.concat([ctx, *decoded[:i]], axis=1) if i else nc.as_tensor(ctx)
    h = nc.gelu(linear(inp, params, f"slice{i}.fc1"))
    out = linear(h, params, f"slice{i}.fc2")
    w = out.shape[1] // 2
    mu = nc.slice_cols(out, 0, w)
    sigma = nc.clip(nc.softplus(nc.slice_cols(out, w, 2 * w)), SIGMA_MIN, SIGMA_MAX)
    return mu, sigma


# ---------------------------------------------------------------------------
# quantization and probabilities


def round_half_up(x):
    return np.floor(np.asarray(x) + 0.5)


def quantize(v, mu=0.0, mode: str = "eval", rng=None):
    """eval: round(v - mu) + mu.  train: v + U(-0.5, 0.5) noise."""
    if mode == "eval":
        v, mu = np.asarray(v, dtype=np.float64), np.asarray(mu, dtype=np.float64)
        return round_half_up(v - mu) + mu
    if mode == "train":
        v = nc.as_tensor(v)
        if rng is None:
            raise ValueError("train-mode quantization needs a generator")
        return nc.add(v, rng.uniform(-0.5, 0.5, size=v.shape))
    raise ValueError(f"unknown quantization mode {mode!r}")


def symbols_of(v, mu) -> np.ndarray:
    """Integer symbols round(v - mu), folded into the coder support."""
    k = round_half_up(np.asarray(v) - np.asarray(mu))
    return np.clip(k, -SUPPORT, SUPPORT).astype(np.int64)


def gaussian_pmf(mu_offset, sigma, support: int = SUPPORT) -> np.ndarray:
    """Discretized Gaussian over [-support, support]; tails folded into the edge bins.

    ``sigma`` may be an array; the result has a trailing axis of 2*support+1 bins.
    """
    sigma = np.asarray(sigma, dtype=np.float64)[..., None]
    mu = np.asarray(mu_offset, dtype=np.float64)[..., None]
    k = np.arange(-support, support + 1, dtype=np.float64)
    # upper/lower edges; the outermost edges are +-inf so tails fold in
    upper = np.append(k[:-1] + 0.5, np.inf)
    lower = np.insert(k[1:] - 0.5, 0, -np.inf)
    pmf = special.ndtr((upper - mu) / sigma) - special.ndtr((lower - mu) / sigma)
    return np.maximum(pmf, 0.0)


def rate_estimate(symbols, pmfs) -> float:
    """Sum of -log2 p(symbol); symbols outside the support fold to the edge bins.

    Probabilities are floored like the training likelihood, so a symbol deep
    in an underflowed tail costs a finite number of bits.
    """
    symbols = np.asarray(symbols, dtype=np.int64).ravel()
    pmfs = np.asarray(pmfs, dtype=np.float64).reshape(len(symbols), -1)
    half = pmfs.shape[1] // 2
    idx = np.clip(symbols + half, 0, pmfs.shape[1] - 1)
    p = np.maximum(pmfs[np.arange(len(symbols)), idx], LIKELIHOOD_FLOOR)
    return float(-np.log2(p).sum())


def likelihood_bits(v, mu, sigma) -> nc.Tensor:
    """Differentiable total bits of noisy values under N(mu, sigma) integrated over unit bins."""
    r = nc.absolute(nc.sub(v, mu))
    upper = nc.normal_cdf(nc.div(nc.sub(0.5, r), sigma))
    lower = nc.normal_cdf(nc.div(nc.sub(-0.5, r), sigma))
    lik = nc.maximum(nc.sub(upper, lower), LIKELIHOOD_FLOOR)
    return nc.mul(nc.sum_all(nc.log(lik)), -1.0 / math.log(2.0))
