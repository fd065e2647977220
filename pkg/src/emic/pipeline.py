"""End-to-end compression: model container, compress / decompress, masked
rate-distortion loss and masked PSNR.
"""
from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from . import numcore as nc
from .entropy import (SUPPORT, gaussian_pmf, hyper_decode, hyper_encode, init_entropy,
                      likelihood_bits, prior_params, rate_estimate, slice_params, symbols_of)
from .geometry import (MaskMap, build_mask, gather_visible, initial_index_list, mask_from_units,
                       pad_image, unit_index_list)
from .network import (StageConfig, TokenSeq, decode_net, decode_patches, encode_net,
                      encode_patches, init_decoder, init_encoder)
from .rangecoder import BitstreamContainer, pmf_to_cdf, rc_decode, rc_encode

LAMBDAS = (0.004, 0.01, 0.025, 0.05, 0.1)
PIXEL_SCALE = 255.0 ** 2
PSNR_CAP = 100.0


class ModelMismatchError(ValueError):
    pass


# ---------------------------------------------------------------------------
# model


@dataclass
class Model:
    cfg: StageConfig
    params: nc.ModelParams

    @classmethod
    def init(cls, cfg: Optional[StageConfig] = None, seed: int = 0) -> "Model":
        cfg = cfg or StageConfig()
        params = nc.ModelParams(seed)
        init_encoder(params, cfg)
        init_entropy(params, cfg)
        init_decoder(params, cfg)
        model = cls(cfg, params)
        model._write_meta()
        return model

    def _write_meta(self) -> None:
        c = self.cfg
        self.params.extra["__config__"] = np.array(
            [c.channels, c.latent, c.ffn_ratio, c.head_dim, c.n_slices, *c.depths], dtype=np.float64)
        seed = self.params.seed
        self.params.extra["__seed__"] = np.array([(seed >> s) & 0xFFFF for s in (0, 16, 32, 48)],
                                                 dtype=np.float64)

    @classmethod
    def from_params(cls, params: nc.ModelParams) -> "Model":
        meta = params.extra.get("__config__")
        if meta is None:
            raise ValueError("parameter file carries no model configuration")
        m = [int(v) for v in meta]
        cfg = StageConfig(depths=tuple(m[5:9]), channels=m[0], latent=m[1], ffn_ratio=m[2],
                          head_dim=m[3], n_slices=m[4])
        if "__seed__" in params.extra:
            chunks = [int(v) for v in params.extra["__seed__"]]
            params.seed = sum(c << s for c, s in zip(chunks, (0, 16, 32, 48)))
        return cls(cfg, params)

    def save(self, path) -> None:
        self.params.save(path)

    @classmethod
    def load(cls, path) -> "Model":
        return cls.from_params(nc.ModelParams.load(path))

    @property
    def model_id(self) -> int:
        return self.params.model_id()

    @property
    def slice_width(self) -> int:
        return self.cfg.latent // self.cfg.n_slices


# ---------------------------------------------------------------------------
# coding helpers


def _z_tables(model: Model, n_tokens: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    mu, sigma = prior_params(model.params)
    mu, sigma = mu.data, sigma.data
    cdf = pmf_to_cdf(gaussian_pmf(0.0, sigma))
    return mu, np.tile(cdf, (n_tokens, 1)), np.tile(gaussian_pmf(0.0, sigma), (n_tokens, 1))


def _y_tables(sigma: np.ndarray):
    pmf = gaussian_pmf(0.0, sigma.ravel())
    return pmf_to_cdf(pmf), pmf


@dataclass
class EncodeResult:
    container: BitstreamContainer
    reconstruction: np.ndarray
    y_hat: np.ndarray
    z_hat: np.ndarray
    bits_y_estimate: float
    bits_z_estimate: float
    table_digest: int
    stream_estimates: List[float] = field(default_factory=list)  # z first, then y slices

    @property
    def estimate_bits(self) -> float:
        return self.bits_y_estimate + self.bits_z_estimate


def _as_mask(pixel_mask, image) -> MaskMap:
    if isinstance(pixel_mask, MaskMap):
        return pixel_mask
    pm = np.asarray(pixel_mask)
    if pm.shape != np.asarray(image).shape[:2]:
        raise ValueError(f"mask shape {pm.shape} does not match image {np.asarray(image).shape[:2]}")
    return build_mask(pm)


def _digest(*arrays) -> int:
    crc = 0
    for a in arrays:
        crc = zlib.crc32(np.ascontiguousarray(a).tobytes(), crc)
    return crc


def encode(image, pixel_mask, model: Model, lambda_index: int = 0) -> EncodeResult:
    """Compress and also run the decoder-side reconstruction on the encoder."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected an H x W x 3 image, got {image.shape}")
    h, w = image.shape[:2]
    if h < 16 or w < 16:
        raise ValueError(f"image {h}x{w} is smaller than one 16x16 mask unit")
    if h > 0xFFFF or w > 0xFFFF:
        raise ValueError(f"image {h}x{w} exceeds the 16-bit header fields")
    if not 0 <= lambda_index < 256:
        raise ValueError("lambda index must fit in 8 bits")
    mask = _as_mask(pixel_mask, image)
    cfg, params = model.cfg, model.params

    y = encode_net(pad_image(image), mask, params, cfg)
    lst = y.index_list
    z = hyper_encode(y.features, lst, params, cfg).data
    mu_z, z_cdf, z_pmf = _z_tables(model, z.shape[0])
    kz = symbols_of(z, mu_z)
    z_hat = kz + mu_z
    z_stream = rc_encode((kz + SUPPORT).ravel(), z_cdf)
    bits_z = rate_estimate(kz.ravel(), z_pmf)

    ctx = hyper_decode(z_hat, lst, params, cfg)
    sw = model.slice_width
    y_data = y.features.data
    y_hats: List[np.ndarray] = []
    streams, bits_y, tables, per_stream = [], 0.0, [], [bits_z]
    for i in range(cfg.n_slices):
        mu, sigma = slice_params(ctx, [nc.Tensor(a) for a in y_hats], i, params)
        mu, sigma = mu.data, sigma.data
        k = symbols_of(y_data[:, i * sw:(i + 1) * sw], mu)
        y_hats.append(k + mu)
        cdf, pmf = _y_tables(sigma)
        tables.append(cdf)
        streams.append(rc_encode((k + SUPPORT).ravel(), cdf))
        per_stream.append(rate_estimate(k.ravel(), pmf))
        bits_y += per_stream[-1]
    y_hat = np.concatenate(y_hats, axis=1)

    recon = decode_net(TokenSeq(y_hat, lst), params, cfg)[:h, :w]
    container = BitstreamContainer(h, w, mask.units, model.model_id, lambda_index, z_stream, streams)
    return EncodeResult(container, recon, y_hat, z_hat, bits_y, bits_z, _digest(z_cdf, *tables), per_stream)


def compress(image, pixel_mask, model: Model, lambda_index: int = 0) -> BitstreamContainer:
    return encode(image, pixel_mask, model, lambda_index).container


def decompress(container, model: Model, return_digest: bool = False):
    """Reconstruct the zero-filled image from a container (or its bytes)."""
    if isinstance(container, (bytes, bytearray)):
        container = BitstreamContainer.parse(container)
    if container.model_id != model.model_id:
        raise ModelMismatchError(
            f"container was made with model {container.model_id:08x}, loaded model is {model.model_id:08x}")
    cfg, params = model.cfg, model.params
    if len(container.y_streams) != cfg.n_slices:
        raise ValueError(f"expected {cfg.n_slices} y segments, found {len(container.y_streams)}")
    mask = mask_from_units(container.units, container.height, container.width)
    lst = unit_index_list(mask)
    L, d = len(lst), cfg.latent
    lz = -(-L // 4)
    mu_z, z_cdf, _ = _z_tables(model, lz)
    kz = np.array(rc_decode(container.z_stream, z_cdf), dtype=np.int64).reshape(lz, d // 2) - SUPPORT
    z_hat = kz + mu_z

    ctx = hyper_decode(z_hat, lst, params, cfg)
    sw = model.slice_width
    y_hats: List[np.ndarray] = []
    tables = []
    for i in range(cfg.n_slices):
        mu, sigma = slice_params(ctx, [nc.Tensor(a) for a in y_hats], i, params)
        mu, sigma = mu.data, sigma.data
        cdf, _ = _y_tables(sigma)
        tables.append(cdf)
        k = np.array(rc_decode(container.y_streams[i], cdf), dtype=np.int64).reshape(L, sw) - SUPPORT
        y_hats.append(k + mu)
    y_hat = np.concatenate(y_hats, axis=1)
    recon = decode_net(TokenSeq(y_hat, lst), params, cfg)[:container.height, :container.width]
    if return_digest:
        return recon, _digest(z_cdf, *tables)
    return recon


# ---------------------------------------------------------------------------
# loss and metrics


@dataclass
class RDLossReport:
    bpp: float
    distortion: float
    lam: float
    total: float
    total_tensor: Optional[nc.Tensor] = None

    def as_text(self) -> str:
        return f"bpp={self.bpp:.6f}\ndistortion={self.distortion:.8f}\nlambda={self.lam}\ntotal={self.total:.6f}"


def rd_loss(x, x_hat, mask, bits_y, bits_z, lam: float) -> RDLossReport:
    """bpp + lam * 255^2 * masked MSE.

    ``x``/``x_hat`` have a trailing channel axis; ``mask`` covers the leading
    axes (an H x W pixel mask for images).  Distortion is the mean squared
    error over visible elements; bpp divides the bits by visible pixels.
    Works on arrays or taped tensors.
    """
    x = nc.as_tensor(x)
    x_hat = nc.as_tensor(x_hat)
    m = np.asarray(mask, dtype=bool)
    if x.shape != x_hat.shape or m.shape != x.shape[:-1]:
        raise ValueError(f"shape mismatch: x {x.shape}, x_hat {x_hat.shape}, mask {m.shape}")
    n_pix = int(m.sum())
    if n_pix == 0:
        raise ValueError("no visible pixels")
    weight = np.broadcast_to(m[..., None], x.shape).astype(np.float64)
    # masked elements are multiplied by 0 before squaring
    diff = nc.mul(nc.sub(x, x_hat), weight)
    distortion = nc.mul(nc.sum_all(nc.square(diff)), 1.0 / (n_pix * x.shape[-1]))
    bits = nc.add(bits_y, bits_z)
    bpp = nc.mul(bits, 1.0 / n_pix)
    total = nc.add(bpp, nc.mul(distortion, lam * PIXEL_SCALE))
    return RDLossReport(float(bpp.data), float(distortion.data), lam, float(total.data), total)


def masked_psnr(x, x_hat, mask) -> float:
    x = np.asarray(x, dtype=np.float64)
    x_hat = np.asarray(x_hat, dtype=np.float64)
    m = np.asarray(mask, dtype=bool)
    if not m.any():
        raise ValueError("empty mask")
    mse = float(np.mean((x[m] - x_hat[m]) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


# ---------------------------------------------------------------------------
# training forward pass


def forward_train(model: Model, image, mask: MaskMap, lam: float, rng: np.random.Generator) -> RDLossReport:
    """Noise-quantized forward pass returning a taped loss (call inside a Tape)."""
    cfg, params = model.cfg, model.params
    image = pad_image(np.asarray(image, dtype=np.float64))
    lst0 = initial_index_list(mask)
    patches = gather_visible(image, mask, lst0)
    y = encode_patches(patches, lst0, params, cfg)
    lst = y.index_list
    z = hyper_encode(y.features, lst, params, cfg)
    z_noisy = nc.add(z, rng.uniform(-0.5, 0.5, size=z.shape))
    mu_z, sigma_z = prior_params(params)
    bits_z = likelihood_bits(z_noisy, mu_z, sigma_z)
    ctx = hyper_decode(z_noisy, lst, params, cfg)
    sw = model.slice_width
    noisy: List[nc.Tensor] = []
    bits_y = nc.Tensor(0.0)
    for i in range(cfg.n_slices):
        mu, sigma = slice_params(ctx, noisy, i, params)
        yi = nc.slice_cols(y.features, i * sw, (i + 1) * sw)
        yi = nc.add(yi, rng.uniform(-0.5, 0.5, size=yi.shape))
        bits_y = nc.add(bits_y, likelihood_bits(yi, mu, sigma))
        noisy.append(yi)
    out = decode_patches(TokenSeq(nc.concat(noisy, axis=1), lst), params, cfg)
    # per-pixel visibility inside each patch excludes replicate padding
    rows, cols = lst0.coords()
    dy, dx = np.divmod(np.arange(4), 2)
    py = rows[:, None] * 2 + dy[None, :]
    px = cols[:, None] * 2 + dx[None, :]
    keep = (py < mask.orig_height) & (px < mask.orig_width)
    n = len(lst0)
    return rd_loss(patches.reshape(n, 4, 3), nc.reshape(out.features, (n, 4, 3)), keep, bits_y, bits_z, lam)
