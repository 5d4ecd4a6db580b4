# -*- coding: utf-8 -*-

# latent_codec.py

"""
Trainable latent compressor producing the image-level control c_hat.

z0 -> g_a -> y -> (VQ hyperprior, space/channel context) -> y_hat -> g_s -> c_hat

The main latent y is coded in four passes: channel group 0 anchors, group 0
non-anchors, group 1 anchors, group 1 non-anchors. Anchors are the
checkerboard positions with (row + col) even. Entropy parameters for a pass
only read symbols of earlier passes, so encoder and decoder run the exact
same computation on the same partially filled buffer.

Bitstream layout (big-endian):
    "DCR1" | version u8 | preset u8 (bit 7: label trailer present) |
    image H, W u16 | C_y, H_y, W_y u16 | hyper length u32 | hyper bytes |
    y length u32 | y bytes | [label u64]
"""

import logging
import math
import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from scipy.stats import norm

from config import preset_from_index, preset_index
from layers import RRDB, LowerBound, conv, deconv, zero_module
from range_coder import (
    PRECISION_BITS,
    ArithmeticDecoder,
    ArithmeticEncoder,
    BitstreamError,
    quantize_pmf,
)

logger = logging.getLogger(__name__)

MAGIC = b"DCR1"
FORMAT_VERSION = 1
LABEL_FLAG = 0x80
LABEL_BYTES = 8
HEADER = struct.Struct(">4sBBHHHHH")
LENGTH = struct.Struct(">I")

CODEBOOK_BETA = 0.25
ESCAPE_BITS = 2 * PRECISION_BITS
ESCAPE_OFFSET = 1 << (ESCAPE_BITS - 1)

# (channel group, checkerboard phase) in coding order; phase 0 = anchors
PASSES = ((0, 0), (0, 1), (1, 0), (1, 1))


class FormatVersionError(BitstreamError):
    """Bitstream was written by an incompatible format version."""


@dataclass
class StreamHeader:
    image_height: int
    image_width: int
    channels: int
    height: int
    width: int
    preset: str = "custom"
    label: Optional[int] = None


@dataclass
class CompressedRepresentation:
    """
    One coded image

    bpp is always actual_bits over the source pixel count; the estimate is
    kept next to it for the coder-overhead audit.
    """
    y_hat: torch.Tensor
    hyper_indices: torch.Tensor
    bitstream: bytes
    estimated_bits: float
    actual_bits: int
    bpp: float
    image_size: tuple
    hyper_bits: int = 0
    y_bits: int = 0
    preset: str = "custom"
    label: Optional[int] = None
    extra: dict = field(default_factory=dict)


def quantize(y, mu, mode, generator=None):
    """
    Mean-centered quantization

    Args:
        y (torch.Tensor): Continuous latent
        mu (torch.Tensor): Predicted mean, broadcastable to y
        mode (str): "noise" (additive uniform noise), "round" or "ste"
            (rounded forward, identity gradient)
        generator (torch.Generator, optional): Noise source for "noise" mode;
            the global RNG when None

    Returns:
        torch.Tensor: Quantized latent
    """
    if mode == "noise":
        if generator is None:
            return y + torch.empty_like(y).uniform_(-0.5, 0.5)
        return y + (torch.rand(y.shape, generator=generator, dtype=y.dtype) - 0.5).to(y.device)
    residual = y - mu
    if mode == "round":
        return torch.round(residual) + mu
    if mode == "ste":
        return residual + (torch.round(residual) - residual).detach() + mu
    raise ValueError(f"unknown quantization mode '{mode}'")


def hyper_quantize(l_y, codebook):
    """
    Nearest-neighbour vector quantization

    Args:
        l_y (torch.Tensor): Vectors [..., D]
        codebook (torch.Tensor): Entries [K, D]

    Returns:
        tuple: (indices [...], l_hat [..., D]); ties go to the lowest index
    """
    if codebook.dim() != 2 or codebook.shape[0] == 0:
        raise ValueError("codebook is empty")
    if l_y.shape[-1] != codebook.shape[1]:
        raise ValueError(f"vector dim {l_y.shape[-1]} does not match codebook dim {codebook.shape[1]}")
    flat = l_y.reshape(-1, l_y.shape[-1])
    distances = ((flat[:, None, :] - codebook[None, :, :]) ** 2).sum(-1)
    # argmin returns the first minimum
    indices = distances.argmin(dim=1)
    l_hat = codebook[indices]
    return indices.reshape(l_y.shape[:-1]), l_hat.reshape(l_y.shape)


def codebook_loss(l_y, l_hat):
    """||sg(l_y) - l_hat||^2 + beta * ||sg(l_hat) - l_y||^2, summed."""
    return ((l_y.detach() - l_hat) ** 2).sum() + CODEBOOK_BETA * ((l_hat.detach() - l_y) ** 2).sum()


def gaussian_log_likelihood(y_hat, mu, sigma):
    """Natural-log probability mass of the unit bin around y_hat under N(mu, sigma)."""
    v = (y_hat - mu).abs()
    upper = torch.special.log_ndtr((0.5 - v) / sigma)
    lower = torch.special.log_ndtr((-0.5 - v) / sigma)
    mass = -torch.expm1(lower - upper)
    return upper + torch.log(mass.clamp_min(torch.finfo(mass.dtype).tiny))


def estimate_rate(y_hat, mu, sigma):
    """Differentiable bit count of y_hat under per-element Gaussians."""
    return -gaussian_log_likelihood(y_hat, mu, sigma).sum() / math.log(2.0)


def bit_allocation_map(y_hat, mu, sigma):
    """
    Estimated bits per latent position

    Returns:
        torch.Tensor: [H_y, W_y], summed over batch and channels
    """
    bits = -gaussian_log_likelihood(y_hat, mu, sigma) / math.log(2.0)
    return bits.sum(dim=(0, 1))


def rd_loss(z0, c_hat, rate_bits, l_y, l_hat, cfg):
    """
    Rate-distortion objective of the compressor

    Every term is a per-image sum averaged over the batch.

    Args:
        z0 (torch.Tensor): Target latent
        c_hat (torch.Tensor): Synthesized control
        rate_bits (torch.Tensor): Total bits of the batch (y and hyper)
        l_y (torch.Tensor): Hyper vectors before quantization
        l_hat (torch.Tensor): Selected codebook entries
        cfg (CodecConfig): Supplies lambda1 and lambda2

    Returns:
        tuple: (total loss, dict of the weighted terms)
    """
    batch = z0.shape[0]
    distortion = cfg.lambda1 * ((z0 - c_hat) ** 2).sum() / batch
    rate = cfg.lambda2 * rate_bits / batch
    vq = codebook_loss(l_y, l_hat) / batch
    total = distortion + rate + vq
    return total, {"distortion": distortion, "rate": rate, "codebook": vq}


def checkerboard(height, width, device=None, dtype=torch.float32):
    """1 at anchor positions ((row + col) even), 0 elsewhere, shape [1, 1, H, W]."""
    rows = torch.arange(height, device=device)[:, None]
    cols = torch.arange(width, device=device)[None, :]
    return ((rows + cols) % 2 == 0).to(dtype)[None, None]


def pass_masks(shape, device=None):
    """
    Boolean masks [1, C, H, W] of the positions coded by each pass

    Args:
        shape (tuple): Latent shape (B, C, H, W)

    Returns:
        list[torch.Tensor]: One mask per entry of PASSES
    """
    _, channels, height, width = shape
    anchor = checkerboard(height, width, device=device, dtype=torch.bool)
    half = channels // 2
    masks = []
    for group, phase in PASSES:
        group_mask = torch.zeros(1, channels, 1, 1, dtype=torch.bool, device=device)
        group_mask[:, group * half:(group + 1) * half] = True
        masks.append(group_mask & (anchor if phase == 0 else ~anchor))
    return masks


def get_scale_table(minimum, maximum, levels):
    return torch.exp(torch.linspace(math.log(minimum), math.log(maximum), levels, dtype=torch.float64))


def gaussian_cdf_table(scale, tail):
    """
    Frozen cumulative table for a zero-mean discretized Gaussian

    Symbols 0..2*tail map to values -tail..tail; symbol 2*tail+1 is the
    escape carrying the out-of-range mass.
    """
    values = np.arange(-tail, tail + 1, dtype=np.float64)
    pmf = norm.cdf((values + 0.5) / scale) - norm.cdf((values - 0.5) / scale)
    escape = 2.0 * norm.sf((tail + 0.5) / scale)
    return quantize_pmf(np.append(pmf, escape))


class LatentCodec(nn.Module):
    """
    Analysis/synthesis transforms plus the entropy model of y

    Args:
        cfg (CodecConfig): Codec configuration
    """

    def __init__(self, cfg):
        super().__init__()
        self.cfg = cfg
        levels = int(round(math.log2(cfg.downsample_factor)))
        if 2 ** levels != cfg.downsample_factor:
            raise ValueError(f"codec downsample_factor must be a power of 2, got {cfg.downsample_factor}")
        hidden = cfg.hidden_channels
        growth = max(hidden // 2, 1)
        group = cfg.y_channels // 2
        hyper = cfg.hyper_channels

        g_a = [conv(cfg.latent_channels, hidden)]
        g_a += [RRDB(hidden, growth) for _ in range(cfg.rrdb_blocks)]
        for _ in range(levels):
            g_a += [conv(hidden, hidden, stride=2), nn.LeakyReLU(0.2)]
        g_a += [conv(hidden, cfg.y_channels)]
        self.g_a = nn.Sequential(*g_a)

        g_s = [conv(cfg.y_channels, hidden)]
        for _ in range(levels):
            g_s += [deconv(hidden, hidden), nn.LeakyReLU(0.2)]
        g_s += [RRDB(hidden, growth) for _ in range(cfg.rrdb_blocks)]
        g_s += [conv(hidden, cfg.latent_channels)]
        self.g_s = nn.Sequential(*g_s)

        self.h_a = nn.Sequential(
            conv(cfg.y_channels, hyper), nn.LeakyReLU(0.2),
            conv(hyper, hyper, stride=2), nn.LeakyReLU(0.2),
            conv(hyper, cfg.codebook_dim),
        )
        self.h_s = nn.Sequential(
            conv(cfg.codebook_dim, hyper), nn.LeakyReLU(0.2),
            deconv(hyper, hyper), nn.LeakyReLU(0.2),
            conv(hyper, hyper),
        )
        self.codebook = nn.Parameter(torch.empty(cfg.codebook_size, cfg.codebook_dim).uniform_(-1.0, 1.0))
        self.hyper_logits = nn.Parameter(torch.zeros(cfg.codebook_size))

        self.spatial_context = nn.ModuleList(conv(group, hyper, kernel_size=5) for _ in range(2))
        self.channel_context = nn.Sequential(conv(group, hyper), nn.LeakyReLU(0.2), conv(hyper, hyper))
        # 1x1 heads: a pass never sees context computed at a neighbouring position
        self.param_heads = nn.ModuleList(
            nn.Sequential(
                nn.Conv2d(hyper * (2 + g), hyper, 1), nn.LeakyReLU(0.2),
                zero_module(nn.Conv2d(hyper, 2 * group, 1)),
            )
            for g in range(2)
        )
        self.sigma_bound = LowerBound(cfg.sigma_min)

        scales = get_scale_table(cfg.sigma_min, cfg.scale_max, cfg.scale_levels)
        tails = [int(math.ceil(cfg.tail_mass_sigmas * float(s))) for s in scales]
        width = 2 * max(tails) + 3
        self.register_buffer("_scale_table", scales)
        self.register_buffer("_tail", torch.tensor(tails, dtype=torch.int32))
        self.register_buffer("_cdf", torch.zeros(cfg.scale_levels, width, dtype=torch.int32))
        self.register_buffer("_cdf_length", torch.zeros(cfg.scale_levels, dtype=torch.int32))
        self.register_buffer("_hyper_cdf", torch.zeros(cfg.codebook_size + 1, dtype=torch.int32))
        self._table_cache = None
        self.update_tables()

    # Transforms

    def _check_latent(self, x, channels, what):
        if x.dim() != 4 or x.shape[1] != channels:
            raise ValueError(f"{what}: expected [B, {channels}, H, W], got {tuple(x.shape)}")

    def analysis(self, z0):
        self._check_latent(z0, self.cfg.latent_channels, "analysis")
        multiple = self.cfg.downsample_factor * 2
        if z0.shape[-2] % multiple or z0.shape[-1] % multiple:
            raise ValueError(f"analysis: latent dims {tuple(z0.shape[-2:])} not divisible by {multiple}")
        return self.g_a(z0)

    def synthesis(self, y_hat):
        self._check_latent(y_hat, self.cfg.y_channels, "synthesis")
        return self.g_s(y_hat)

    def hyper_analysis(self, y):
        """y -> hyper vectors l_y laid out as [B, H_h, W_h, D]."""
        return self.h_a(y).permute(0, 2, 3, 1)

    def hyper_synthesis(self, l_hat):
        return self.h_s(l_hat.permute(0, 3, 1, 2))

    # Entropy model

    def entropy_params(self, hyper, context):
        """
        Gaussian mean and scale of every element of y

        Only anchor positions of a group are read spatially, and group 1
        additionally reads all of group 0, so parameters at a position depend
        solely on symbols coded in earlier passes.

        Args:
            hyper (torch.Tensor): Hyper features [B, hyper_channels, H_y, W_y]
            context (torch.Tensor): Decoded latent so far [B, C_y, H_y, W_y]

        Returns:
            tuple: (mu, sigma), sigma >= sigma_min
        """
        self._check_latent(context, self.cfg.y_channels, "entropy_params")
        if hyper.shape[0] != context.shape[0] or hyper.shape[-2:] != context.shape[-2:]:
            raise ValueError(f"entropy_params: hyper {tuple(hyper.shape)} does not match context {tuple(context.shape)}")
        y0, y1 = context.chunk(2, dim=1)
        anchor = checkerboard(*context.shape[-2:], device=context.device, dtype=context.dtype)
        spatial0 = self.spatial_context[0](y0 * anchor) * (1 - anchor)
        spatial1 = self.spatial_context[1](y1 * anchor) * (1 - anchor)
        params0 = self.param_heads[0](torch.cat([hyper, spatial0], dim=1))
        params1 = self.param_heads[1](torch.cat([hyper, spatial1, self.channel_context(y0)], dim=1))
        mu0, scale0 = params0.chunk(2, dim=1)
        mu1, scale1 = params1.chunk(2, dim=1)
        mu = torch.cat([mu0, mu1], dim=1)
        sigma = self.sigma_bound(torch.cat([scale0, scale1], dim=1))
        return mu, sigma

    def _sequential_quantize(self, y, hyper, mode):
        y_hat = torch.zeros_like(y)
        mu_all = torch.zeros_like(y)
        sigma_all = torch.ones_like(y)
        for mask in pass_masks(y.shape, device=y.device):
            mu, sigma = self.entropy_params(hyper, y_hat)
            y_hat = torch.where(mask, quantize(y, mu, mode), y_hat)
            mu_all = torch.where(mask, mu, mu_all)
            sigma_all = torch.where(mask, sigma, sigma_all)
        return y_hat, mu_all, sigma_all

    def hyper_bits(self, indices):
        log_probs = F.log_softmax(self.hyper_logits, dim=0)
        return -log_probs[indices].sum() / math.log(2.0)

    def forward(self, z0, generator=None):
        """
        Full compressor pass

        In training mode the rate is measured on a noise-quantized latent while
        synthesis and context use straight-through rounding; in eval mode
        everything uses plain rounding.

        Returns:
            dict: y, y_hat, mu, sigma, c_hat, l_y, l_hat, indices, y_bits, hyper_bits
        """
        y = self.analysis(z0)
        return self.forward_latent(y, generator)

    def forward_latent(self, y, generator=None):
        l_y = self.hyper_analysis(y)
        indices, l_hat = hyper_quantize(l_y, self.codebook)
        # plain l_hat at inference keeps the hyper features bit-identical to the decoder's
        l_st = l_y + (l_hat - l_y).detach() if self.training else l_hat
        hyper = self.hyper_synthesis(l_st)

        y_hat, mu, sigma = self._sequential_quantize(y, hyper, "ste" if self.training else "round")
        rate_input = quantize(y, mu, "noise", generator) if self.training else y_hat
        return {
            "y": y,
            "y_hat": y_hat,
            "mu": mu,
            "sigma": sigma,
            "c_hat": self.synthesis(y_hat),
            "l_y": l_y,
            "l_hat": l_hat,
            "indices": indices,
            "y_bits": estimate_rate(rate_input, mu, sigma),
            "hyper_bits": self.hyper_bits(indices),
        }

    # Frozen tables

    @torch.no_grad()
    def update_tables(self):
        """
        Freeze the probability tables used by the range coder

        Must run after training and before any coding; the tables travel
        with the checkpoint as buffers.
        """
        self._cdf.zero_()
        for level, scale in enumerate(self._scale_table.tolist()):
            cdf = gaussian_cdf_table(scale, int(self._tail[level]))
            self._cdf[level, :len(cdf)] = torch.tensor(cdf, dtype=torch.int32)
            self._cdf_length[level] = len(cdf)
        pmf = F.softmax(self.hyper_logits.detach().double(), dim=0).cpu().numpy()
        self._hyper_cdf.copy_(torch.tensor(quantize_pmf(pmf), dtype=torch.int32))
        self._table_cache = None

    def _tables(self):
        if self._table_cache is None:
            lengths = self._cdf_length.tolist()
            if min(lengths) < 2:
                raise RuntimeError("probability tables not built; call update_tables()")
            rows = self._cdf.tolist()
            self._table_cache = (
                [row[:n] for row, n in zip(rows, lengths)],
                self._tail.tolist(),
                self._hyper_cdf.tolist(),
            )
        return self._table_cache

    def _load_from_state_dict(self, *args, **kwargs):
        super()._load_from_state_dict(*args, **kwargs)
        self._table_cache = None

    def scale_indexes(self, sigma):
        table = self._scale_table.to(sigma.device)
        indexes = torch.searchsorted(table, sigma.detach().double().contiguous())
        return indexes.clamp_(max=len(table) - 1)

    # Bitstream

    def _check_single(self, y_hat, hyper_indices):
        if y_hat.shape[0] != 1:
            raise ValueError("bitstream coding handles one image at a time")
        height, width = y_hat.shape[-2:]
        if height % 2 or width % 2:
            raise ValueError(f"latent dims {height}x{width} must be even")
        if tuple(hyper_indices.shape) != (1, height // 2, width // 2):
            raise ValueError(f"hyper indices {tuple(hyper_indices.shape)} do not match latent {tuple(y_hat.shape)}")

    def _hyper_features(self, hyper_indices):
        return self.hyper_synthesis(self.codebook[hyper_indices])

    @torch.no_grad()
    def encode_bitstream(self, y_hat, hyper_indices, image_size, preset="custom", label=None):
        """
        Range-code a quantized latent and its hyper indices

        Args:
            y_hat (torch.Tensor): Quantized latent [1, C_y, H_y, W_y]
            hyper_indices (torch.Tensor): Codebook indices [1, H_y/2, W_y/2]
            image_size (tuple): Source image (H, W) recorded in the header
            preset (str): Quality preset name
            label (int, optional): Class label sent as an 8-byte trailer

        Returns:
            bytes: Complete bitstream
        """
        self._check_latent(y_hat, self.cfg.y_channels, "encode_bitstream")
        self._check_single(y_hat, hyper_indices)
        y_tables, tails, hyper_cdf = self._tables()

        hyper_bytes = b""
        if hyper_indices.numel():
            encoder = ArithmeticEncoder()
            for index in hyper_indices.flatten().tolist():
                encoder.encode(index, hyper_cdf)
            hyper_bytes = encoder.finish()

        y_bytes = b""
        if y_hat.numel():
            hyper = self._hyper_features(hyper_indices)
            encoder = ArithmeticEncoder()
            buffer = torch.zeros_like(y_hat)
            for mask in pass_masks(y_hat.shape, device=y_hat.device):
                mu, sigma = self.entropy_params(hyper, buffer)
                symbols = torch.round(y_hat - mu)
                buffer = torch.where(mask, mu + symbols, buffer)
                levels = self.scale_indexes(sigma)[mask].tolist()
                for value, level in zip(symbols[mask].long().tolist(), levels):
                    _encode_symbol(encoder, value, y_tables[level], tails[level])
            if not torch.equal(buffer, y_hat):
                raise ValueError("y_hat is not on the quantization grid of its own entropy model")
            y_bytes = encoder.finish()

        header = StreamHeader(
            image_height=int(image_size[0]),
            image_width=int(image_size[1]),
            channels=y_hat.shape[1],
            height=y_hat.shape[2],
            width=y_hat.shape[3],
            preset=preset,
            label=label,
        )
        return pack_bitstream(header, hyper_bytes, y_bytes)

    @torch.no_grad()
    def decode_bitstream(self, data):
        """
        Inverse of encode_bitstream

        Returns:
            tuple: (y_hat, hyper_indices, StreamHeader)

        Raises:
            BitstreamError: Corrupt, truncated or mismatched stream
        """
        header, hyper_bytes, y_bytes = unpack_bitstream(data)
        if header.channels != self.cfg.y_channels:
            raise BitstreamError(f"stream has {header.channels} latent channels, model expects {self.cfg.y_channels}")
        if header.height % 2 or header.width % 2:
            raise BitstreamError("latent geometry must be even")
        y_tables, tails, hyper_cdf = self._tables()
        device = self.codebook.device
        dtype = self.codebook.dtype

        hyper_shape = (1, header.height // 2, header.width // 2)
        n_hyper = hyper_shape[1] * hyper_shape[2]
        indices = []
        if n_hyper:
            decoder = ArithmeticDecoder(hyper_bytes)
            indices = [decoder.decode(hyper_cdf) for _ in range(n_hyper)]
        elif hyper_bytes:
            raise BitstreamError("unexpected hyper payload for an empty latent")
        hyper_indices = torch.tensor(indices, dtype=torch.long, device=device).reshape(hyper_shape)

        y_shape = (1, header.channels, header.height, header.width)
        y_hat = torch.zeros(y_shape, dtype=dtype, device=device)
        if y_hat.numel():
            hyper = self._hyper_features(hyper_indices)
            decoder = ArithmeticDecoder(y_bytes)
            for mask in pass_masks(y_shape, device=device):
                mu, sigma = self.entropy_params(hyper, y_hat)
                levels = self.scale_indexes(sigma)[mask].tolist()
                values = [_decode_symbol(decoder, y_tables[level], tails[level]) for level in levels]
                symbols = torch.zeros_like(y_hat)
                symbols[mask] = torch.tensor(values, dtype=dtype, device=device)
                y_hat = torch.where(mask, mu + symbols, y_hat)
        elif y_bytes:
            raise BitstreamError("unexpected latent payload for an empty latent")
        return y_hat, hyper_indices, header

    @torch.no_grad()
    def compress(self, z0, image_size, preset="custom", label=None):
        """
        Code one latent z0 [1, C, H, W] into a CompressedRepresentation

        Args:
            z0 (torch.Tensor): Autoencoder latent of the (padded) image
            image_size (tuple): Original image (H, W), used for bpp
            preset (str): Quality preset name for the header
            label (int, optional): Semantic class label

        Returns:
            CompressedRepresentation
        """
        was_training = self.training
        self.eval()
        try:
            out = self.forward(z0)
        finally:
            self.train(was_training)
        bitstream = self.encode_bitstream(out["y_hat"], out["indices"], image_size, preset, label)
        _, hyper_bytes, y_bytes = unpack_bitstream(bitstream)
        actual_bits = 8 * len(bitstream)
        estimated = float(out["y_bits"] + out["hyper_bits"])
        pixels = int(image_size[0]) * int(image_size[1])
        logger.debug("coded %d bits (estimate %.1f) for %dx%d", actual_bits, estimated, *image_size)
        return CompressedRepresentation(
            y_hat=out["y_hat"],
            hyper_indices=out["indices"],
            bitstream=bitstream,
            estimated_bits=estimated,
            actual_bits=actual_bits,
            bpp=actual_bits / pixels,
            image_size=(int(image_size[0]), int(image_size[1])),
            hyper_bits=8 * len(hyper_bytes),
            y_bits=8 * len(y_bytes),
            preset=preset,
            label=label,
            extra={"mu": out["mu"], "sigma": out["sigma"], "c_hat": out["c_hat"]},
        )

    def decompress(self, data):
        """Bitstream -> CompressedRepresentation (estimate fields left at 0)."""
        y_hat, hyper_indices, header = self.decode_bitstream(data)
        image_size = (header.image_height, header.image_width)
        actual_bits = 8 * len(data)
        pixels = max(header.image_height * header.image_width, 1)
        return CompressedRepresentation(
            y_hat=y_hat,
            hyper_indices=hyper_indices,
            bitstream=bytes(data),
            estimated_bits=0.0,
            actual_bits=actual_bits,
            bpp=actual_bits / pixels,
            image_size=image_size,
            preset=header.preset,
            label=header.label,
        )


def _encode_symbol(encoder, value, cdf, tail):
    if -tail <= value <= tail:
        encoder.encode(value + tail, cdf)
        return
    encoder.encode(2 * tail + 1, cdf)
    raw = value + ESCAPE_OFFSET
    if not 0 <= raw < (1 << ESCAPE_BITS):
        raise ValueError(f"latent value {value} outside the escape range")
    encoder.encode_uniform(raw >> PRECISION_BITS, PRECISION_BITS)
    encoder.encode_uniform(raw & ((1 << PRECISION_BITS) - 1), PRECISION_BITS)


def _decode_symbol(decoder, cdf, tail):
    symbol = decoder.decode(cdf)
    if symbol <= 2 * tail:
        return symbol - tail
    high = decoder.decode_uniform(PRECISION_BITS)
    low = decoder.decode_uniform(PRECISION_BITS)
    return ((high << PRECISION_BITS) | low) - ESCAPE_OFFSET


def pack_bitstream(header, hyper_bytes, y_bytes):
    """Serialize a header and the two coded sub-streams."""
    preset_byte = preset_index(header.preset) & 0x7F
    if header.label is not None:
        preset_byte |= LABEL_FLAG
    parts = [
        HEADER.pack(MAGIC, FORMAT_VERSION, preset_byte, header.image_height, header.image_width,
                    header.channels, header.height, header.width),
        LENGTH.pack(len(hyper_bytes)), hyper_bytes,
        LENGTH.pack(len(y_bytes)), y_bytes,
    ]
    if header.label is not None:
        parts.append(int(header.label).to_bytes(LABEL_BYTES, "big"))
    return b"".join(parts)


def _take(data, offset, size, what):
    end = offset + size
    if end > len(data):
        raise BitstreamError(f"truncated bitstream while reading {what}")
    return data[offset:end], end


def unpack_bitstream(data):
    """
    Split a bitstream into its header and sub-streams

    Returns:
        tuple: (StreamHeader, hyper bytes, y bytes)

    Raises:
        BitstreamError: Bad magic, truncation or trailing garbage
        FormatVersionError: Unsupported version
    """
    data = bytes(data)
    raw, offset = _take(data, 0, HEADER.size, "header")
    magic, version, preset_byte, img_h, img_w, channels, height, width = HEADER.unpack(raw)
    if magic != MAGIC:
        raise BitstreamError(f"not a DCR bitstream (magic {magic!r})")
    if version != FORMAT_VERSION:
        raise FormatVersionError(f"bitstream version {version}, this build reads version {FORMAT_VERSION}")

    raw, offset = _take(data, offset, LENGTH.size, "hyper length")
    hyper_bytes, offset = _take(data, offset, LENGTH.unpack(raw)[0], "hyper stream")
    raw, offset = _take(data, offset, LENGTH.size, "latent length")
    y_bytes, offset = _take(data, offset, LENGTH.unpack(raw)[0], "latent stream")

    label = None
    if preset_byte & LABEL_FLAG:
        raw, offset = _take(data, offset, LABEL_BYTES, "label")
        label = int.from_bytes(raw, "big")
    if offset != len(data):
        raise BitstreamError(f"{len(data) - offset} unexpected trailing bytes")

    header = StreamHeader(
        image_height=img_h,
        image_width=img_w,
        channels=channels,
        height=height,
        width=width,
        preset=preset_from_index(preset_byte & 0x7F),
        label=label,
    )
    return header, hyper_bytes, y_bytes
