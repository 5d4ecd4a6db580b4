# -*- coding: utf-8 -*-

# denoiser.py

"""
Tiny epsilon-prediction UNet with two control paths.

The image control c_hat enters through a control encoder whose per-level
outputs pass zero-initialized 1x1 convolutions and are added to the UNet
skip connections. Semantic tokens enter through one cross-attention layer
per resolution.
"""

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from diffusion import timestep_tensor
from layers import CrossAttention, ResBlock, TimeEmbedding, conv, deconv, group_norm, zero_conv


@dataclass
class ControlBundle:
    c_hat: torch.Tensor
    semantic_tokens: torch.Tensor

    def validate(self, z_t, num_tokens, token_dim):
        if self.c_hat.shape != z_t.shape:
            raise ValueError(f"c_hat {tuple(self.c_hat.shape)} does not match z_t {tuple(z_t.shape)}")
        expected = (z_t.shape[0], num_tokens, token_dim)
        if tuple(self.semantic_tokens.shape) != expected:
            raise ValueError(f"semantic tokens {tuple(self.semantic_tokens.shape)}, expected {expected}")

    def detach(self):
        return ControlBundle(self.c_hat.detach(), self.semantic_tokens.detach())


class UNet(nn.Module):
    """
    Two-resolution (by default) UNet predicting the injected noise

    Args:
        cfg (DenoiserConfig): Widths, token geometry and heads
        latent_channels (int): Channels of z_t
    """

    def __init__(self, cfg, latent_channels):
        super().__init__()
        widths = [cfg.base_channels * m for m in cfg.channel_mult]
        emb = cfg.time_embed_dim
        self.num_tokens = cfg.num_tokens
        self.token_dim = cfg.token_dim
        self.time_embed = TimeEmbedding(cfg.base_channels, emb)
        self.input_conv = conv(latent_channels, cfg.base_channels)

        self.down_res = nn.ModuleList()
        self.down_attn = nn.ModuleList()
        self.downsample = nn.ModuleList()
        prev = cfg.base_channels
        for level, width in enumerate(widths):
            self.down_res.append(ResBlock(prev, width, emb))
            self.down_attn.append(CrossAttention(width, cfg.token_dim, cfg.num_heads))
            self.downsample.append(conv(width, width, stride=2) if level < len(widths) - 1 else nn.Identity())
            prev = width
        self.mid = ResBlock(prev, prev, emb)

        self.upsample = nn.ModuleList()
        self.up_res = nn.ModuleList()
        for level in reversed(range(len(widths))):
            self.upsample.append(deconv(prev, prev) if level < len(widths) - 1 else nn.Identity())
            self.up_res.append(ResBlock(prev + widths[level], widths[level], emb))
            prev = widths[level]
        self.out_norm = group_norm(prev)
        self.out_conv = conv(prev, latent_channels)

    def forward(self, x, t, tokens, control=None):
        emb = self.time_embed(t, x.dtype)
        h = self.input_conv(x)
        skips = []
        for level, (res, attn, down) in enumerate(zip(self.down_res, self.down_attn, self.downsample)):
            h = attn(res(h, emb), tokens)
            skips.append(h if control is None else h + control[level])
            h = down(h)
        h = self.mid(h, emb)
        if control is not None:
            h = h + control[-1]
        for up, res in zip(self.upsample, self.up_res):
            h = up(h)
            h = res(torch.cat([h, skips.pop()], dim=1), emb)
        return self.out_conv(F.silu(self.out_norm(h)))


class ControlEncoder(nn.Module):
    """
    Trainable encoder copy reading z_t plus the image control c_hat

    Returns one residual per UNet level plus one for the middle block, each
    behind a zero convolution.
    """

    def __init__(self, cfg, latent_channels):
        super().__init__()
        widths = [cfg.base_channels * m for m in cfg.channel_mult]
        emb = cfg.time_embed_dim
        self.time_embed = TimeEmbedding(cfg.base_channels, emb)
        self.input_conv = conv(latent_channels, cfg.base_channels)
        self.hint = nn.Sequential(
            conv(latent_channels, cfg.base_channels), nn.SiLU(),
            conv(cfg.base_channels, cfg.base_channels),
        )
        self.blocks = nn.ModuleList()
        self.zero_convs = nn.ModuleList()
        self.downsample = nn.ModuleList()
        prev = cfg.base_channels
        for level, width in enumerate(widths):
            self.blocks.append(ResBlock(prev, width, emb))
            self.zero_convs.append(zero_conv(width))
            self.downsample.append(conv(width, width, stride=2) if level < len(widths) - 1 else nn.Identity())
            prev = width
        self.mid = ResBlock(prev, prev, emb)
        self.mid_zero_conv = zero_conv(prev)

    def forward(self, x, t, c_hat):
        emb = self.time_embed(t, x.dtype)
        h = self.input_conv(x) + self.hint(c_hat)
        residuals = []
        for block, zero, down in zip(self.blocks, self.zero_convs, self.downsample):
            h = block(h, emb)
            residuals.append(zero(h))
            h = down(h)
        residuals.append(self.mid_zero_conv(self.mid(h, emb)))
        return residuals


class SemanticEmbedder(nn.Module):
    """
    Pools the distorted image D(c_hat) into a few learned tokens

    Args:
        cfg (DenoiserConfig): Token count and size, optional label table
        image_channels (int): Channels of the decoded image
    """

    def __init__(self, cfg, image_channels=3):
        super().__init__()
        hidden = cfg.base_channels
        self.image_channels = image_channels
        self.num_tokens = cfg.num_tokens
        self.token_dim = cfg.token_dim
        self.features = nn.Sequential(
            conv(image_channels, hidden, stride=2), nn.SiLU(),
            conv(hidden, hidden, stride=2), nn.SiLU(),
            conv(hidden, hidden),
            nn.AdaptiveAvgPool2d(1),
            nn.Flatten(),
        )
        self.to_tokens = nn.Linear(hidden, cfg.num_tokens * cfg.token_dim)
        self.label_embedding = nn.Embedding(cfg.num_labels, cfg.token_dim) if cfg.use_labels else None

    def forward(self, distorted, label=None):
        tokens = self.to_tokens(self.features(distorted))
        tokens = tokens.view(distorted.shape[0], self.num_tokens, self.token_dim)
        if label is not None and self.label_embedding is not None:
            tokens = tokens + self.label_embedding(label)[:, None, :]
        return tokens


def semantic_embed(embedder, distorted, label=None):
    """
    Semantic tokens of a decoded image

    Args:
        embedder (SemanticEmbedder): Token network
        distorted (torch.Tensor): D(c_hat), [B, 3, H, W]
        label (int or torch.LongTensor, optional): Class label(s)

    Returns:
        torch.Tensor: [B, N_tok, D_emb]
    """
    if distorted.dim() != 4 or distorted.shape[1] != embedder.image_channels:
        raise ValueError(f"semantic_embed expects [B, {embedder.image_channels}, H, W], got {tuple(distorted.shape)}")
    if label is not None and not isinstance(label, torch.Tensor):
        label = torch.full((distorted.shape[0],), int(label), dtype=torch.long, device=distorted.device)
    return embedder(distorted, label)


def denoiser_forward(unet, control, z_t, bundle, t):
    """
    Predict the noise in z_t

    Args:
        unet (UNet): Noise predictor
        control (ControlEncoder): Image control branch
        z_t (torch.Tensor): Noised latent [B, C, H, W]
        bundle (ControlBundle): c_hat and semantic tokens
        t (int or torch.LongTensor): Timestep(s)

    Returns:
        torch.Tensor: eps_hat, same shape as z_t
    """
    bundle.validate(z_t, unet.num_tokens, unet.token_dim)
    t = timestep_tensor(t, z_t.shape[0], z_t.device)
    residuals = control(z_t, t, bundle.c_hat)
    return unet(z_t, t, bundle.semantic_tokens, residuals)
