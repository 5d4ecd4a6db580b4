# -*- coding: utf-8 -*-

# layers.py

"""
Building blocks shared by the codec, the latent autoencoder, the denoiser
and the consistency head.
"""

import math

import torch
import torch.nn as nn
import torch.nn.functional as F


def conv(in_channels, out_channels, kernel_size=3, stride=1):
    return nn.Conv2d(in_channels, out_channels, kernel_size, stride=stride, padding=kernel_size // 2)


def deconv(in_channels, out_channels, kernel_size=4, stride=2):
    return nn.ConvTranspose2d(in_channels, out_channels, kernel_size, stride=stride, padding=(kernel_size - stride) // 2)


def group_norm(channels):
    return nn.GroupNorm(math.gcd(8, channels), channels)


def zero_module(module):
    """Zero every parameter of a module in place and return it."""
    for p in module.parameters():
        nn.init.zeros_(p)
    return module


def zero_conv(channels):
    """1x1 convolution initialized to zero (no effect until trained)."""
    return zero_module(nn.Conv2d(channels, channels, 1))


def timestep_embedding(t, dim, max_period=10000, dtype=None):
    """
    Sinusoidal timestep embedding

    Args:
        t (torch.Tensor): Timesteps, shape [B] (int or float)
        dim (int): Embedding size
        max_period (int): Lowest frequency period
        dtype (torch.dtype, optional): Output dtype, default dtype when None

    Returns:
        torch.Tensor: Shape [B, dim]
    """
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64, device=t.device) / half)
    args = t.to(torch.float64)[:, None] * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = torch.cat([emb, torch.zeros_like(emb[:, :1])], dim=-1)
    return emb.to(dtype or torch.get_default_dtype())


class LowerBoundFunction(torch.autograd.Function):
    """max(x, bound) whose gradient still pushes values below the bound upward."""

    @staticmethod
    def forward(ctx, x, bound):
        ctx.save_for_backward(x, bound)
        return torch.max(x, bound)

    @staticmethod
    def backward(ctx, grad_output):
        x, bound = ctx.saved_tensors
        pass_through = (x >= bound) | (grad_output < 0)
        return pass_through.type(grad_output.dtype) * grad_output, None


class LowerBound(nn.Module):

    def __init__(self, bound):
        super().__init__()
        self.register_buffer("bound", torch.tensor([float(bound)]))

    def forward(self, x):
        return LowerBoundFunction.apply(x, self.bound.to(x.dtype))


class ResidualDenseBlock(nn.Module):
    """Five densely connected 3x3 convolutions with a scaled residual."""

    def __init__(self, channels, growth=16, scale=0.2):
        super().__init__()
        self.scale = scale
        self.convs = nn.ModuleList(conv(channels + i * growth, growth) for i in range(4))
        self.fuse = conv(channels + 4 * growth, channels)

    def forward(self, x):
        features = [x]
        for layer in self.convs:
            features.append(F.leaky_relu(layer(torch.cat(features, dim=1)), 0.2))
        return x + self.scale * self.fuse(torch.cat(features, dim=1))


class RRDB(nn.Module):
    """Residual in Residual Dense Block: three dense blocks inside an outer residual."""

    def __init__(self, channels, growth=16, scale=0.2):
        super().__init__()
        self.scale = scale
        self.body = nn.Sequential(*(ResidualDenseBlock(channels, growth, scale) for _ in range(3)))

    def forward(self, x):
        return x + self.scale * self.body(x)


class ResBlock(nn.Module):
    """
    Residual block conditioned on a timestep embedding

    Args:
        in_channels (int): Input channels
        out_channels (int): Output channels
        embed_dim (int): Size of the timestep embedding, or 0 for none
    """

    def __init__(self, in_channels, out_channels, embed_dim=0):
        super().__init__()
        self.norm1 = group_norm(in_channels)
        self.conv1 = conv(in_channels, out_channels)
        self.emb = nn.Linear(embed_dim, out_channels) if embed_dim else None
        self.norm2 = group_norm(out_channels)
        self.conv2 = conv(out_channels, out_channels)
        self.skip = nn.Identity() if in_channels == out_channels else nn.Conv2d(in_channels, out_channels, 1)

    def forward(self, x, emb=None):
        h = self.conv1(F.silu(self.norm1(x)))
        if self.emb is not None and emb is not None:
            h = h + self.emb(F.silu(emb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


def attention(q, k, v):
    """
    Scaled dot-product attention

    Args:
        q (torch.Tensor): Queries [..., Nq, d]
        k (torch.Tensor): Keys [..., Nk, d]
        v (torch.Tensor): Values [..., Nk, dv]

    Returns:
        tuple: (output [..., Nq, dv], weights [..., Nq, Nk])
    """
    weights = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(q.shape[-1]), dim=-1)
    return weights @ v, weights


class CrossAttention(nn.Module):
    """
    Multi-head cross-attention from a feature map onto a token sequence

    The output projection is zero-initialized, so a freshly built block
    returns its input unchanged.
    """

    def __init__(self, channels, context_dim, num_heads=4):
        super().__init__()
        self.num_heads = math.gcd(num_heads, channels)
        self.norm = group_norm(channels)
        self.norm_context = nn.LayerNorm(context_dim)
        self.q = nn.Linear(channels, channels)
        self.k = nn.Linear(context_dim, channels)
        self.v = nn.Linear(context_dim, channels)
        self.proj = zero_module(nn.Linear(channels, channels))

    def _heads(self, x):
        b, n, c = x.shape
        return x.reshape(b, n, self.num_heads, c // self.num_heads).transpose(1, 2)

    def forward(self, x, context):
        b, c, h, w = x.shape
        tokens = self.norm(x).flatten(2).transpose(1, 2)
        context = self.norm_context(context)
        out, _ = attention(self._heads(self.q(tokens)), self._heads(self.k(context)), self._heads(self.v(context)))
        out = self.proj(out.transpose(1, 2).reshape(b, h * w, c))
        return x + out.transpose(1, 2).reshape(b, c, h, w)


class TimeEmbedding(nn.Module):
    """Sinusoidal embedding followed by a two-layer MLP."""

    def __init__(self, base_channels, embed_dim):
        super().__init__()
        self.base_channels = base_channels
        self.mlp = nn.Sequential(nn.Linear(base_channels, embed_dim), nn.SiLU(), nn.Linear(embed_dim, embed_dim))

    def forward(self, t, dtype):
        return self.mlp(timestep_embedding(t, self.base_channels, dtype=dtype))
