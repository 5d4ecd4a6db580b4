# -*- coding: utf-8 -*-

# autoencoder.py

"""
Small convolutional image autoencoder standing in for a pre-trained VAE.

It maps images in [0, 1] to latents z0 and back. After pre-training the
encoder output is rescaled by a stored factor so latents have roughly unit
variance, which keeps them on the scale the noise schedule assumes.
"""

import logging
import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from layers import ResBlock, conv, deconv

logger = logging.getLogger(__name__)


class LatentAutoencoder(nn.Module):

    def __init__(self, cfg):
        super().__init__()
        levels = int(round(math.log2(cfg.downsample_factor)))
        if 2 ** levels != cfg.downsample_factor:
            raise ValueError(f"autoencoder downsample_factor must be a power of 2, got {cfg.downsample_factor}")
        hidden = cfg.hidden_channels

        encoder = [conv(cfg.image_channels, hidden)]
        for _ in range(levels):
            encoder += [ResBlock(hidden, hidden), conv(hidden, hidden, stride=2)]
        encoder += [ResBlock(hidden, hidden), conv(hidden, cfg.latent_channels)]
        self.encoder = nn.Sequential(*encoder)

        decoder = [conv(cfg.latent_channels, hidden), ResBlock(hidden, hidden)]
        for _ in range(levels):
            decoder += [deconv(hidden, hidden), ResBlock(hidden, hidden)]
        decoder += [conv(hidden, cfg.image_channels)]
        self.decoder = nn.Sequential(*decoder)

        self.register_buffer("scale_factor", torch.tensor(1.0))

    def encode(self, x):
        """Image [B, 3, H, W] in [0, 1] -> scaled latent z0."""
        return self.encoder(x * 2.0 - 1.0) * self.scale_factor

    def decode(self, z):
        """Scaled latent -> image, not clipped."""
        return (self.decoder(z / self.scale_factor) + 1.0) / 2.0

    def forward(self, x):
        return self.decode(self.encode(x))

    @torch.no_grad()
    def calibrate(self, images):
        """
        Set the latent scale factor from a batch of images

        Args:
            images (torch.Tensor): Calibration batch in [0, 1]

        Returns:
            float: New scale factor (1 / std of the unscaled latents)
        """
        self.scale_factor.fill_(1.0)
        std = float(self.encoder(images * 2.0 - 1.0).std())
        self.scale_factor.fill_(1.0 / max(std, 1e-6))
        logger.info("latent scale factor set to %.4f", float(self.scale_factor))
        return float(self.scale_factor)


def reconstruction_loss(model, x):
    return F.mse_loss(model(x), x)
