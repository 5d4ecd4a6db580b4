# -*- coding: utf-8 -*-

# model.py

"""
Container holding every network of the pipeline plus checkpoint IO.

A checkpoint is a single torch file with one state dict per parameter group
(autoencoder, codec, denoiser, control, semantic, fase, ema_fase), an echo
of the configuration, and the training position (stage, step, preset).
"""

import copy
import logging
import os

import torch
import torch.nn as nn

from autoencoder import LatentAutoencoder
from config import config_from_dict, config_to_dict, get_preset_from_lambda, validate_config
from denoiser import ControlBundle, ControlEncoder, SemanticEmbedder, UNet, denoiser_forward, semantic_embed
from diffusion import schedule_from_config
from fase import FaseHead
from latent_codec import FORMAT_VERSION, LatentCodec
from utils import pad_to_multiple, parameter_checksum

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
GROUPS = ("autoencoder", "codec", "denoiser", "control", "semantic", "fase", "ema_fase")


class CheckpointError(RuntimeError):
    """Missing, incomplete or incompatible checkpoint."""


class DiffCRModel(nn.Module):
    """
    Autoencoder, compressor, conditioned denoiser and consistency head

    Args:
        cfg (PipelineConfig): Full configuration
    """

    def __init__(self, cfg):
        super().__init__()
        self.cfg = cfg
        channels = cfg.autoencoder.latent_channels
        self.schedule = schedule_from_config(cfg.schedule)
        self.autoencoder = LatentAutoencoder(cfg.autoencoder)
        self.codec = LatentCodec(cfg.codec)
        self.denoiser = UNet(cfg.denoiser, channels)
        self.control = ControlEncoder(cfg.denoiser, channels)
        self.semantic = SemanticEmbedder(cfg.denoiser, cfg.autoencoder.image_channels)
        self.fase = FaseHead(cfg.fase, channels, cfg.schedule.T, use_fda=not cfg.ablation.no_fda)
        self.ema_fase = copy.deepcopy(self.fase)
        self.ema_fase.requires_grad_(False)
        self.ae_trained = False

    @property
    def T(self):
        return self.schedule.T

    def group(self, name):
        if name not in GROUPS:
            raise KeyError(f"unknown parameter group '{name}'")
        return getattr(self, name)

    def freeze_autoencoder(self):
        self.autoencoder.requires_grad_(False)
        self.autoencoder.eval()

    def make_bundle(self, c_hat, label=None):
        """
        Control bundle for the denoiser: c_hat plus semantic tokens of D(c_hat)

        With the no_sem ablation the tokens are all zero.
        """
        shape = (c_hat.shape[0], self.cfg.denoiser.num_tokens, self.cfg.denoiser.token_dim)
        if self.cfg.ablation.no_sem:
            return ControlBundle(c_hat, torch.zeros(shape, dtype=c_hat.dtype, device=c_hat.device))
        distorted = self.autoencoder.decode(c_hat).clamp(0.0, 1.0)
        if not self.cfg.denoiser.use_labels:
            label = None
        return ControlBundle(c_hat, semantic_embed(self.semantic, distorted, label))

    def eps(self, z_t, bundle, t):
        return denoiser_forward(self.denoiser, self.control, z_t, bundle, t)

    @torch.no_grad()
    def compress_image(self, x, preset=None, label=None):
        """
        Reflect-pad, encode and range-code one image [1, 3, H, W]

        The header keeps the original size; the decoder crops back to it.
        """
        if x.dim() != 4 or x.shape[0] != 1:
            raise ValueError(f"compress_image expects [1, C, H, W], got {tuple(x.shape)}")
        padded, size = pad_to_multiple(x, self.cfg.pad_multiple)
        if preset is None:
            preset = get_preset_from_lambda(self.cfg.codec.lambda2)
        if not self.cfg.denoiser.use_labels:
            label = None
        z0 = self.autoencoder.encode(padded)
        return self.codec.compress(z0, size, preset, label)


def build_model(cfg, device="cpu"):
    validate_config(cfg)
    return DiffCRModel(cfg).to(device)


def count_parameters(module):
    return sum(p.numel() for p in module.parameters())


def save_checkpoint(path, model, stage, step, optimizer=None, preset=None):
    """
    Write a checkpoint

    Args:
        path (str): Output file
        model (DiffCRModel): Model to save
        stage (int): 0 (autoencoder), 1 or 2
        step (int): Steps completed within the stage
        optimizer (torch.optim.Optimizer, optional): Saved for resuming
        preset (str, optional): Quality preset; derived from lambda2 when None
    """
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    payload = {
        "checkpoint_version": CHECKPOINT_VERSION,
        "bitstream_version": FORMAT_VERSION,
        "config": config_to_dict(model.cfg),
        "stage": int(stage),
        "step": int(step),
        "preset": preset or get_preset_from_lambda(model.cfg.codec.lambda2),
        "ae_trained": bool(model.ae_trained),
        "groups": {name: model.group(name).state_dict() for name in GROUPS},
        "checksums": {name: parameter_checksum(model.group(name)) for name in GROUPS},
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
    }
    torch.save(payload, path)
    logger.info("checkpoint written to %s (stage %d, step %d)", path, stage, step)
    return path


def read_checkpoint(path, map_location="cpu"):
    """Load and check the raw checkpoint payload."""
    if not os.path.exists(path):
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location=map_location, weights_only=True)
    except Exception as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}")
    if not isinstance(payload, dict) or "groups" not in payload:
        raise CheckpointError(f"{path} is not a pipeline checkpoint")
    if payload.get("checkpoint_version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint version {payload.get('checkpoint_version')} is not supported (expected {CHECKPOINT_VERSION})")
    if payload.get("bitstream_version") != FORMAT_VERSION:
        raise CheckpointError(f"checkpoint was built for bitstream version {payload.get('bitstream_version')}, this build writes {FORMAT_VERSION}")
    missing = [name for name in GROUPS if name not in payload["groups"] or name not in payload.get("checksums", {})]
    if missing:
        raise CheckpointError(f"checkpoint lacks parameter groups: {', '.join(missing)}")
    return payload


def load_checkpoint(path, cfg=None, map_location="cpu"):
    """
    Rebuild a model from a checkpoint

    Args:
        path (str): Checkpoint file
        cfg (PipelineConfig, optional): Overrides the echoed config; the network
            shapes must still match
        map_location (str): Device

    Returns:
        tuple: (DiffCRModel, payload dict without the weights)
    """
    payload = read_checkpoint(path, map_location)
    if cfg is None:
        cfg = config_from_dict(payload["config"])
    model = DiffCRModel(cfg).to(map_location)
    for name in GROUPS:
        try:
            model.group(name).load_state_dict(payload["groups"][name])
        except RuntimeError as e:
            raise CheckpointError(f"group '{name}' does not match the configuration: {e}")
        if parameter_checksum(model.group(name)) != payload["checksums"][name]:
            raise CheckpointError(f"group '{name}' fails its checksum, the checkpoint is corrupted")
    model.ae_trained = payload.get("ae_trained", False)
    if model.ae_trained:
        model.freeze_autoencoder()
    model.eval()
    meta = {key: value for key, value in payload.items() if key != "groups"}
    logger.info("loaded %s (stage %d, step %d)", path, meta["stage"], meta["step"])
    return model, meta
