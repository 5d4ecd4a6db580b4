# -*- coding: utf-8 -*-

# utils.py

import hashlib
import logging
import os
import random

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image


def generate_filename(stage, preset=None, ablations=None, extension=".pt"):
    """
    Generate a standardized filename for a checkpoint or artifact

    Args:
        stage (int or str): Training stage (0 for the autoencoder, 1 or 2)
        preset (str, optional): Quality preset name
        ablations (list, optional): Active ablation switches
        extension (str): File extension

    Returns:
        str: Generated filename

    Examples:
        >>> generate_filename(1)
        'stage1.pt'
        >>> generate_filename(2, "q2", ["no_fda"])
        'stage2_q2_no-fda.pt'
    """
    parts = [f"stage{stage}"]

    if preset:
        parts.append(preset)

    if ablations:
        parts.extend(name.replace("_", "-") for name in sorted(ablations))

    return "_".join(parts) + extension


def setup_logging(verbose=False):
    """Configure the root logger with a console handler."""
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        datefmt="%H:%M:%S",
    )


def seed_everything(seed):
    """Seed python, numpy and torch RNGs and request deterministic kernels."""
    random.seed(seed)
    np.random.seed(seed)
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True, warn_only=True)


def parameter_checksum(module):
    """SHA-256 over every parameter and buffer of a module, in state-dict order."""
    digest = hashlib.sha256()
    for name, tensor in module.state_dict().items():
        digest.update(name.encode("utf-8"))
        digest.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()


def load_image(path):
    """
    Load an RGB image as a float tensor in [0, 1]

    Args:
        path (str): Image path

    Returns:
        torch.Tensor: Shape [1, 3, H, W]
    """
    with Image.open(path) as img:
        array = np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
    return torch.from_numpy(array).permute(2, 0, 1).unsqueeze(0).contiguous()


def save_image(x, path):
    """Write a [1, 3, H, W] or [3, H, W] tensor in [0, 1] as an 8-bit PNG."""
    if x.dim() == 4:
        x = x[0]
    array = (x.detach().clamp(0, 1).cpu().permute(1, 2, 0).numpy() * 255.0).round().astype(np.uint8)
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    Image.fromarray(array).save(path, format="PNG")


def pad_to_multiple(x, multiple):
    """
    Reflect-pad an image so both spatial dims are divisible by multiple

    Returns:
        tuple: (padded tensor, (original H, original W))
    """
    h, w = x.shape[-2:]
    pad_h = (-h) % multiple
    pad_w = (-w) % multiple
    if pad_h or pad_w:
        mode = "reflect" if pad_h < h and pad_w < w else "replicate"
        x = F.pad(x, (0, pad_w, 0, pad_h), mode=mode)
    return x, (h, w)


def crop_to(x, size):
    h, w = size
    return x[..., :h, :w]


def create_directories(*paths):
    """Create output directories if they do not exist"""
    for path in paths:
        if path:
            os.makedirs(path, exist_ok=True)
