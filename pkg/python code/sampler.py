# -*- coding: utf-8 -*-

# sampler.py

"""
Decoding from a compressed representation.

two_step_decode queries the consistency head twice: once from pure noise at
T-1 and once after re-noising its first estimate to t_mid. ddim_decode is
the multi-step baseline that only uses the denoiser.
"""

import logging

import torch

from diffusion import CLEAN, add_noise, ddim_step, predict_z0_from_eps, uniform_timesteps
from fase import fase_forward
from utils import crop_to

logger = logging.getLogger(__name__)


class DenoiserCallCounter:
    """Counts forward calls of the denoiser UNet through a forward hook."""

    def __init__(self, model):
        self.module = model.denoiser
        self.calls = 0
        self._handle = None

    def _hook(self, module, inputs, output):
        self.calls += 1

    def __enter__(self):
        self.calls = 0
        self._handle = self.module.register_forward_hook(self._hook)
        return self

    def __exit__(self, *exc):
        self._handle.remove()
        self._handle = None
        return False


def make_generator(seed, device="cpu"):
    generator = torch.Generator(device=device)
    generator.manual_seed(int(seed))
    return generator


def gaussian_like(x, generator):
    return torch.randn(x.shape, generator=generator, dtype=x.dtype, device=x.device)


def estimate_z0(model, z_t, bundle, t):
    """
    Clean-latent estimate at timestep t

    Uses the consistency head, or the denoiser's own z0 estimate when the
    model was built with the no_cre ablation.
    """
    eps_hat = model.eps(z_t, bundle, t)
    if model.cfg.ablation.no_cre:
        return predict_z0_from_eps(z_t, eps_hat, t, model.schedule)
    return fase_forward(model.fase, z_t, eps_hat, bundle.c_hat, t, model.schedule)


def two_step_latent(model, bundle, generator, t_mid=None, init_from_control=False):
    """
    Two consistency queries with one re-noising in between

    Runs with whatever grad mode the caller has set, so training can
    backpropagate through both steps.

    Args:
        model (DiffCRModel): Trained model
        bundle (ControlBundle): c_hat and semantic tokens
        generator (torch.Generator): Source of both noise draws
        t_mid (int, optional): Intermediate timestep; config default when None
        init_from_control (bool): Start from noised c_hat instead of pure noise

    Returns:
        torch.Tensor: z_tilde0
    """
    s = model.schedule
    last = s.T - 1
    t_mid = model.cfg.t_mid if t_mid is None else int(t_mid)
    if not 0 <= t_mid <= last:
        raise ValueError(f"t_mid must lie in [0, {last}], got {t_mid}")
    c_hat = bundle.c_hat
    z_T = gaussian_like(c_hat, generator)
    if init_from_control:
        z_T = add_noise(c_hat, last, z_T, s)
    z_tilde0 = estimate_z0(model, z_T, bundle, last)
    z_mid = add_noise(z_tilde0, t_mid, gaussian_like(c_hat, generator), s)
    return estimate_z0(model, z_mid, bundle, t_mid)


def control_bundle(model, rep):
    """Control bundle rebuilt from a decoded representation."""
    c_hat = model.codec.synthesis(rep.y_hat)
    return model.make_bundle(c_hat, rep.label)


def _to_image(model, z, image_size):
    return crop_to(model.autoencoder.decode(z).clamp(0.0, 1.0), image_size)


@torch.no_grad()
def two_step_decode(model, rep, seed=0, bundle=None, t_mid=None, init_from_control=None):
    """
    Headline decoder: exactly two denoiser evaluations

    Args:
        model (DiffCRModel): Trained model in eval mode
        rep (CompressedRepresentation): Decoded bitstream
        seed (int): Fixes both noise draws
        bundle (ControlBundle, optional): Rebuilt from rep when None
        t_mid (int, optional): Intermediate timestep
        init_from_control (bool, optional): Config default when None

    Returns:
        tuple: (z_tilde0, x_hat cropped to the source size and clipped to [0, 1])
    """
    if bundle is None:
        bundle = control_bundle(model, rep)
    if init_from_control is None:
        init_from_control = model.cfg.sampler.init_from_control
    generator = make_generator(seed, bundle.c_hat.device)
    z_tilde0 = two_step_latent(model, bundle, generator, t_mid, init_from_control)
    return z_tilde0, _to_image(model, z_tilde0, rep.image_size)


def ddim_latent(model, bundle, n_steps, generator):
    """
    Deterministic DDIM over a uniform timestep subsequence, latent only

    Args:
        model (DiffCRModel): Trained model
        bundle (ControlBundle): c_hat and semantic tokens
        n_steps (int): Denoiser evaluations, >= 1
        generator (torch.Generator): Source of the starting noise

    Returns:
        torch.Tensor: z0 estimate
    """
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    s = model.schedule
    z = gaussian_like(bundle.c_hat, generator)
    timesteps = uniform_timesteps(s.T, n_steps)
    for i, t in enumerate(timesteps):
        target = timesteps[i + 1] if i + 1 < len(timesteps) else CLEAN
        z = ddim_step(z, model.eps(z, bundle, t), t, target, s)
    return z


@torch.no_grad()
def ddim_decode(model, rep, n_steps=50, seed=0, bundle=None):
    """
    Multi-step DDIM baseline decoder

    Args:
        model (DiffCRModel): Trained model
        rep (CompressedRepresentation): Decoded bitstream
        n_steps (int): Denoiser evaluations, >= 1
        seed (int): Fixes the starting noise
        bundle (ControlBundle, optional): Rebuilt from rep when None

    Returns:
        tuple: (z0 estimate, x_hat)
    """
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    if bundle is None:
        bundle = control_bundle(model, rep)
    z = ddim_latent(model, bundle, n_steps, make_generator(seed, bundle.c_hat.device))
    return z, _to_image(model, z, rep.image_size)


def decode(model, rep, sampler="two-step", steps=None, seed=0, t_mid=None, init_from_control=None):
    """Dispatch on the sampler name used by the command line."""
    if sampler == "two-step":
        return two_step_decode(model, rep, seed=seed, t_mid=t_mid, init_from_control=init_from_control)
    if sampler == "ddim":
        return ddim_decode(model, rep, steps or model.cfg.sampler.steps, seed=seed)
    raise ValueError(f"unknown sampler '{sampler}'")
