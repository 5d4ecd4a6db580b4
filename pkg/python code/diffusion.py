# -*- coding: utf-8 -*-

# diffusion.py

"""
Noise schedule, forward process and the deterministic DDIM update.

Timesteps are 0-based: index t here is step t+1 of a 1-based schedule
{1..T}, so t = 0 is the least-noised state and t = T-1 the noisiest.
The index -1 stands for the clean latent (alpha_bar = 1) and is only
accepted as the target of ddim_step.
"""

import math
from dataclasses import dataclass

import torch

CLEAN = -1


class ScheduleError(ValueError):
    """Invalid schedule parameters or timestep arguments."""


class SingularityError(ArithmeticError):
    """alpha_bar fell below the numeric floor before a division."""


@dataclass(frozen=True)
class NoiseSchedule:
    beta: torch.Tensor
    alpha: torch.Tensor
    alpha_bar: torch.Tensor
    alpha_floor: float = 1e-8

    @property
    def T(self):
        return int(self.beta.shape[0])

    def alpha_bar_at(self, t):
        """alpha_bar for an int timestep, with the clean index mapped to 1."""
        if t == CLEAN:
            return 1.0
        return float(self.alpha_bar[t])


def _validate_betas(beta):
    if beta.dim() != 1 or beta.shape[0] < 2:
        raise ScheduleError("a schedule needs at least 2 timesteps")
    if not torch.all((beta > 0) & (beta < 1)):
        raise ScheduleError("betas must lie strictly within (0, 1)")
    if torch.any(beta[1:] < beta[:-1]):
        raise ScheduleError("betas must be non-decreasing")


def schedule_from_betas(beta, alpha_floor=1e-8):
    """
    Build a NoiseSchedule from an explicit beta table

    Args:
        beta (sequence of float): beta_t for t = 0..T-1
        alpha_floor (float): Minimum alpha_bar admitted before dividing by it

    Returns:
        NoiseSchedule: Schedule with alpha and alpha_bar tables in float64
    """
    beta = torch.as_tensor(beta, dtype=torch.float64).clone()
    _validate_betas(beta)
    alpha = 1.0 - beta
    alpha_bar = torch.cumprod(alpha, dim=0)
    return NoiseSchedule(beta=beta, alpha=alpha, alpha_bar=alpha_bar, alpha_floor=alpha_floor)


def _cosine_betas(T, s=0.008):
    steps = torch.arange(T + 1, dtype=torch.float64) / T
    f = torch.cos((steps + s) / (1 + s) * math.pi / 2) ** 2
    alpha_bar = f / f[0]
    beta = 1 - alpha_bar[1:] / alpha_bar[:-1]
    return beta.clamp(1e-8, 0.999)


def make_schedule(T=1000, beta_start=1e-4, beta_end=2e-2, kind="linear", alpha_floor=1e-8):
    """
    Construct the beta/alpha/alpha_bar tables

    Args:
        T (int): Number of timesteps, >= 2
        beta_start (float): First beta (linear) / lower clip (cosine)
        beta_end (float): Last beta (linear)
        kind (str): "linear" or "cosine"
        alpha_floor (float): Numeric floor on alpha_bar used by predict_z0_from_eps

    Returns:
        NoiseSchedule
    """
    if T < 2:
        raise ScheduleError(f"T must be >= 2, got {T}")
    if not 0 < beta_start <= beta_end < 1:
        raise ScheduleError(f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})")

    if kind == "linear":
        beta = torch.linspace(beta_start, beta_end, T, dtype=torch.float64)
    elif kind == "cosine":
        beta = _cosine_betas(T)
    else:
        raise ScheduleError(f"unknown schedule kind '{kind}'")
    return schedule_from_betas(beta, alpha_floor=alpha_floor)


def schedule_from_config(cfg):
    return make_schedule(cfg.T, cfg.beta_start, cfg.beta_end, cfg.kind, cfg.alpha_floor)


def _coefficient(values, t, like):
    """Broadcast a per-timestep coefficient against a [B, C, H, W] tensor."""
    if isinstance(t, torch.Tensor) and t.dim() > 0:
        coeff = values.to(like.device)[t.to(like.device)]
        return coeff.to(like.dtype).view(-1, *([1] * (like.dim() - 1)))
    return float(values[int(t)])


def _check_timestep(t, s):
    if isinstance(t, torch.Tensor) and t.dim() > 0:
        if torch.any(t < 0) or torch.any(t > s.T - 1):
            raise ScheduleError(f"timesteps must lie in [0, {s.T - 1}]")
    elif not 0 <= int(t) <= s.T - 1:
        raise ScheduleError(f"timestep {int(t)} outside [0, {s.T - 1}]")


def _check_same_shape(a, b, what):
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def add_noise(z0, t, eps, s):
    """
    Forward process: sqrt(alpha_bar_t) * z0 + sqrt(1 - alpha_bar_t) * eps

    Args:
        z0 (torch.Tensor): Clean latent [B, C, H, W]
        t (int or torch.LongTensor[B]): Timestep index
        eps (torch.Tensor): Gaussian noise, same shape as z0
        s (NoiseSchedule): Schedule

    Returns:
        torch.Tensor: Noised latent z_t
    """
    _check_same_shape(z0, eps, "add_noise")
    _check_timestep(t, s)
    signal = _coefficient(s.alpha_bar.sqrt(), t, z0)
    noise = _coefficient((1.0 - s.alpha_bar).sqrt(), t, z0)
    return signal * z0 + noise * eps


def predict_z0_from_eps(z_t, eps_hat, t, s):
    """
    Invert the forward process given a noise estimate

    Returns:
        torch.Tensor: (z_t - sqrt(1 - alpha_bar_t) * eps_hat) / sqrt(alpha_bar_t)

    Raises:
        SingularityError: If alpha_bar_t is below the schedule's floor
    """
    _check_same_shape(z_t, eps_hat, "predict_z0_from_eps")
    _check_timestep(t, s)
    if isinstance(t, torch.Tensor) and t.dim() > 0:
        if torch.any(s.alpha_bar[t.cpu()] < s.alpha_floor):
            raise SingularityError("alpha_bar below numeric floor")
    elif s.alpha_bar[int(t)] < s.alpha_floor:
        raise SingularityError(f"alpha_bar[{int(t)}] = {float(s.alpha_bar[int(t)]):.3e} below numeric floor")
    signal = _coefficient(s.alpha_bar.sqrt(), t, z_t)
    noise = _coefficient((1.0 - s.alpha_bar).sqrt(), t, z_t)
    return (z_t - noise * eps_hat) / signal


def ddim_step(z_high, eps_hat, t_high, t_low, s):
    """
    Deterministic (eta = 0) DDIM update from t_high down to t_low

    Args:
        z_high (torch.Tensor): Latent at t_high
        eps_hat (torch.Tensor): Noise estimate at t_high
        t_high (int or torch.LongTensor[B]): Source timestep
        t_low (int or torch.LongTensor[B]): Target timestep, t_low <= t_high; CLEAN (-1) returns the z0 estimate
        s (NoiseSchedule): Schedule

    Returns:
        torch.Tensor: Latent at t_low
    """
    if isinstance(t_high, torch.Tensor) and t_high.dim() > 0:
        return _ddim_step_batched(z_high, eps_hat, t_high, t_low, s)
    t_high, t_low = int(t_high), int(t_low)
    if t_low > t_high or t_low < CLEAN:
        raise ScheduleError(f"ddim_step needs {CLEAN} <= t_low <= t_high, got t_low={t_low}, t_high={t_high}")
    if t_low == t_high:
        return z_high
    z0_hat = predict_z0_from_eps(z_high, eps_hat, t_high, s)
    if t_low == CLEAN:
        return z0_hat
    ab = s.alpha_bar_at(t_low)
    return math.sqrt(ab) * z0_hat + math.sqrt(1.0 - ab) * eps_hat


def _ddim_step_batched(z_high, eps_hat, t_high, t_low, s):
    t_low = timestep_tensor(t_low, t_high.shape[0], t_high.device)
    if torch.any(t_low > t_high) or torch.any(t_low < CLEAN):
        raise ScheduleError("ddim_step needs CLEAN <= t_low <= t_high for every sample")
    z0_hat = predict_z0_from_eps(z_high, eps_hat, t_high, s)
    alpha_bar = s.alpha_bar.to(t_low.device)[t_low.clamp(min=0)]
    alpha_bar = torch.where(t_low == CLEAN, torch.ones_like(alpha_bar), alpha_bar)
    shape = (-1,) + (1,) * (z_high.dim() - 1)
    signal = alpha_bar.sqrt().to(z_high.dtype).view(shape)
    noise = (1.0 - alpha_bar).sqrt().to(z_high.dtype).view(shape)
    stepped = signal * z0_hat + noise * eps_hat
    same = (t_low == t_high).view(shape)
    return torch.where(same, z_high, stepped)


def uniform_timesteps(T, n_steps):
    """Uniform descending subsequence of n_steps timesteps from T-1 to 0."""
    if n_steps < 1:
        raise ScheduleError("n_steps must be >= 1")
    if n_steps == 1:
        return [T - 1]
    return torch.linspace(T - 1, 0, n_steps, dtype=torch.float64).round().long().tolist()


def timestep_tensor(t, batch, device=None):
    """Broadcast an int or [B] timestep to a LongTensor of shape [batch]."""
    if isinstance(t, torch.Tensor) and t.dim() > 0:
        if t.shape[0] != batch:
            raise ValueError(f"got {t.shape[0]} timesteps for a batch of {batch}")
        return t.to(device=device, dtype=torch.long)
    return torch.full((batch,), int(t), dtype=torch.long, device=device)
