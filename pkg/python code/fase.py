# -*- coding: utf-8 -*-

# fase.py

"""
Frequency-aware skip estimation: a consistency head that maps a noised
latent z_t, the denoiser's noise estimate and the compressed control c_hat
to a clean-latent estimate

    f(z_t, c_hat, t) = c_skip(t) * z_t + c_out(t) * F(z0_hat_t, c_hat, t)

where z0_hat_t is the epsilon-derived estimate at t. F starts at zero, so a
fresh head returns c_skip(t) * z_t. Spectra use the orthonormal 2-D FFT.
"""

import logging
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from diffusion import add_noise, ddim_step, predict_z0_from_eps, timestep_tensor
from layers import ResBlock, TimeEmbedding, attention, conv, group_norm, zero_module

logger = logging.getLogger(__name__)

HIGH = "H"
LOW = "L"
IMAG_TOLERANCE = 1e-4


class ConjugateSymmetryError(ArithmeticError):
    """Inverse FFT left a non-negligible imaginary part."""


@dataclass(frozen=True)
class BoundaryCoefficients:
    """
    c_skip / c_out of the consistency parameterization

    Attributes:
        sigma_data (float): Data scale
        epsilon_min (float): Smallest admissible t as a fraction of T
        T (int): Number of diffusion timesteps
    """
    sigma_data: float
    epsilon_min: float
    T: int

    @property
    def t_min(self):
        return int(round(self.epsilon_min * self.T))

    @property
    def time_scale(self):
        return 10.0 / self.T


def boundary_from_config(cfg, T):
    return BoundaryCoefficients(sigma_data=cfg.sigma_data, epsilon_min=cfg.epsilon_min, T=T)


def _as_float_t(t, bc):
    t = torch.as_tensor(t, dtype=torch.float64)
    if torch.any(t < bc.t_min):
        raise ValueError(f"t below t_min = {bc.t_min}")
    if torch.any(t > bc.T - 1):
        raise ValueError(f"t above T - 1 = {bc.T - 1}")
    return t


def c_skip(t, bc):
    """sigma_data^2 / ((t - t_min)^2 s^2 + sigma_data^2), equal to 1 at t_min."""
    t = _as_float_t(t, bc)
    sd2 = bc.sigma_data ** 2
    return sd2 / (((t - bc.t_min) * bc.time_scale) ** 2 + sd2)


def c_out(t, bc):
    """sigma_data (t - t_min) s / sqrt(sigma_data^2 + (t s)^2), equal to 0 at t_min."""
    t = _as_float_t(t, bc)
    s = bc.time_scale
    return bc.sigma_data * (t - bc.t_min) * s / torch.sqrt(bc.sigma_data ** 2 + (t * s) ** 2)


@dataclass
class FilterMask:
    """
    Binary high-pass mask in FFT index order

    K is 1 where the radial frequency, normalized so the axis Nyquist is 1,
    exceeds cutoff_rho.
    """
    K: torch.Tensor
    cutoff_rho: float

    @property
    def low(self):
        return 1 - self.K

    @property
    def high_fraction(self):
        return float(self.K.float().mean())


def make_filter_mask(height, width, cutoff_rho, device=None, dtype=torch.float32):
    if not 0.0 < cutoff_rho < 1.0:
        raise ValueError(f"cutoff_rho must lie in (0, 1), got {cutoff_rho}")
    fy = torch.fft.fftfreq(height, device=device, dtype=torch.float64)[:, None] * 2.0
    fx = torch.fft.fftfreq(width, device=device, dtype=torch.float64)[None, :] * 2.0
    rho = torch.sqrt(fy ** 2 + fx ** 2)
    return FilterMask(K=(rho > cutoff_rho).to(dtype), cutoff_rho=cutoff_rho)


def freq_split(x, mask):
    """
    Split a real signal into high and low bands of its spectrum

    Args:
        x (torch.Tensor): Real tensor [..., H, W]
        mask (FilterMask): Mask of shape [H, W]

    Returns:
        tuple: (x_H, x_L) complex spectra with x_H + x_L = FFT(x)
    """
    if tuple(x.shape[-2:]) != tuple(mask.K.shape):
        raise ValueError(f"signal dims {tuple(x.shape[-2:])} do not match mask {tuple(mask.K.shape)}")
    spectrum = torch.fft.fft2(x, norm="ortho")
    K = mask.K.to(device=x.device, dtype=x.dtype)
    return spectrum * K, spectrum * (1 - K)


def hermitian_projection(spectrum):
    """Nearest spectrum of a real signal: (X[k] + conj(X[-k])) / 2."""
    mirrored = torch.roll(torch.flip(spectrum, dims=(-2, -1)), shifts=(1, 1), dims=(-2, -1))
    return 0.5 * (spectrum + mirrored.conj())


def real_ifft(spectrum):
    """
    Inverse FFT of a spectrum that should belong to a real signal

    Raises:
        ConjugateSymmetryError: If the imaginary residue exceeds 1e-4 of the signal norm
    """
    signal = torch.fft.ifft2(spectrum, norm="ortho")
    residue = torch.linalg.vector_norm(signal.imag)
    scale = torch.linalg.vector_norm(signal.real)
    if residue > IMAG_TOLERANCE * scale + torch.finfo(signal.real.dtype).tiny:
        raise ConjugateSymmetryError(f"imaginary residue {float(residue):.3e} vs signal norm {float(scale):.3e}")
    return signal.real


def temporal_mask(t, T, like):
    """M_t = 1 - t / T broadcast against like."""
    t = torch.as_tensor(t, dtype=torch.float64, device=like.device)
    if torch.any(t < 0) or torch.any(t > T):
        raise ValueError(f"temporal mask needs 0 <= t <= {T}")
    m = 1.0 - t / T
    real_dtype = like.real.dtype if like.is_complex() else like.dtype
    if m.dim() == 0:
        return m.to(real_dtype)
    return m.to(real_dtype).view(-1, *([1] * (like.dim() - 1)))


def temporal_mix(attn_out, c_component, t, T, complement=False):
    """
    attn_out * M_t + c_component * (1 - M_t)

    With complement=True the roles of M_t and 1 - M_t are swapped.
    """
    if attn_out.shape != c_component.shape:
        raise ValueError(f"temporal_mix: shape mismatch {tuple(attn_out.shape)} vs {tuple(c_component.shape)}")
    m = temporal_mask(t, T, attn_out)
    if complement:
        m = 1 - m
    return attn_out * m + c_component * (1 - m)


def to_patches(x, patch):
    """[B, C, H, W] -> [B, L, C * patch * patch] non-overlapping patch tokens."""
    height, width = x.shape[-2:]
    if height % patch or width % patch:
        raise ValueError(f"latent dims {height}x{width} not divisible by patch size {patch}")
    return F.unfold(x, kernel_size=patch, stride=patch).transpose(1, 2)


def from_patches(tokens, size, patch):
    return F.fold(tokens.transpose(1, 2), output_size=size, kernel_size=patch, stride=patch)


def complex_to_channels(x):
    return torch.cat([x.real, x.imag], dim=1)


def channels_to_complex(x):
    real, imag = x.chunk(2, dim=1)
    return torch.complex(real, imag)


class BandAttention(nn.Module):
    """Single-head cross-attention between patch-token sequences."""

    def __init__(self, token_features, d_model):
        super().__init__()
        self.q = nn.Linear(token_features, d_model)
        self.k = nn.Linear(token_features, d_model)
        self.v = nn.Linear(token_features, d_model)
        self.out = nn.Linear(d_model, token_features)

    def attend(self, q_tokens, kv_tokens):
        """Attention core before the output projection: (values, weights)."""
        return attention(self.q(q_tokens), self.k(kv_tokens), self.v(kv_tokens))

    def forward(self, q_tokens, kv_tokens):
        out, _ = self.attend(q_tokens, kv_tokens)
        return self.out(out)


class FrequencyDecouplingAttention(nn.Module):
    """
    Band-wise fusion of the prior z0_hat_t with the compressed control

    Both inputs are split into high and low bands; each band runs its own
    cross-attention (queries from z0_hat_t, keys and values from c_hat) and is
    blended with the control's band by the temporal mask. The recombined
    spectrum is projected onto real signals before the inverse FFT.

    Args:
        cfg (FaseConfig): Cutoff, patch size and widths
        channels (int): Latent channels
        T (int): Number of diffusion timesteps
    """

    def __init__(self, cfg, channels, T):
        super().__init__()
        self.T = T
        self.patch = cfg.patch_size
        self.cutoff_rho = cfg.cutoff_rho
        self.complement = cfg.low_band_complement
        features = 2 * channels * self.patch ** 2
        self.bands = nn.ModuleDict({HIGH: BandAttention(features, cfg.d_model), LOW: BandAttention(features, cfg.d_model)})

    def filter_mask(self, height, width, like):
        return make_filter_mask(height, width, self.cutoff_rho, device=like.device, dtype=like.dtype)

    def freq_cross_attention(self, q_src, kv_src, band):
        """
        Cross-attention on complex spectra carried as (real, imag) channels

        Args:
            q_src (torch.Tensor): Complex band of z0_hat_t [B, C, H, W]
            kv_src (torch.Tensor): Complex band of c_hat [B, C, H, W]
            band (str): "H" or "L"

        Returns:
            torch.Tensor: Complex attention output [B, C, H, W]
        """
        size = tuple(q_src.shape[-2:])
        q_tokens = to_patches(complex_to_channels(q_src), self.patch)
        kv_tokens = to_patches(complex_to_channels(kv_src), self.patch)
        out = self.bands[band](q_tokens, kv_tokens)
        return channels_to_complex(from_patches(out, size, self.patch))

    def forward(self, z0_hat_t, c_hat, t):
        if z0_hat_t.shape != c_hat.shape:
            raise ValueError(f"fda: shape mismatch {tuple(z0_hat_t.shape)} vs {tuple(c_hat.shape)}")
        mask = self.filter_mask(*z0_hat_t.shape[-2:], z0_hat_t)
        z_high, z_low = freq_split(z0_hat_t, mask)
        c_high, c_low = freq_split(c_hat, mask)

        # attention output is confined to its own band
        a_high = self.freq_cross_attention(z_high, c_high, HIGH) * mask.K
        a_low = self.freq_cross_attention(z_low, c_low, LOW) * mask.low
        fused = temporal_mix(a_high, c_high, t, self.T) + temporal_mix(a_low, c_low, t, self.T, self.complement)
        return real_ifft(hermitian_projection(fused))


class SpatialCrossAttention(nn.Module):
    """Single-band spatial replacement for the frequency attention."""

    def __init__(self, cfg, channels, T):
        super().__init__()
        self.T = T
        self.patch = cfg.patch_size
        self.attn = BandAttention(channels * self.patch ** 2, cfg.d_model)

    def forward(self, z0_hat_t, c_hat, t):
        if z0_hat_t.shape != c_hat.shape:
            raise ValueError(f"spatial attention: shape mismatch {tuple(z0_hat_t.shape)} vs {tuple(c_hat.shape)}")
        size = tuple(z0_hat_t.shape[-2:])
        out = self.attn(to_patches(z0_hat_t, self.patch), to_patches(c_hat, self.patch))
        return temporal_mix(from_patches(out, size, self.patch), c_hat, t, self.T)


class FaseHead(nn.Module):
    """
    F_phi: fusion attention followed by a small conv head whose last layer
    is zero-initialized

    Args:
        cfg (FaseConfig): Head configuration
        channels (int): Latent channels
        T (int): Number of diffusion timesteps
        use_fda (bool): Frequency attention, or spatial attention when False
    """

    def __init__(self, cfg, channels, T, use_fda=True):
        super().__init__()
        self.cfg = cfg
        self.T = T
        self.boundary = boundary_from_config(cfg, T)
        hidden = cfg.hidden_channels
        embed = 4 * hidden
        if use_fda:
            self.fusion = FrequencyDecouplingAttention(cfg, channels, T)
        else:
            self.fusion = SpatialCrossAttention(cfg, channels, T)
        self.time_embed = TimeEmbedding(hidden, embed)
        self.fuse_in = conv(3 * channels, hidden)
        self.blocks = nn.ModuleList([ResBlock(hidden, hidden, embed), ResBlock(hidden, hidden, embed)])
        self.out_norm = group_norm(hidden)
        self.out = zero_module(conv(hidden, channels))

    def fda_forward(self, z0_hat_t, c_hat, t):
        return self.fusion(z0_hat_t, c_hat, t)

    def forward(self, z0_hat_t, c_hat, t):
        t = timestep_tensor(t, z0_hat_t.shape[0], z0_hat_t.device)
        fused = self.fda_forward(z0_hat_t, c_hat, t)
        h = self.fuse_in(torch.cat([fused, z0_hat_t, c_hat], dim=1))
        emb = self.time_embed(t, z0_hat_t.dtype)
        for block in self.blocks:
            h = block(h, emb)
        return self.out(F.silu(self.out_norm(h)))


def _broadcast(coeff, like):
    return coeff.to(device=like.device, dtype=like.dtype).view(-1, *([1] * (like.dim() - 1)))


def fase_forward(head, z_t, eps_hat, c_hat, t, s):
    """
    Consistency estimate of the clean latent

    Args:
        head (FaseHead): F_phi (online or EMA copy)
        z_t (torch.Tensor): Noised latent
        eps_hat (torch.Tensor): Denoiser output at (z_t, t)
        c_hat (torch.Tensor): Compressed control
        t (int or torch.LongTensor[B]): Timestep(s), >= t_min
        s (NoiseSchedule): Schedule

    Returns:
        torch.Tensor: z_tilde0, same shape as z_t
    """
    if not z_t.shape == eps_hat.shape == c_hat.shape:
        raise ValueError(f"fase_forward: shapes {tuple(z_t.shape)}, {tuple(eps_hat.shape)}, {tuple(c_hat.shape)}")
    t = timestep_tensor(t, z_t.shape[0], z_t.device)
    skip = _broadcast(c_skip(t.cpu(), head.boundary), z_t)
    out = _broadcast(c_out(t.cpu(), head.boundary), z_t)
    z0_hat_t = predict_z0_from_eps(z_t, eps_hat, t, s)
    if head.cfg.z0_clip > 0:
        z0_hat_t = z0_hat_t.clamp(-head.cfg.z0_clip, head.cfg.z0_clip)
    return skip * z_t + out * head(z0_hat_t, c_hat, t)


def z0_loss_weight(t, s):
    """w(t) = (alpha_bar[t-1] / (1 - alpha_bar[t-1]) - alpha_bar[t] / (1 - alpha_bar[t])) / 2."""
    t = torch.as_tensor(t, dtype=torch.long)
    if torch.any(t < 1) or torch.any(t > s.T - 1):
        raise ValueError(f"z0 prediction weight needs 1 <= t <= {s.T - 1}")
    snr = s.alpha_bar / (1.0 - s.alpha_bar)
    return 0.5 * (snr[t - 1] - snr[t])


def z0_prediction_loss(z_tilde0, z0, t, s, max_weight=None):
    """
    Weighted z0 regression: mean over the batch of w(t) * MSE

    Args:
        z_tilde0 (torch.Tensor): Consistency estimate
        z0 (torch.Tensor): Clean latent
        t (int or torch.LongTensor[B]): Timesteps used to noise z0, >= 1
        s (NoiseSchedule): Schedule
        max_weight (float, optional): Upper clamp on w(t)

    Returns:
        torch.Tensor: Scalar loss
    """
    t = timestep_tensor(t, z0.shape[0]).cpu()
    weight = z0_loss_weight(t, s)
    if max_weight is not None:
        weight = weight.clamp(max=max_weight)
    weight = weight.to(device=z0.device, dtype=z0.dtype)
    per_sample = ((z_tilde0 - z0) ** 2).flatten(1).mean(dim=1)
    return (weight * per_sample).mean()


def sample_consistency_timesteps(batch, T, k, generator=None, t_min=0):
    """
    Draw t_n and return (t_n + k, t_n)

    t_n is drawn uniformly from {max(1, t_min), ..., T - 1} and draws whose
    t_n + k falls outside the schedule are redrawn.
    """
    low = max(1, t_min)
    if low + k > T - 1:
        raise ValueError(f"no valid timestep pair for k={k}, T={T}")
    t_n = torch.randint(low, T, (batch,), generator=generator)
    bad = t_n + k > T - 1
    while torch.any(bad):
        t_n[bad] = torch.randint(low, T, (int(bad.sum()),), generator=generator)
        bad = t_n + k > T - 1
    return t_n + k, t_n


def consistency_loss(head, target_head, eps_fn, z0, c_hat, t_high, k, s, noise):
    """
    Skip-step consistency loss between the online head and its EMA target

    Args:
        head (FaseHead): Online F_phi
        target_head (FaseHead): EMA copy F_phi-, never updated by this loss
        eps_fn (callable): (z_t, t) -> eps_hat from the denoiser; run without gradients
        z0 (torch.Tensor): Clean latent
        c_hat (torch.Tensor): Compressed control (gradients flow in the online branch only)
        t_high (torch.LongTensor[B]): t_{n+k}
        k (int): Skip, >= 0
        s (NoiseSchedule): Schedule
        noise (torch.Tensor): Gaussian noise used to reach z_{t_{n+k}}

    Returns:
        torch.Tensor: MSE between the online and target estimates
    """
    if k < 0:
        raise ValueError("k must be >= 0")
    t_high = timestep_tensor(t_high, z0.shape[0], z0.device)
    t_low = t_high - k
    z_high = add_noise(z0, t_high, noise, s)
    with torch.no_grad():
        eps_high = eps_fn(z_high, t_high)
        z_low = ddim_step(z_high, eps_high, t_high, t_low, s)
        eps_low = eps_fn(z_low, t_low)
        target = fase_forward(target_head, z_low, eps_low, c_hat.detach(), t_low, s)
    online = fase_forward(head, z_high, eps_high, c_hat, t_high, s)
    return F.mse_loss(online, target)


@torch.no_grad()
def ema_update(target, online, mu):
    """target <- mu * target + (1 - mu) * online, over parameters and float buffers."""
    if not 0.0 <= mu <= 1.0:
        raise ValueError(f"ema mu must lie in [0, 1], got {mu}")
    for p_target, p_online in zip(target.parameters(), online.parameters()):
        p_target.mul_(mu).add_(p_online.detach(), alpha=1.0 - mu)
    for b_target, b_online in zip(target.buffers(), online.buffers()):
        if b_target.is_floating_point():
            b_target.mul_(mu).add_(b_online, alpha=1.0 - mu)
        else:
            b_target.copy_(b_online)
    return target
