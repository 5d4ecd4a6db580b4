# -*- coding: utf-8 -*-

# training.py

"""
Two-stage optimization.

Stage 0 pre-trains the latent autoencoder and freezes it. Stage 1 trains the
compressor, the conditioned denoiser and the consistency head jointly:

    L = L_LC + (lambda1 * L_F + L_C) + lambda3 * L_diff

Stage 2 freezes the compressor and trains the decode path end to end through
the two-step sampler against a perceptual loss in image space.
"""

import logging
import os

import torch
import torch.nn as nn
import torch.nn.functional as F
from tqdm import tqdm

from config import get_preset_from_lambda
from corpus import cycle
from diffusion import add_noise
from fase import consistency_loss, ema_update, fase_forward, sample_consistency_timesteps, z0_prediction_loss
from latent_codec import rd_loss
from model import CheckpointError, read_checkpoint, save_checkpoint
from sampler import make_generator, two_step_latent
from utils import generate_filename

logger = logging.getLogger(__name__)

PERCEPTUAL_SEED = 20240917
PIXEL_WEIGHT = 0.1

# Reported loss terms; "total" is their sum
STAGE1_TERMS = ("distortion", "rate", "codebook", "z0_pred", "consistency", "diffusion")
STAGE2_TERMS = ("perceptual", "z0_pred", "consistency", "diffusion")

STAGE1_GROUPS = ("codec", "denoiser", "control", "semantic", "fase")
STAGE2_GROUPS = ("denoiser", "control", "semantic", "fase")


class NumericDivergenceError(ArithmeticError):
    """A loss term became NaN or infinite."""

    def __init__(self, term, step=None, value=None):
        where = f" at step {step}" if step is not None else ""
        super().__init__(f"loss term '{term}' diverged{where} (value {value})")
        self.term = term
        self.step = step


class FrozenGradientError(RuntimeError):
    """A parameter group that must stay frozen received a gradient."""


# Perceptual proxy


class RandomFeatures(nn.Module):
    """Three-scale random conv features, fixed by seed and never trained."""

    def __init__(self, seed=PERCEPTUAL_SEED):
        super().__init__()
        generator = torch.Generator().manual_seed(seed)
        widths = [(3, 16), (16, 32), (32, 64)]
        self.layers = nn.ModuleList(nn.Conv2d(i, o, 3, padding=1) for i, o in widths)
        with torch.no_grad():
            for layer in self.layers:
                fan_in = layer.in_channels * 9
                layer.weight.copy_(torch.randn(layer.weight.shape, generator=generator) / fan_in ** 0.5)
                layer.bias.zero_()
        self.requires_grad_(False)

    def forward(self, x):
        features = []
        h = x * 2.0 - 1.0
        for level, layer in enumerate(self.layers):
            if level:
                h = F.avg_pool2d(h, 2)
            h = F.relu(layer(h))
            features.append(h)
        return features


_feature_cache = {}


def _features_for(x):
    key = (x.device, x.dtype)
    if key not in _feature_cache:
        _feature_cache[key] = RandomFeatures().to(device=x.device, dtype=x.dtype)
    return _feature_cache[key]


def perceptual_loss(x_hat, x):
    """
    Desk-scale stand-in for LPIPS

    Mean squared distance between random-feature maps at three scales plus
    0.1 times the pixel MSE.

    Args:
        x_hat (torch.Tensor): Reconstruction [B, 3, H, W]
        x (torch.Tensor): Reference, same shape, values in [0, 1]

    Returns:
        torch.Tensor: Scalar loss
    """
    if x_hat.shape != x.shape:
        raise ValueError(f"perceptual_loss: shape mismatch {tuple(x_hat.shape)} vs {tuple(x.shape)}")
    extractor = _features_for(x)
    loss = PIXEL_WEIGHT * F.mse_loss(x_hat, x)
    for a, b in zip(extractor(x_hat), extractor(x)):
        loss = loss + F.mse_loss(a, b)
    return loss


# Optimizers


def build_optimizer(model, cfg, stage, steps):
    """
    Adam over the stage's parameter groups with a cosine learning-rate decay

    Returns:
        tuple: (optimizer, scheduler)
    """
    t = cfg.train
    if stage == 0:
        groups = [{"params": list(model.autoencoder.parameters()), "lr": t.lr_autoencoder, "name": "autoencoder"}]
    else:
        rates = {
            "codec": t.lr_codec,
            "denoiser": t.lr_denoiser,
            "control": t.lr_control,
            "semantic": t.lr_semantic,
            "fase": t.lr_fase,
        }
        names = STAGE1_GROUPS if stage == 1 else STAGE2_GROUPS
        groups = [{"params": list(model.group(n).parameters()), "lr": rates[n], "name": n} for n in names]
    optimizer = torch.optim.Adam(groups)
    scheduler = torch.optim.lr_scheduler.CosineAnnealingLR(optimizer, T_max=max(1, steps))
    return optimizer, scheduler


def check_finite(terms, step=None):
    for name, value in terms.items():
        if not torch.isfinite(value).all():
            raise NumericDivergenceError(name, step, float(value))


def audit_frozen(module, name):
    """
    Raise if any parameter of a frozen module holds a non-zero gradient

    Raises:
        FrozenGradientError: Naming the group and parameter
    """
    for pname, p in module.named_parameters():
        if p.grad is not None and torch.any(p.grad != 0):
            raise FrozenGradientError(f"frozen group '{name}' received a gradient on '{pname}'")


def _report(terms, total, **extra):
    report = {name: float(value) for name, value in terms.items()}
    report["total"] = float(total)
    report.update(extra)
    return report


def _diffusion_timesteps(batch, T, k, generator, t_min=0):
    """t ~ U{max(1, t_min), ..., T-1-k} so that t-1 and t+k stay on the schedule."""
    low = max(1, t_min)
    return torch.randint(low, T - k, (batch,), generator=generator)


def _fase_terms(model, z0, c_hat, bundle, t, noise, eps_hat, generator, cfg):
    """z0-prediction and consistency losses, or zeros under the no_cre ablation."""
    s = model.schedule
    zero = z0.new_zeros(())
    if cfg.ablation.no_cre:
        return zero, zero
    z_t = add_noise(z0, t, noise, s)
    z_tilde0 = fase_forward(model.fase, z_t, eps_hat.detach(), c_hat, t, s)
    cap = cfg.train.z0_weight_cap or None
    l_f = cfg.codec.lambda1 * z0_prediction_loss(z_tilde0, z0, t, s, max_weight=cap)

    k = cfg.skip_k
    t_high, _ = sample_consistency_timesteps(z0.shape[0], s.T, k, generator, model.fase.boundary.t_min)
    target_bundle = bundle.detach()
    eps_fn = lambda z, tt: model.eps(z, target_bundle, tt)
    noise_c = torch.randn(z0.shape, generator=generator, dtype=z0.dtype).to(z0.device)
    l_c = consistency_loss(model.fase, model.ema_fase, eps_fn, z0, c_hat, t_high, k, s, noise_c)
    return l_f, l_c


def _diffusion_loss(model, z0, bundle, t, noise):
    z_t = add_noise(z0, t, noise, model.schedule)
    eps_hat = model.eps(z_t, bundle, t)
    return F.mse_loss(eps_hat, noise), eps_hat


def autoencoder_step(model, batch, optimizer, scheduler=None):
    x = batch[0]
    loss = F.mse_loss(model.autoencoder(x), x)
    check_finite({"reconstruction": loss})
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    optimizer.step()
    if scheduler is not None:
        scheduler.step()
    return {"reconstruction": float(loss), "total": float(loss)}


def stage1_step(model, batch, optimizer, cfg, generator, scheduler=None, step=None):
    """
    One joint step on compressor, denoiser, control branches and consistency head

    Args:
        model (DiffCRModel): Model with a frozen autoencoder
        batch (tuple): (images [B, 3, H, W], labels [B])
        optimizer (torch.optim.Optimizer): Stage-1 optimizer
        cfg (PipelineConfig): Configuration
        generator (torch.Generator): Timestep and noise source
        scheduler (optional): Learning-rate scheduler stepped after the update
        step (int, optional): Step number used in divergence messages

    Returns:
        dict: Weighted loss terms, their total, bpp estimate and learning rate
    """
    x, labels = batch
    model.codec.train()
    s = model.schedule
    with torch.no_grad():
        z0 = model.autoencoder.encode(x)
    out = model.codec(z0, generator)
    c_hat = out["c_hat"]
    rate_bits = out["y_bits"] + out["hyper_bits"]
    _, lc = rd_loss(z0, c_hat, rate_bits, out["l_y"], out["l_hat"], cfg.codec)
    bundle = model.make_bundle(c_hat, labels)

    t = _diffusion_timesteps(z0.shape[0], s.T, cfg.skip_k, generator, model.fase.boundary.t_min).to(z0.device)
    noise = torch.randn(z0.shape, generator=generator, dtype=z0.dtype).to(z0.device)
    l_diff, eps_hat = _diffusion_loss(model, z0, bundle, t, noise)
    l_f, l_c = _fase_terms(model, z0, c_hat, bundle, t, noise, eps_hat, generator, cfg)

    terms = {
        "distortion": lc["distortion"],
        "rate": lc["rate"],
        "codebook": lc["codebook"],
        "z0_pred": l_f,
        "consistency": l_c,
        "diffusion": cfg.train.lambda3 * l_diff,
    }
    check_finite(terms, step)
    total = sum(terms.values())

    optimizer.zero_grad(set_to_none=True)
    total.backward()
    optimizer.step()
    if scheduler is not None:
        scheduler.step()
    ema_update(model.ema_fase, model.fase, cfg.fase.ema_mu)

    pixels = x.shape[0] * x.shape[-2] * x.shape[-1]
    return _report(terms, total, bpp=float(rate_bits) / pixels, lr=optimizer.param_groups[0]["lr"])


def stage2_step(model, batch, optimizer, cfg, generator, scheduler=None, step=None):
    """
    One decode-path step with the compressor frozen

    The two-step sampler runs with gradients through both steps and the
    decoded image is scored with the perceptual proxy.

    Raises:
        FrozenGradientError: If the compressor or autoencoder got a gradient
    """
    x, labels = batch
    s = model.schedule
    model.codec.requires_grad_(False)
    model.codec.eval()
    with torch.no_grad():
        z0 = model.autoencoder.encode(x)
        c_hat = model.codec(z0)["c_hat"]
    bundle = model.make_bundle(c_hat, labels)

    z_tilde0 = two_step_latent(model, bundle, generator, init_from_control=cfg.sampler.init_from_control)
    x_hat = model.autoencoder.decode(z_tilde0)
    l_per = perceptual_loss(x_hat, x)

    t = _diffusion_timesteps(z0.shape[0], s.T, cfg.skip_k, generator, model.fase.boundary.t_min).to(z0.device)
    noise = torch.randn(z0.shape, generator=generator, dtype=z0.dtype).to(z0.device)
    l_diff, eps_hat = _diffusion_loss(model, z0, bundle, t, noise)
    l_f, l_c = _fase_terms(model, z0, c_hat, bundle, t, noise, eps_hat, generator, cfg)

    terms = {"perceptual": l_per, "z0_pred": l_f, "consistency": l_c, "diffusion": cfg.train.lambda3 * l_diff}
    check_finite(terms, step)
    total = sum(terms.values())

    optimizer.zero_grad(set_to_none=True)
    total.backward()
    audit_frozen(model.codec, "codec")
    audit_frozen(model.autoencoder, "autoencoder")
    optimizer.step()
    if scheduler is not None:
        scheduler.step()
    ema_update(model.ema_fase, model.fase, cfg.fase.ema_mu)
    return _report(terms, total, lr=optimizer.param_groups[0]["lr"])


class MetricsLog:
    """Appends one key=value record per step."""

    def __init__(self, path):
        self.path = path
        directory = os.path.dirname(path)
        if directory:
            os.makedirs(directory, exist_ok=True)

    def write(self, stage, step, report):
        fields = [f"step={step}", f"stage={stage}"]
        fields += [f"{key}={value:.8e}" for key, value in report.items()]
        with open(self.path, "a", encoding="utf-8") as f:
            f.write(" ".join(fields) + "\n")


def read_metrics(path):
    """Parse a metrics log back into a list of dicts."""
    records = []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            record = {}
            for field in line.split():
                key, value = field.split("=", 1)
                record[key] = int(value) if key in ("step", "stage") else float(value)
            if record:
                records.append(record)
    return records


def pretrain_autoencoder(model, loader, cfg, steps=None, generator=None):
    """
    Train the latent autoencoder, calibrate its latent scale and freeze it

    Returns:
        float: Mean reconstruction MSE over the last ten steps
    """
    steps = cfg.train.ae_steps if steps is None else steps
    optimizer, scheduler = build_optimizer(model, cfg, 0, steps)
    model.autoencoder.requires_grad_(True)
    model.autoencoder.train()
    batches = cycle(loader)
    recent = []
    for _ in tqdm(range(steps), desc="Stage 0 (autoencoder)", disable=steps == 0):
        report = autoencoder_step(model, next(batches), optimizer, scheduler)
        recent = (recent + [report["reconstruction"]])[-10:]
    model.autoencoder.calibrate(next(batches)[0])
    model.freeze_autoencoder()
    model.ae_trained = True
    mse = sum(recent) / len(recent) if recent else float("nan")
    logger.info("autoencoder reconstruction MSE %.2e", mse)
    return mse


def train_stage(model, loader, cfg, stage, out_dir, steps=None, resume=None, metrics_path=None):
    """
    Run one training stage and write its checkpoint

    Args:
        model (DiffCRModel): Model to train in place
        loader (DataLoader): Training batches
        cfg (PipelineConfig): Configuration
        stage (int): 1 or 2
        out_dir (str): Checkpoint and metrics directory
        steps (int, optional): Total steps of the stage; config value when None
        resume (dict, optional): Checkpoint payload of the same stage to continue from
        metrics_path (str, optional): Metrics log path; out_dir/metrics.log when None

    Returns:
        str: Path of the final checkpoint
    """
    if stage not in (1, 2):
        raise ValueError(f"stage must be 1 or 2, got {stage}")
    if steps is None:
        steps = cfg.train.stage1_steps if stage == 1 else cfg.train.stage2_steps
    if not model.ae_trained:
        raise CheckpointError("the latent autoencoder has not been pre-trained")

    step_fn = stage1_step if stage == 1 else stage2_step
    optimizer, scheduler = build_optimizer(model, cfg, stage, steps)
    start = 0
    if resume is not None and resume.get("stage") == stage:
        start = int(resume["step"])
        if resume.get("optimizer") is not None:
            optimizer.load_state_dict(resume["optimizer"])
        for _ in range(start):
            scheduler.step()
        logger.info("resuming stage %d at step %d", stage, start)

    generator = make_generator(cfg.train.seed * 1000 + stage * 100 + start)
    log = MetricsLog(metrics_path or os.path.join(out_dir, "metrics.log"))
    preset = get_preset_from_lambda(cfg.codec.lambda2)
    path = os.path.join(out_dir, generate_filename(stage, preset, cfg.ablation.active()))
    batches = cycle(loader)

    model.train()
    model.freeze_autoencoder()
    if stage == 1:
        model.codec.requires_grad_(True)
    progress = tqdm(range(start, steps), desc=f"Stage {stage}", initial=start, total=steps)
    for step in progress:
        report = step_fn(model, next(batches), optimizer, cfg, generator, scheduler, step + 1)
        log.write(stage, step + 1, report)
        if (step + 1) % cfg.train.log_every == 0:
            progress.set_postfix(total=f"{report['total']:.4f}")
            logger.debug("stage %d step %d: %s", stage, step + 1, report)
        if (step + 1) % cfg.train.checkpoint_every == 0 and step + 1 < steps:
            save_checkpoint(path, model, stage, step + 1, optimizer, preset)

    model.eval()
    model.codec.update_tables()
    return save_checkpoint(path, model, stage, steps, optimizer, preset)


def require_stage1(path):
    """
    Check that a checkpoint can seed stage 2

    Raises:
        CheckpointError: If it is missing or not a finished stage-1 (or stage-2) checkpoint
    """
    payload = read_checkpoint(path)
    if payload["stage"] < 1:
        raise CheckpointError(f"{path} is a stage-{payload['stage']} checkpoint; stage 2 needs a stage-1 checkpoint")
    return payload
