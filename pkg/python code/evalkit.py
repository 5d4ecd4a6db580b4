# -*- coding: utf-8 -*-

# evalkit.py

"""
Quality metrics, rate-distortion curves, BD-rate, and the analysis tools
behind the evaluation report: bit-allocation maps, frequency-energy
profiles and decode timing.
"""

import logging
import math
import os
import statistics
import time
from dataclasses import dataclass, field
from typing import List

import numpy as np
import pandas as pd
import torch
import torch.nn.functional as F
from scipy.interpolate import PchipInterpolator
from tqdm import tqdm

from diffusion import add_noise, predict_z0_from_eps
from fase import make_filter_mask, freq_split
from latent_codec import bit_allocation_map, estimate_rate
from mapping import metric_direction
from sampler import (
    DenoiserCallCounter,
    control_bundle,
    ddim_decode,
    ddim_latent,
    decode,
    make_generator,
    two_step_decode,
    two_step_latent,
)
from training import perceptual_loss

logger = logging.getLogger(__name__)

PSNR_CAP = 100.0
MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
RD_COLUMNS = ["codec", "metric", "bpp", "quality"]


class RDCurveError(ValueError):
    """Invalid or incomparable rate-distortion curves."""


# Metrics


def psnr(x, y, max_val=1.0):
    """
    Peak signal-to-noise ratio in dB, capped at 100 for identical inputs

    Args:
        x (torch.Tensor): Image batch
        y (torch.Tensor): Image batch of the same shape
        max_val (float): Peak value

    Returns:
        float: Mean PSNR over the batch
    """
    if x.shape != y.shape:
        raise ValueError(f"psnr: shape mismatch {tuple(x.shape)} vs {tuple(y.shape)}")
    batch = x.shape[0] if x.dim() == 4 else 1
    diff = (x.double() - y.double()).reshape(batch, -1)
    values = []
    for mse in (diff ** 2).mean(dim=1).tolist():
        values.append(PSNR_CAP if mse == 0 else min(PSNR_CAP, 10.0 * math.log10(max_val ** 2 / mse)))
    return float(np.mean(values))


def _gaussian_window(size, sigma=1.5, dtype=torch.float64, device=None):
    coords = torch.arange(size, dtype=dtype, device=device) - (size - 1) / 2.0
    g = torch.exp(-(coords ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def _filter(x, window):
    channels = x.shape[1]
    size = window.shape[0]
    kh = window.view(1, 1, size, 1).repeat(channels, 1, 1, 1)
    kw = window.view(1, 1, 1, size).repeat(channels, 1, 1, 1)
    return F.conv2d(F.conv2d(x, kh, groups=channels), kw, groups=channels)


def _ssim_components(x, y, data_range):
    """Mean luminance-contrast-structure product and contrast-structure term per image."""
    size = min(11, x.shape[-2], x.shape[-1])
    if size % 2 == 0:
        size -= 1
    window = _gaussian_window(size, dtype=x.dtype, device=x.device)
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    mu_x, mu_y = _filter(x, window), _filter(y, window)
    sigma_xx = _filter(x * x, window) - mu_x ** 2
    sigma_yy = _filter(y * y, window) - mu_y ** 2
    sigma_xy = _filter(x * y, window) - mu_x * mu_y
    cs = (2 * sigma_xy + c2) / (sigma_xx + sigma_yy + c2)
    luminance = (2 * mu_x * mu_y + c1) / (mu_x ** 2 + mu_y ** 2 + c1)
    return (luminance * cs).flatten(1).mean(1), cs.flatten(1).mean(1)


def ms_ssim(x, y, data_range=1.0):
    """
    Multi-scale SSIM over 5 scales with the standard weights

    The Gaussian window shrinks to the image size at coarse scales, so 64x64
    inputs are accepted.

    Returns:
        float: Mean MS-SSIM over the batch
    """
    if x.shape != y.shape:
        raise ValueError(f"ms_ssim: shape mismatch {tuple(x.shape)} vs {tuple(y.shape)}")
    if min(x.shape[-2:]) < 2 ** (len(MS_SSIM_WEIGHTS) - 1):
        raise ValueError(f"ms_ssim needs images of at least {2 ** (len(MS_SSIM_WEIGHTS) - 1)} pixels per side")
    x, y = x.double(), y.double()
    weights = torch.tensor(MS_SSIM_WEIGHTS, dtype=torch.float64, device=x.device)
    factors = []
    for level in range(len(MS_SSIM_WEIGHTS)):
        ssim, cs = _ssim_components(x, y, data_range)
        if level == len(MS_SSIM_WEIGHTS) - 1:
            factors.append(torch.relu(ssim))
        else:
            factors.append(torch.relu(cs))
            padding = [s % 2 for s in x.shape[-2:]]
            x = F.avg_pool2d(x, kernel_size=2, padding=padding)
            y = F.avg_pool2d(y, kernel_size=2, padding=padding)
    stacked = torch.stack(factors, dim=0)
    return float(torch.prod(stacked ** weights[:, None], dim=0).mean())


# Rate-distortion curves


@dataclass
class RDPoint:
    bpp: float
    quality: float
    metric: str = "psnr"
    higher_is_better: bool = True


@dataclass
class RDCurve:
    """
    Ordered rate-distortion points of one codec for one metric

    Points are sorted by bpp on construction and validated.
    """
    codec: str
    points: List[RDPoint] = field(default_factory=list)

    def __post_init__(self):
        self.points = sorted(self.points, key=lambda p: p.bpp)
        self.validate()

    @property
    def metric(self):
        return self.points[0].metric if self.points else None

    @property
    def bpp(self):
        return np.array([p.bpp for p in self.points], dtype=np.float64)

    @property
    def quality(self):
        return np.array([p.quality for p in self.points], dtype=np.float64)

    def validate(self, min_points=4):
        if len(self.points) < min_points:
            raise RDCurveError(f"curve '{self.codec}' has {len(self.points)} points, at least {min_points} are needed")
        if len({p.metric for p in self.points}) != 1:
            raise RDCurveError(f"curve '{self.codec}' mixes metrics")
        bpp = self.bpp
        if np.any(bpp <= 0):
            raise RDCurveError(f"curve '{self.codec}' has non-positive bpp")
        if np.any(np.diff(bpp) <= 0):
            raise RDCurveError(f"curve '{self.codec}' has repeated bpp values")
        steps = np.diff(self.quality)
        if not (np.all(steps > 0) or np.all(steps < 0)):
            raise RDCurveError(f"curve '{self.codec}' is not monotone in {self.metric}")
        return self


def curve_from_records(records, codec, metric):
    """Build an RDCurve from a DataFrame with RD_COLUMNS."""
    rows = records[(records["codec"] == codec) & (records["metric"] == metric)]
    if rows.empty:
        raise RDCurveError(f"no records for codec '{codec}' and metric '{metric}'")
    direction = metric_direction(metric)
    points = [RDPoint(float(r.bpp), float(r.quality), metric, direction) for r in rows.itertuples()]
    return RDCurve(codec, points)


def write_rd_records(records, path):
    """
    Append RD records (codec, metric, bpp, quality) to a CSV file,
    replacing earlier rows of the same codec
    """
    records = pd.DataFrame(records, columns=RD_COLUMNS)
    if os.path.exists(path):
        previous = pd.read_csv(path)
        previous = previous[~previous["codec"].isin(records["codec"].unique())]
        records = pd.concat([previous, records], ignore_index=True)
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    records.to_csv(path, index=False)
    return records


def read_rd_records(path):
    if not os.path.exists(path):
        raise FileNotFoundError(f"RD record file '{path}' not found")
    records = pd.read_csv(path)
    missing = [col for col in RD_COLUMNS if col not in records.columns]
    if missing:
        raise RDCurveError(f"{path} lacks columns: {', '.join(missing)}")
    return records


def _log_rate_integral(quality, log_rate, low, high, method):
    order = np.argsort(quality)
    q, r = quality[order], log_rate[order]
    if method == "cubic":
        poly = np.polyint(np.polyfit(q, r, 3))
        return np.polyval(poly, high) - np.polyval(poly, low)
    if method == "pchip":
        return float(PchipInterpolator(q, r).integrate(low, high))
    raise ValueError(f"unknown BD-rate method '{method}'")


def bd_rate(reference, test, method="cubic"):
    """
    Bjontegaard delta rate of test against reference

    log10(bpp) is fitted as a function of quality on each curve, the gap is
    integrated over the overlapping quality interval and converted back to a
    rate ratio.

    Args:
        reference (RDCurve): Anchor
        test (RDCurve): Candidate
        method (str): "cubic" (polynomial fit) or "pchip"

    Returns:
        float: Percent rate change at equal quality; negative means test saves bits

    Raises:
        RDCurveError: Invalid curves, different metrics or no quality overlap
    """
    reference.validate()
    test.validate()
    if reference.metric != test.metric:
        raise RDCurveError(f"cannot compare {reference.metric} with {test.metric}")
    low = max(reference.quality.min(), test.quality.min())
    high = min(reference.quality.max(), test.quality.max())
    if low >= high:
        raise RDCurveError(f"quality ranges of '{reference.codec}' and '{test.codec}' do not overlap")
    ref_area = _log_rate_integral(reference.quality, np.log10(reference.bpp), low, high, method)
    test_area = _log_rate_integral(test.quality, np.log10(test.bpp), low, high, method)
    mean_gap = (test_area - ref_area) / (high - low)
    return float((10.0 ** mean_gap - 1.0) * 100.0)


# Per-image evaluation


@torch.no_grad()
def evaluate_image(model, x, label=None, sampler="two-step", steps=None, seed=0):
    """
    Compress and decode one image

    Returns:
        dict: bpp, estimated bpp, hyper/y bits and quality metrics
    """
    rep = model.compress_image(x, label=label)
    _, x_hat = decode(model, model.codec.decompress(rep.bitstream), sampler=sampler, steps=steps, seed=seed)
    return {
        "bpp": rep.bpp,
        "estimated_bpp": rep.estimated_bits / (rep.image_size[0] * rep.image_size[1]),
        "hyper_bits": rep.hyper_bits,
        "y_bits": rep.y_bits,
        "psnr": psnr(x_hat, x),
        "ms_ssim": ms_ssim(x_hat, x),
        "perceptual_proxy": float(perceptual_loss(x_hat, x)),
    }


def evaluate_dataset(model, dataset, sampler="two-step", steps=None, seed=0, limit=None):
    """
    Per-image metrics over a dataset

    Returns:
        pd.DataFrame: One row per image
    """
    model.eval()
    n = len(dataset) if limit is None else min(limit, len(dataset))
    rows = []
    for index in tqdm(range(n), desc="Evaluating", disable=n == 0):
        image, label = dataset[index]
        row = evaluate_image(model, image[None], label=label, sampler=sampler, steps=steps, seed=seed)
        row["index"] = index
        rows.append(row)
    return pd.DataFrame(rows)


def rd_records_from_results(codec, results):
    """
    One RD record per metric from a mapping preset -> per-image DataFrame

    Returns:
        list[dict]: Records with RD_COLUMNS
    """
    records = []
    for preset, frame in sorted(results.items()):
        for metric in ("psnr", "ms_ssim", "perceptual_proxy"):
            records.append({
                "codec": codec,
                "metric": metric,
                "bpp": float(frame["bpp"].mean()),
                "quality": float(frame[metric].mean()),
            })
    return records


def bd_rate_table(records, anchor, method="cubic"):
    """
    BD-rate of every codec in records against the anchor, per metric

    Returns:
        pd.DataFrame: Columns codec, metric, anchor, bd_rate
    """
    rows = []
    for metric in sorted(records["metric"].unique()):
        reference = curve_from_records(records, anchor, metric)
        for codec in sorted(records["codec"].unique()):
            try:
                value = bd_rate(reference, curve_from_records(records, codec, metric), method)
            except RDCurveError as e:
                logger.warning("BD-rate of %s on %s skipped: %s", codec, metric, e)
                value = float("nan")
            rows.append({"codec": codec, "metric": metric, "anchor": anchor, "bd_rate": value})
    return pd.DataFrame(rows)


# Analysis


@torch.no_grad()
def bit_allocation(model, x):
    """
    Estimated bits per y position for one image

    Returns:
        tuple: (map [H_y, W_y] as numpy, total estimated y bits)
    """
    rep = model.compress_image(x)
    y_hat, mu, sigma = rep.y_hat, rep.extra["mu"], rep.extra["sigma"]
    bits = bit_allocation_map(y_hat, mu, sigma)
    return bits.cpu().numpy(), float(estimate_rate(y_hat, mu, sigma))


def band_energy_fraction(x, mask):
    """
    High-band share of spectral energy per sample

    Returns:
        tuple: (high fraction [B], low fraction [B])
    """
    high, low = freq_split(x, mask)
    e_high = (high.abs() ** 2).flatten(1).sum(1)
    e_low = (low.abs() ** 2).flatten(1).sum(1)
    total = (e_high + e_low).clamp_min(torch.finfo(e_high.dtype).tiny)
    return e_high / total, e_low / total


@torch.no_grad()
def frequency_energy_profile(model, images, timesteps, seed=0):
    """
    High/low band energy of the denoiser's z0 estimate across timesteps

    Args:
        model (DiffCRModel): Trained model
        images (torch.Tensor): Batch [B, 3, H, W], sides divisible by the pad multiple
        timesteps (list[int]): Timesteps to analyse
        seed (int): Noise seed

    Returns:
        pd.DataFrame: Columns t, high, low (fractions averaged over the batch)
    """
    model.eval()
    s = model.schedule
    z0 = model.autoencoder.encode(images)
    bundle = model.make_bundle(model.codec(z0)["c_hat"])
    mask = make_filter_mask(*z0.shape[-2:], model.cfg.fase.cutoff_rho, device=z0.device, dtype=z0.dtype)
    generator = make_generator(seed, z0.device)
    rows = []
    for t in timesteps:
        noise = torch.randn(z0.shape, generator=generator, dtype=z0.dtype, device=z0.device)
        z_t = add_noise(z0, t, noise, s)
        z0_hat = predict_z0_from_eps(z_t, model.eps(z_t, bundle, t), t, s)
        high, low = band_energy_fraction(z0_hat, mask)
        rows.append({"t": int(t), "high": float(high.mean()), "low": float(low.mean())})
    return pd.DataFrame(rows, columns=["t", "high", "low"])


def _time(fn, repetitions, warmup):
    durations = []
    for i in range(warmup + repetitions):
        start = time.perf_counter()
        fn()
        if i >= warmup:
            durations.append(time.perf_counter() - start)
    return statistics.median(durations)


@torch.no_grad()
def timing_report(model, images, repetitions=5, warmup=2, ddim_steps=50, seed=0):
    """
    Median wall-clock per image of encoding and both decoders

    median_seconds times the decoders on an already decoded bitstream and
    stops at the latent; end_to_end_seconds adds range decoding, control
    synthesis and the image decoder. The first `warmup` runs of every path
    are discarded.

    Args:
        model (DiffCRModel): Trained model
        images (list[torch.Tensor]): Images [1, 3, H, W]
        repetitions (int): Timed runs per image and path
        warmup (int): Discarded runs
        ddim_steps (int): Steps of the baseline decoder
        seed (int): Sampler seed

    Returns:
        pd.DataFrame: Columns path, median_seconds, end_to_end_seconds, denoiser_calls
    """
    model.eval()
    ddim_name = f"decode_ddim_{ddim_steps}"
    timings = {"encode": [], "decode_two_step": [], ddim_name: []}
    end_to_end = {name: [] for name in timings}
    calls = {"encode": 0}
    init = model.cfg.sampler.init_from_control
    for x in images:
        rep = model.compress_image(x)
        encode_seconds = _time(lambda: model.compress_image(x), repetitions, warmup)
        timings["encode"].append(encode_seconds)
        end_to_end["encode"].append(encode_seconds)
        bundle = control_bundle(model, model.codec.decompress(rep.bitstream))
        latent_paths = {
            "decode_two_step": lambda: two_step_latent(model, bundle, make_generator(seed, bundle.c_hat.device), init_from_control=init),
            ddim_name: lambda: ddim_latent(model, bundle, ddim_steps, make_generator(seed, bundle.c_hat.device)),
        }
        full_paths = {
            "decode_two_step": lambda: two_step_decode(model, model.codec.decompress(rep.bitstream), seed=seed),
            ddim_name: lambda: ddim_decode(model, model.codec.decompress(rep.bitstream), ddim_steps, seed=seed),
        }
        for name, fn in latent_paths.items():
            with DenoiserCallCounter(model) as counter:
                fn()
            calls[name] = counter.calls
            timings[name].append(_time(fn, repetitions, warmup))
            end_to_end[name].append(_time(full_paths[name], repetitions, warmup))
    rows = [
        {
            "path": name,
            "median_seconds": statistics.median(values) if values else float("nan"),
            "end_to_end_seconds": statistics.median(end_to_end[name]) if values else float("nan"),
            "denoiser_calls": calls.get(name, 0),
        }
        for name, values in timings.items()
    ]
    return pd.DataFrame(rows, columns=["path", "median_seconds", "end_to_end_seconds", "denoiser_calls"])
