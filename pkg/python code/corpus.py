# -*- coding: utf-8 -*-

# corpus.py

"""
Synthetic desk corpus and the datasets fed to training and evaluation.

Every image is drawn from its own numpy generator seeded by (seed, index),
so the corpus is reproducible byte for byte whatever the worker count.
"""

import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor, as_completed

import numpy as np
import pandas as pd
import torch
from PIL import Image
from torch.utils.data import DataLoader, Dataset, Subset
from tqdm import tqdm

from mapping import list_textures, texture_label
from utils import create_directories, load_image

logger = logging.getLogger(__name__)

MANIFEST = "manifest.csv"
MANIFEST_COLUMNS = ["filename", "texture", "label", "index", "seed", "params"]
IMAGE_SIZE = 64


def _colour(rng):
    return rng.uniform(0.05, 0.95, size=3)


def render_flat(rng, size):
    """A background colour with a few axis-aligned flat blocks."""
    image = np.ones((size, size, 3)) * _colour(rng)
    blocks = int(rng.integers(1, 4))
    rects = []
    for _ in range(blocks):
        y0, x0 = rng.integers(0, size // 2, size=2)
        h, w = rng.integers(size // 4, size // 2 + 1, size=2)
        image[y0:y0 + h, x0:x0 + w] = _colour(rng)
        rects.append([int(y0), int(x0), int(h), int(w)])
    return image, {"blocks": rects}


def render_gradient(rng, size):
    """Linear or radial ramp between two colours."""
    start, end = _colour(rng), _colour(rng)
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1)
    if rng.random() < 0.5:
        angle = float(rng.uniform(0, 2 * np.pi))
        ramp = xx * np.cos(angle) + yy * np.sin(angle)
        kind = "linear"
    else:
        cy, cx = rng.uniform(0, 1, size=2)
        ramp = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
        angle = None
        kind = "radial"
    ramp = (ramp - ramp.min()) / max(np.ptp(ramp), 1e-8)
    image = start + ramp[..., None] * (end - start)
    return image, {"kind": kind, "angle": angle}


def band_limited_noise(rng, size, low, high):
    """White noise keeping only radial frequencies in [low, high] (Nyquist = 1)."""
    noise = rng.standard_normal((size, size))
    f = np.fft.fftfreq(size) * 2.0
    rho = np.sqrt(f[:, None] ** 2 + f[None, :] ** 2)
    spectrum = np.fft.fft2(noise) * ((rho >= low) & (rho <= high))
    field = np.real(np.fft.ifft2(spectrum))
    field = (field - field.mean()) / max(field.std(), 1e-8)
    return np.clip(0.5 + 0.18 * field, 0.0, 1.0)


def render_texture(rng, size):
    low = float(rng.uniform(0.1, 0.4))
    high = float(low + rng.uniform(0.1, 0.5))
    field = band_limited_noise(rng, size, low, high)
    tint = _colour(rng)
    image = 0.3 * tint + 0.7 * field[..., None] * np.ones(3)
    return image, {"band": [low, high]}


def render_edges(rng, size):
    """Sharp rectangles and discs over a flat background."""
    image = np.ones((size, size, 3)) * _colour(rng)
    yy, xx = np.mgrid[0:size, 0:size]
    shapes = []
    for _ in range(int(rng.integers(2, 6))):
        if rng.random() < 0.5:
            cy, cx = rng.integers(0, size, size=2)
            r = int(rng.integers(size // 10, size // 3))
            image[(yy - cy) ** 2 + (xx - cx) ** 2 <= r * r] = _colour(rng)
            shapes.append(["disc", int(cy), int(cx), r])
        else:
            y0, x0 = rng.integers(0, size - 4, size=2)
            y1, x1 = y0 + rng.integers(4, size // 2), x0 + rng.integers(4, size // 2)
            image[y0:y1, x0:x1] = _colour(rng)
            shapes.append(["rect", int(y0), int(x0), int(y1), int(x1)])
    return image, {"shapes": shapes}


def render_composite(rng, size):
    """Flat left half, band-limited texture right half."""
    image = np.ones((size, size, 3)) * _colour(rng)
    texture, params = render_texture(rng, size)
    image[:, size // 2:] = texture[:, size // 2:]
    return image, params


RENDERERS = {
    "flat": render_flat,
    "gradient": render_gradient,
    "texture": render_texture,
    "edges": render_edges,
    "composite": render_composite,
}


def render_image(seed, index, size=IMAGE_SIZE, texture=None):
    """
    Draw one corpus image

    Args:
        seed (int): Corpus seed
        index (int): Image index
        size (int): Side length in pixels
        texture (str, optional): Texture class; cycles through the classes when None

    Returns:
        tuple: (uint8 array [size, size, 3], texture name, params dict)
    """
    names = list(list_textures())
    texture = texture or names[index % len(names)]
    rng = np.random.default_rng([int(seed), int(index)])
    image, params = RENDERERS[texture](rng, size)
    pixels = np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    return pixels, texture, params


def _write_image(out_dir, seed, index, size):
    pixels, texture, params = render_image(seed, index, size)
    filename = f"img_{index:05d}_{texture}.png"
    Image.fromarray(pixels).save(os.path.join(out_dir, filename), format="PNG")
    return {
        "filename": filename,
        "texture": texture,
        "label": texture_label(texture),
        "index": index,
        "seed": seed,
        "params": json.dumps(params, sort_keys=True),
    }


def make_corpus(out_dir, n_images, seed=0, size=IMAGE_SIZE, workers=4):
    """
    Write the synthetic corpus and its manifest

    Args:
        out_dir (str): Output directory
        n_images (int): Number of images, may be 0
        seed (int): Corpus seed
        size (int): Image side length
        workers (int): Threads used to render and save

    Returns:
        pd.DataFrame: The manifest, also written to out_dir/manifest.csv
    """
    if n_images < 0:
        raise ValueError("n_images must be >= 0")
    create_directories(out_dir)
    rows = []
    with ThreadPoolExecutor(max_workers=max(1, workers)) as executor:
        future_to_index = {executor.submit(_write_image, out_dir, seed, i, size): i for i in range(n_images)}
        for future in tqdm(as_completed(future_to_index), total=n_images, desc="Rendering corpus", disable=n_images == 0):
            rows.append(future.result())

    manifest = pd.DataFrame(rows, columns=MANIFEST_COLUMNS)
    if len(manifest):
        manifest = manifest.sort_values("index").reset_index(drop=True)
    manifest.to_csv(os.path.join(out_dir, MANIFEST), index=False)
    logger.info("wrote %d images to %s", n_images, out_dir)
    return manifest


def read_manifest(corpus_dir):
    path = os.path.join(corpus_dir, MANIFEST)
    if not os.path.exists(path):
        raise FileNotFoundError(f"no {MANIFEST} in '{corpus_dir}'")
    manifest = pd.read_csv(path)
    missing = [col for col in MANIFEST_COLUMNS if col not in manifest.columns]
    if missing:
        raise ValueError(f"manifest is missing columns: {', '.join(missing)}")
    return manifest


def texture_counts(manifest):
    return manifest["texture"].value_counts().to_dict()


class CorpusDataset(Dataset):
    """
    Images of a corpus directory with their texture labels

    Images larger than image_size are center-cropped.
    """

    def __init__(self, corpus_dir, image_size=IMAGE_SIZE):
        self.corpus_dir = corpus_dir
        self.image_size = image_size
        self.manifest = read_manifest(corpus_dir)

    def __len__(self):
        return len(self.manifest)

    def __getitem__(self, index):
        row = self.manifest.iloc[index]
        image = load_image(os.path.join(self.corpus_dir, row["filename"]))[0]
        height, width = image.shape[-2:]
        if height < self.image_size or width < self.image_size:
            raise ValueError(f"{row['filename']} is smaller than {self.image_size}x{self.image_size}")
        top = (height - self.image_size) // 2
        left = (width - self.image_size) // 2
        image = image[:, top:top + self.image_size, left:left + self.image_size]
        return image, int(row["label"])


def holdout_split(dataset, fraction=0.1):
    """Deterministic split: the last fraction of the corpus is held out."""
    n_holdout = max(1, int(round(len(dataset) * fraction))) if len(dataset) > 1 else 0
    cut = len(dataset) - n_holdout
    return Subset(dataset, range(cut)), Subset(dataset, range(cut, len(dataset)))


def make_loader(dataset, batch_size, seed=0, shuffle=True, num_workers=0):
    generator = torch.Generator()
    generator.manual_seed(int(seed))
    return DataLoader(
        dataset,
        batch_size=batch_size,
        shuffle=shuffle,
        drop_last=shuffle and len(dataset) >= batch_size,
        num_workers=num_workers,
        generator=generator,
    )


def cycle(loader):
    """Endless iteration over a loader, one epoch after another."""
    while True:
        empty = True
        for batch in loader:
            empty = False
            yield batch
        if empty:
            raise ValueError("cannot train on an empty corpus")
