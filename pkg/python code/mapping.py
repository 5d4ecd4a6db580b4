# -*- coding: utf-8 -*-

# mapping.py

# Texture classes of the synthetic corpus

texture_mapping = {
    "flat": "Uniform colour regions",
    "gradient": "Smooth linear and radial colour ramps",
    "texture": "Band-limited noise textures",
    "edges": "Sharp-edged geometric shapes",
    "composite": "Flat left half, textured right half",
}

# Ablation switches

ablation_mapping = {
    "no_cre": "Train without the consistency refinement estimator; decode from the denoiser's z0 estimate",
    "no_fda": "Replace frequency decoupling attention with plain spatial cross-attention",
    "no_sem": "Zero the semantic tokens fed to the denoiser",
    "no_stage2": "Skip the second training stage",
}

# Quality metrics

metric_mapping = {
    "psnr": {"label": "PSNR (dB)", "higher_is_better": True},
    "ms_ssim": {"label": "MS-SSIM", "higher_is_better": True},
    "perceptual_proxy": {"label": "Perceptual proxy (random-feature distance, not LPIPS)", "higher_is_better": False},
}


def list_textures():
    """
    Return the available texture classes of the synthetic corpus.
    """
    return texture_mapping


def list_ablations():
    """
    Return the available ablation switches with their descriptions.
    """
    return ablation_mapping


def list_metrics():
    """
    Return the quality metrics with their display labels.
    """
    return {name: info["label"] for name, info in metric_mapping.items()}


def texture_label(texture):
    """
    Integer label of a texture class, used by the semantic embedder

    Args:
        texture (str): Texture code

    Returns:
        int: Index of the texture in texture_mapping
    """
    names = list(texture_mapping)
    if texture not in names:
        raise ValueError(f"unknown texture class '{texture}'")
    return names.index(texture)


def metric_direction(metric):
    """
    True when a higher value of the metric means better quality
    """
    try:
        return metric_mapping[metric]["higher_is_better"]
    except KeyError:
        raise ValueError(f"unknown metric '{metric}'")
