# -*- coding: utf-8 -*-

# config.py

import configparser
import dataclasses
import math
import os
from dataclasses import dataclass, field
from typing import Optional, Tuple

# Dictionary of predefined quality presets (lambda2 weights the rate term)
QUALITY_PRESETS = {
    "q1": 0.2,
    "q2": 0.1,
    "q3": 0.05,
    "q4": 0.02,
}

# Default preset
DEFAULT_QUALITY = "q2"

# Distortion weight shared by every preset
DEFAULT_LAMBDA1 = 1.0

SEED_ENV_VAR = "DIFFCR_SEED"


class ConfigError(ValueError):
    """Raised when a configuration file cannot be parsed or validated."""

    def __init__(self, message, path=None, lineno=None):
        location = ""
        if path is not None:
            location = f"{path}"
            if lineno is not None:
                location += f":{lineno}"
            location += ": "
        super().__init__(location + message)
        self.path = path
        self.lineno = lineno


def get_lambda_from_preset(preset):
    """
    Convert a quality preset name to its rate weight

    Args:
        preset (str): Preset name (q1..q4)

    Returns:
        float: Corresponding lambda2 value

    Raises:
        ConfigError: If the preset is unknown
    """
    try:
        return QUALITY_PRESETS[preset.lower()]
    except KeyError:
        raise ConfigError(f"unknown quality preset '{preset}' (choose from {', '.join(QUALITY_PRESETS)})")


def get_preset_from_lambda(lambda2):
    """
    Convert a rate weight to its preset name

    Args:
        lambda2 (float): Rate weight

    Returns:
        str: Corresponding preset name, or "custom"
    """
    for preset, value in QUALITY_PRESETS.items():
        if abs(value - lambda2) < 1e-12:
            return preset
    return "custom"


def preset_index(preset):
    """Position of a preset in QUALITY_PRESETS, stored as a byte in the bitstream header."""
    names = list(QUALITY_PRESETS)
    if preset not in names:
        return 255
    return names.index(preset)


def preset_from_index(index):
    names = list(QUALITY_PRESETS)
    if 0 <= index < len(names):
        return names[index]
    return "custom"


def list_quality_presets():
    """
    Return the list of available presets with their descriptions

    Returns:
        dict: Dictionary of presets with descriptions
    """
    descriptions = {
        "q1": "lambda2 = 0.2 (lowest rate)",
        "q2": "lambda2 = 0.1 - Default",
        "q3": "lambda2 = 0.05",
        "q4": "lambda2 = 0.02 (highest rate)",
    }
    return descriptions


@dataclass
class ScheduleConfig:
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 2e-2
    kind: str = "linear"
    alpha_floor: float = 1e-8


@dataclass
class CodecConfig:
    latent_channels: int = 4
    y_channels: int = 16
    downsample_factor: int = 2
    codebook_size: int = 64
    codebook_dim: int = 8
    lambda1: float = DEFAULT_LAMBDA1
    lambda2: float = QUALITY_PRESETS[DEFAULT_QUALITY]
    hidden_channels: int = 32
    hyper_channels: int = 32
    rrdb_blocks: int = 2
    sigma_min: float = 0.01
    scale_levels: int = 128
    scale_max: float = 64.0
    tail_mass_sigmas: float = 8.0


@dataclass
class AutoencoderConfig:
    image_channels: int = 3
    latent_channels: int = 4
    downsample_factor: int = 4
    hidden_channels: int = 32


@dataclass
class DenoiserConfig:
    base_channels: int = 32
    channel_mult: Tuple[int, ...] = (1, 2)
    num_tokens: int = 4
    token_dim: int = 64
    time_embed_dim: int = 128
    num_labels: int = 5
    use_labels: bool = False
    num_heads: int = 4


@dataclass
class FaseConfig:
    sigma_data: float = 0.5
    epsilon_min: float = 0.0
    cutoff_rho: float = 0.25
    patch_size: int = 8
    d_model: int = 64
    hidden_channels: int = 32
    ema_mu: float = 0.95
    low_band_complement: bool = False
    # clamp on the epsilon-derived z0 fed to the head; 0 disables
    z0_clip: float = 5.0


@dataclass
class TrainConfig:
    lambda3: float = 1.0
    k: Optional[int] = None
    batch_size: int = 8
    image_size: int = 64
    ae_steps: int = 300
    stage1_steps: int = 500
    stage2_steps: int = 200
    lr_autoencoder: float = 1e-3
    lr_codec: float = 1e-4
    lr_denoiser: float = 1e-4
    lr_control: float = 1e-4
    lr_semantic: float = 1e-4
    lr_fase: float = 1e-4
    seed: int = 0
    num_workers: int = 0
    log_every: int = 10
    # upper clamp on the z0-prediction weight w(t); 0 disables
    z0_weight_cap: float = 100.0
    checkpoint_every: int = 100


@dataclass
class SamplerConfig:
    steps: int = 50
    t_mid: Optional[int] = None
    seed: int = 0
    init_from_control: bool = False


@dataclass
class AblationConfig:
    no_cre: bool = False
    no_fda: bool = False
    no_sem: bool = False
    no_stage2: bool = False

    def active(self):
        return [f.name for f in dataclasses.fields(self) if getattr(self, f.name)]


@dataclass
class PipelineConfig:
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    codec: CodecConfig = field(default_factory=CodecConfig)
    autoencoder: AutoencoderConfig = field(default_factory=AutoencoderConfig)
    denoiser: DenoiserConfig = field(default_factory=DenoiserConfig)
    fase: FaseConfig = field(default_factory=FaseConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)

    @property
    def skip_k(self):
        """Skip-step for the consistency loss, rescaled when T is reduced for desk runs."""
        if self.train.k is not None:
            return self.train.k
        return max(1, round(20 * self.schedule.T / 1000))

    @property
    def t_mid(self):
        if self.sampler.t_mid is not None:
            return self.sampler.t_mid
        return round(0.4 * self.schedule.T)

    @property
    def total_downsample(self):
        # image -> z0 -> y -> hyper positions
        return self.autoencoder.downsample_factor * self.codec.downsample_factor * 2

    @property
    def pad_multiple(self):
        """Images are padded to this multiple: hyper grid and FaSE patch tokens must both tile."""
        patch = self.autoencoder.downsample_factor * self.fase.patch_size
        return self.total_downsample * patch // math.gcd(self.total_downsample, patch)


SECTION_TYPES = {f.name: f.type for f in dataclasses.fields(PipelineConfig)}


def validate_config(cfg):
    """
    Check cross-field invariants that dataclass typing cannot express

    Raises:
        ConfigError: On the first violated invariant
    """
    c = cfg.codec
    for name in ("latent_channels", "y_channels", "downsample_factor", "codebook_dim", "lambda1"):
        if getattr(c, name) <= 0:
            raise ConfigError(f"[codec] {name} must be positive")
    if c.lambda2 < 0:
        raise ConfigError("[codec] lambda2 must be non-negative")
    if c.codebook_size < 2:
        raise ConfigError("[codec] codebook_size must be >= 2")
    if c.latent_channels != cfg.autoencoder.latent_channels:
        raise ConfigError("[codec] latent_channels must match [autoencoder] latent_channels")
    if c.y_channels % 2:
        raise ConfigError("[codec] y_channels must be even (two channel groups)")
    s = cfg.schedule
    if s.T < 2:
        raise ConfigError("[schedule] T must be >= 2")
    if not 0.0 <= cfg.fase.ema_mu <= 1.0:
        raise ConfigError("[fase] ema_mu must lie in [0, 1]")
    if not 0.0 < cfg.fase.cutoff_rho < 1.0:
        raise ConfigError("[fase] cutoff_rho must lie in (0, 1)")
    if cfg.train.image_size % cfg.pad_multiple:
        raise ConfigError(f"[train] image_size must be divisible by {cfg.pad_multiple}")
    if cfg.skip_k >= s.T - 1:
        raise ConfigError("[train] k must be smaller than T - 1")
    if not 0 <= cfg.t_mid <= s.T - 1:
        raise ConfigError("[sampler] t_mid must lie in [0, T-1]")
    t_min = int(round(cfg.fase.epsilon_min * s.T))
    if cfg.t_mid < t_min:
        raise ConfigError(f"[sampler] t_mid must be >= t_min = {t_min}")
    if not 0.0 <= cfg.fase.epsilon_min < 1.0:
        raise ConfigError("[fase] epsilon_min must lie in [0, 1)")
    if cfg.train.lambda3 < 0:
        raise ConfigError("[train] lambda3 must be non-negative")
    if cfg.sampler.steps < 1:
        raise ConfigError("[sampler] steps must be >= 1")
    return cfg


def _coerce(raw, annotation):
    """Convert an INI string to the annotated dataclass field type."""
    text = raw.strip()
    if annotation is bool:
        lowered = text.lower()
        if lowered in ("1", "true", "yes", "on"):
            return True
        if lowered in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"expected a boolean, got '{raw}'")
    if annotation is int:
        return int(text)
    if annotation is float:
        return float(text)
    if annotation is str:
        return text
    if annotation == Optional[int]:
        return None if text.lower() in ("", "none", "auto") else int(text)
    if annotation == Tuple[int, ...]:
        return tuple(int(part) for part in text.split(",") if part.strip())
    raise ValueError(f"unsupported field type {annotation}")


def _line_of(lines, section, key=None):
    """1-based line number of a section header or of a key inside it."""
    current = None
    for number, line in enumerate(lines, start=1):
        stripped = line.strip()
        if stripped.startswith("[") and stripped.endswith("]"):
            current = stripped[1:-1].strip()
            if key is None and current == section:
                return number
            continue
        if current == section and key is not None:
            name = stripped.split("=", 1)[0].split(":", 1)[0].strip()
            if name == key:
                return number
    return None


def parse_config_text(text, path="<string>"):
    """
    Parse INI text into a validated PipelineConfig

    Args:
        text (str): Config file contents
        path (str): Name used in error messages

    Returns:
        PipelineConfig: Parsed configuration

    Raises:
        ConfigError: With the offending line number
    """
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"), interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(text, source=path)
    except configparser.ParsingError as e:
        lineno = e.errors[0][0] if e.errors else None
        raise ConfigError("malformed line", path, lineno)
    except configparser.Error as e:
        raise ConfigError(str(e).splitlines()[0], path, getattr(e, "lineno", None))

    lines = text.splitlines()
    cfg = PipelineConfig()
    for section in parser.sections():
        if section not in SECTION_TYPES:
            raise ConfigError(f"unknown section [{section}]", path, _line_of(lines, section))
        target = getattr(cfg, section)
        types = {f.name: f.type for f in dataclasses.fields(target)}
        for key, raw in parser.items(section):
            if key not in types:
                raise ConfigError(f"unknown key '{key}' in [{section}]", path, _line_of(lines, section, key))
            try:
                setattr(target, key, _coerce(raw, types[key]))
            except ValueError as e:
                raise ConfigError(f"bad value for {key}: {e}", path, _line_of(lines, section, key))
    return validate_config(cfg)


def apply_env_overrides(cfg, env=None):
    """
    Apply environment overrides (DIFFCR_SEED) to a config

    Args:
        cfg (PipelineConfig): Config to update in place
        env (dict, optional): Environment mapping (defaults to os.environ)

    Returns:
        PipelineConfig: The same config
    """
    env = os.environ if env is None else env
    if env.get(SEED_ENV_VAR):
        try:
            cfg.train.seed = int(env[SEED_ENV_VAR])
        except ValueError:
            raise ConfigError(f"{SEED_ENV_VAR} must be an integer, got '{env[SEED_ENV_VAR]}'")
    return cfg


def load_config(path=None, env=None):
    """
    Load a key=value config file with [section] headers

    Args:
        path (str, optional): Path to the config file; defaults are used when None
        env (dict, optional): Environment mapping (defaults to os.environ)

    Returns:
        PipelineConfig: Validated configuration
    """
    if path is None:
        cfg = PipelineConfig()
    else:
        with open(path, "r", encoding="utf-8") as f:
            cfg = parse_config_text(f.read(), path)

    return validate_config(apply_env_overrides(cfg, env))


def config_to_dict(cfg):
    return dataclasses.asdict(cfg)


def config_from_dict(data):
    """Rebuild a PipelineConfig from its checkpoint echo."""
    cfg = PipelineConfig()
    for section, values in data.items():
        target = getattr(cfg, section)
        for key, value in values.items():
            if isinstance(value, list):
                value = tuple(value)
            setattr(target, key, value)
    return cfg


def apply_preset(cfg, preset):
    cfg.codec.lambda2 = get_lambda_from_preset(preset)
    cfg.codec.lambda1 = DEFAULT_LAMBDA1
    return cfg
