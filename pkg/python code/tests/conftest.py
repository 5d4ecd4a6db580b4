# -*- coding: utf-8 -*-

# conftest.py

import os
import sys

import pytest
import torch

sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), "..")))

from config import PipelineConfig, validate_config  # noqa: E402


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run the long training tests")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long training runs, skipped unless --runslow")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


def make_tiny_config():
    """Config small enough to build and run every network in well under a second."""
    cfg = PipelineConfig()
    cfg.schedule.T = 50
    cfg.codec.y_channels = 8
    cfg.codec.hidden_channels = 8
    cfg.codec.hyper_channels = 8
    cfg.codec.rrdb_blocks = 1
    cfg.codec.codebook_size = 8
    cfg.codec.codebook_dim = 4
    cfg.codec.scale_levels = 32
    cfg.codec.scale_max = 16.0
    cfg.autoencoder.hidden_channels = 8
    cfg.denoiser.base_channels = 8
    cfg.denoiser.num_tokens = 2
    cfg.denoiser.token_dim = 16
    cfg.denoiser.time_embed_dim = 32
    cfg.denoiser.num_heads = 2
    cfg.fase.patch_size = 4
    cfg.fase.d_model = 16
    cfg.fase.hidden_channels = 8
    cfg.train.image_size = 32
    cfg.train.batch_size = 2
    cfg.train.ae_steps = 2
    cfg.train.stage1_steps = 3
    cfg.train.stage2_steps = 2
    cfg.train.log_every = 1
    cfg.train.checkpoint_every = 100
    return validate_config(cfg)


@pytest.fixture
def tiny_config():
    return make_tiny_config()


@pytest.fixture
def generator():
    return torch.Generator().manual_seed(1234)


@pytest.fixture
def tiny_model(tiny_config):
    from model import build_model

    torch.manual_seed(0)
    model = build_model(tiny_config)
    model.ae_trained = True
    model.freeze_autoencoder()
    model.eval()
    return model


@pytest.fixture
def image_batch(generator):
    return torch.rand(2, 3, 32, 32, generator=generator)


def finite_difference(fn, param, index, eps=1e-6):
    """Central difference of a scalar fn() with respect to one entry of param."""
    with torch.no_grad():
        original = param.view(-1)[index].item()
        param.view(-1)[index] = original + eps
        plus = float(fn())
        param.view(-1)[index] = original - eps
        minus = float(fn())
        param.view(-1)[index] = original
    return (plus - minus) / (2 * eps)


@pytest.fixture
def fd():
    return finite_difference


SMOKE_STAGE1_STEPS = 500
SMOKE_STAGE2_STEPS = 200
SMOKE_IMAGES = 40


def image_tensor(pixels):
    """uint8 [H, W, 3] -> float [1, 3, H, W] in [0, 1]."""
    return torch.from_numpy(pixels).permute(2, 0, 1).float().div(255.0)[None]


class SmokeRuns:
    """
    Tiny pipelines trained on a shared 64x64 synthetic corpus

    The autoencoder is pre-trained once and shared, so variants differ only in
    their preset and ablation switches. Runs are trained on first request.
    """

    def __init__(self, root):
        from corpus import CorpusDataset, holdout_split, make_corpus, make_loader
        from model import build_model
        from training import pretrain_autoencoder

        self.root = root
        corpus_dir = os.path.join(root, "corpus")
        make_corpus(corpus_dir, SMOKE_IMAGES, seed=0, size=64)
        self.train_set, self.holdout = holdout_split(CorpusDataset(corpus_dir, image_size=64), 0.2)
        self.loader = make_loader(self.train_set, batch_size=2, seed=0)
        cfg = self.config("q2")
        torch.manual_seed(0)
        base = build_model(cfg)
        pretrain_autoencoder(base, self.loader, cfg)
        self.autoencoder_state = {k: v.clone() for k, v in base.autoencoder.state_dict().items()}
        self._runs = {}

    @staticmethod
    def config(preset, **ablations):
        from config import apply_preset

        cfg = make_tiny_config()
        cfg.train.image_size = 64
        cfg.train.ae_steps = 300
        apply_preset(cfg, preset)
        for name, value in ablations.items():
            setattr(cfg.ablation, name, value)
        return validate_config(cfg)

    def checkpoints(self, preset="q2", **ablations):
        """
        Stage-1 and stage-2 checkpoint paths of one variant

        Returns:
            dict: {"stage1": path, "stage2": path}
        """
        from model import build_model
        from training import train_stage

        key = (preset, tuple(sorted(ablations.items())))
        if key not in self._runs:
            cfg = self.config(preset, **ablations)
            out = os.path.join(self.root, "_".join([preset] + cfg.ablation.active()))
            torch.manual_seed(0)
            model = build_model(cfg)
            model.autoencoder.load_state_dict(self.autoencoder_state)
            model.ae_trained = True
            model.freeze_autoencoder()
            stage1 = train_stage(model, self.loader, cfg, 1, out, steps=SMOKE_STAGE1_STEPS)
            stage2 = train_stage(model, self.loader, cfg, 2, out, steps=SMOKE_STAGE2_STEPS)
            self._runs[key] = {"stage1": stage1, "stage2": stage2}
        return self._runs[key]

    def model(self, stage=2, preset="q2", **ablations):
        from model import load_checkpoint

        model, _ = load_checkpoint(self.checkpoints(preset, **ablations)[f"stage{stage}"])
        model.eval()
        return model

    def holdout_images(self):
        return [(image[None], label) for image, label in self.holdout]


@pytest.fixture(scope="session")
def smoke_runs(tmp_path_factory):
    return SmokeRuns(str(tmp_path_factory.mktemp("smoke")))
