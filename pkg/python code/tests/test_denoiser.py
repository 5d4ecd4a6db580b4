# -*- coding: utf-8 -*-

# test_denoiser.py

import pytest
import torch

from denoiser import ControlBundle, ControlEncoder, SemanticEmbedder, UNet, denoiser_forward, semantic_embed
from layers import CrossAttention, timestep_embedding


@pytest.fixture
def nets(tiny_config):
    torch.manual_seed(0)
    cfg = tiny_config.denoiser
    return UNet(cfg, 4), ControlEncoder(cfg, 4), SemanticEmbedder(cfg)


def _bundle(generator, batch=2, tokens=2, dim=16):
    return ControlBundle(
        torch.randn(batch, 4, 8, 8, generator=generator),
        torch.randn(batch, tokens, dim, generator=generator),
    )


def test_output_shape(nets, generator):
    unet, control, _ = nets
    z_t = torch.randn(2, 4, 8, 8, generator=generator)
    eps = denoiser_forward(unet, control, z_t, _bundle(generator), torch.tensor([3, 40]))
    assert eps.shape == z_t.shape


def test_zero_initialized_control_is_inert(nets, generator):
    unet, control, _ = nets
    z_t = torch.randn(2, 4, 8, 8, generator=generator)
    bundle = _bundle(generator)
    t = torch.tensor([10, 20])
    with torch.no_grad():
        with_control = denoiser_forward(unet, control, z_t, bundle, t)
        other = ControlBundle(bundle.c_hat * 7.0 + 1.0, bundle.semantic_tokens)
        moved = denoiser_forward(unet, control, z_t, other, t)
        residuals = control(z_t, t, bundle.c_hat)
        plain = unet(z_t, t, bundle.semantic_tokens, [torch.zeros_like(r) for r in residuals])
    assert torch.equal(with_control, moved)
    assert torch.allclose(with_control, plain)
    assert all(torch.count_nonzero(r) == 0 for r in residuals)


def test_cross_attention_starts_as_identity(generator):
    attn = CrossAttention(8, 16, num_heads=2)
    x = torch.randn(1, 8, 4, 4, generator=generator)
    with torch.no_grad():
        assert torch.equal(attn(x, torch.randn(1, 3, 16, generator=generator)), x)


def test_bundle_validation(nets, generator):
    unet, control, _ = nets
    z_t = torch.randn(2, 4, 8, 8, generator=generator)
    with pytest.raises(ValueError):
        denoiser_forward(unet, control, z_t, _bundle(generator, tokens=3), 5)
    bad = ControlBundle(torch.zeros(2, 4, 4, 4), torch.zeros(2, 2, 16))
    with pytest.raises(ValueError):
        denoiser_forward(unet, control, z_t, bad, 5)


def test_semantic_tokens_shape_and_labels(tiny_config, generator):
    tiny_config.denoiser.use_labels = True
    embedder = SemanticEmbedder(tiny_config.denoiser)
    image = torch.rand(2, 3, 32, 32, generator=generator)
    plain = semantic_embed(embedder, image)
    labelled = semantic_embed(embedder, image, 3)
    assert plain.shape == (2, 2, 16)
    assert not torch.allclose(plain, labelled)
    with pytest.raises(ValueError):
        semantic_embed(embedder, torch.rand(2, 1, 32, 32))


def test_timestep_embedding():
    emb = timestep_embedding(torch.tensor([0, 5]), 9, dtype=torch.float64)
    assert emb.shape == (2, 9)
    assert emb.dtype == torch.float64
    assert torch.allclose(emb[0, :4], torch.ones(4, dtype=torch.float64))


def test_unet_gradient_matches_finite_differences(nets, fd, generator):
    unet, control, _ = nets
    unet.double()
    control.double()
    z_t = torch.randn(1, 4, 8, 8, generator=generator, dtype=torch.float64)
    bundle = ControlBundle(torch.randn(1, 4, 8, 8, generator=generator, dtype=torch.float64),
                           torch.randn(1, 2, 16, generator=generator, dtype=torch.float64))
    target = torch.randn(1, 4, 8, 8, generator=generator, dtype=torch.float64)
    loss_fn = lambda: ((denoiser_forward(unet, control, z_t, bundle, 7) - target) ** 2).sum()
    param = unet.out_conv.weight
    loss_fn().backward()
    for index in (0, 33, 250):
        numeric = fd(loss_fn, param, index)
        analytic = float(param.grad.view(-1)[index])
        assert abs(numeric - analytic) <= 1e-3 * max(1.0, abs(analytic))
