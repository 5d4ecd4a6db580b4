# -*- coding: utf-8 -*-

# test_fase.py

import copy

import pytest
import torch
import torch.nn as nn

from diffusion import make_schedule, schedule_from_betas
from fase import (
    BoundaryCoefficients,
    ConjugateSymmetryError,
    FaseHead,
    FrequencyDecouplingAttention,
    c_out,
    c_skip,
    consistency_loss,
    ema_update,
    fase_forward,
    freq_split,
    hermitian_projection,
    make_filter_mask,
    real_ifft,
    sample_consistency_timesteps,
    temporal_mask,
    temporal_mix,
    z0_loss_weight,
    z0_prediction_loss,
)


@pytest.fixture
def head(tiny_config):
    torch.manual_seed(0)
    return FaseHead(tiny_config.fase, 4, tiny_config.schedule.T)


@pytest.fixture
def tiny_schedule(tiny_config):
    return make_schedule(tiny_config.schedule.T)


def _latents(generator, n=3):
    return [torch.randn(2, 4, 8, 8, generator=generator) for _ in range(n)]


def _randomize_output(head):
    with torch.no_grad():
        for p in head.out.parameters():
            p.normal_(0.0, 0.1)


def test_boundary_coefficients_at_t_min():
    bc = BoundaryCoefficients(sigma_data=0.5, epsilon_min=0.0, T=1000)
    assert float(c_skip(0, bc)) == 1.0
    assert float(c_out(0, bc)) == 0.0
    shifted = BoundaryCoefficients(sigma_data=0.5, epsilon_min=0.002, T=1000)
    assert shifted.t_min == 2
    assert float(c_skip(2, shifted)) == 1.0
    assert float(c_out(2, shifted)) == 0.0
    with pytest.raises(ValueError):
        c_skip(1, shifted)


def test_boundary_coefficients_move_towards_output():
    bc = BoundaryCoefficients(sigma_data=0.5, epsilon_min=0.0, T=1000)
    t = torch.arange(0, 1000, 50)
    skip, out = c_skip(t, bc), c_out(t, bc)
    assert torch.all(skip[1:] < skip[:-1])
    assert torch.all(out[1:] > out[:-1])
    assert torch.all((skip > 0) & (skip <= 1))


def test_fase_forward_is_identity_at_t_min(head, tiny_schedule, generator):
    _randomize_output(head)
    z_t, eps, c_hat = _latents(generator)
    with torch.no_grad():
        out = fase_forward(head, z_t, eps, c_hat, 0, tiny_schedule)
    assert torch.equal(out, z_t)


def test_fresh_head_returns_scaled_input(head, tiny_schedule, generator):
    z_t, eps, c_hat = _latents(generator)
    t = torch.tensor([5, 30])
    with torch.no_grad():
        out = fase_forward(head, z_t, eps, c_hat, t, tiny_schedule)
    expected = c_skip(t, head.boundary).float().view(-1, 1, 1, 1) * z_t
    assert torch.allclose(out, expected, atol=1e-6)


def test_fase_forward_shape_mismatch(head, tiny_schedule, generator):
    z_t, eps, _ = _latents(generator)
    with pytest.raises(ValueError):
        fase_forward(head, z_t, eps, torch.zeros(2, 4, 4, 4), 3, tiny_schedule)


def test_spatial_head_variant(tiny_config, tiny_schedule, generator):
    head = FaseHead(tiny_config.fase, 4, tiny_config.schedule.T, use_fda=False)
    z_t, eps, c_hat = _latents(generator)
    with torch.no_grad():
        assert fase_forward(head, z_t, eps, c_hat, 10, tiny_schedule).shape == z_t.shape


def test_freq_split_is_a_partition(generator):
    x = torch.randn(2, 4, 16, 16, generator=generator, dtype=torch.float64)
    mask = make_filter_mask(16, 16, 0.25, dtype=torch.float64)
    x_high, x_low = freq_split(x, mask)
    assert torch.allclose(x_high + x_low, torch.fft.fft2(x, norm="ortho"))
    residual = real_ifft(x_high) + real_ifft(x_low) - x
    assert float(residual.abs().max()) < 1e-6


def test_nyquist_tone_is_high_band_and_constant_is_low_band():
    rows = torch.arange(16, dtype=torch.float64)[:, None].expand(16, 16)
    tone = (-1.0) ** rows
    mask = make_filter_mask(16, 16, 0.5, dtype=torch.float64)
    _, tone_low = freq_split(tone, mask)
    assert float(tone_low.abs().max()) < 1e-12
    const_high, _ = freq_split(torch.full((16, 16), 3.0, dtype=torch.float64), mask)
    assert float(const_high.abs().max()) < 1e-12


def test_filter_mask_bounds():
    for cutoff in (0.0, 1.0, -0.1):
        with pytest.raises(ValueError):
            make_filter_mask(8, 8, cutoff)
    mask = make_filter_mask(8, 8, 0.25)
    assert 0.0 < mask.high_fraction < 1.0
    assert torch.equal(mask.K + mask.low, torch.ones(8, 8))


def test_freq_split_rejects_wrong_mask():
    with pytest.raises(ValueError):
        freq_split(torch.zeros(1, 1, 8, 8), make_filter_mask(16, 16, 0.25))


def test_real_ifft_rejects_non_hermitian_spectrum(generator):
    x = torch.randn(1, 2, 8, 8, generator=generator, dtype=torch.float64)
    spectrum = torch.fft.fft2(x, norm="ortho")
    noise = torch.complex(torch.randn(1, 2, 8, 8, generator=generator, dtype=torch.float64),
                          torch.randn(1, 2, 8, 8, generator=generator, dtype=torch.float64))
    with pytest.raises(ConjugateSymmetryError):
        real_ifft(spectrum + noise)
    projected = real_ifft(hermitian_projection(spectrum + noise))
    assert projected.dtype == torch.float64
    assert torch.allclose(real_ifft(hermitian_projection(spectrum)), x)


def test_temporal_mix_endpoints(generator):
    a = torch.randn(2, 4, 8, 8, generator=generator)
    c = torch.randn(2, 4, 8, 8, generator=generator)
    assert torch.allclose(temporal_mix(a, c, 50, 50), c)
    assert torch.allclose(temporal_mix(a, c, 0, 50), a)
    assert torch.allclose(temporal_mix(a, c, 0, 50, complement=True), c)
    mixed = temporal_mix(a, c, torch.tensor([0, 50]), 50)
    assert torch.allclose(mixed[0], a[0]) and torch.allclose(mixed[1], c[1])


def test_temporal_mask_range():
    like = torch.zeros(1, 1, 2, 2)
    assert float(temporal_mask(25, 50, like)) == pytest.approx(0.5)
    with pytest.raises(ValueError):
        temporal_mask(51, 50, like)


def test_fda_output_is_real(tiny_config, generator):
    fda = FrequencyDecouplingAttention(tiny_config.fase, 4, tiny_config.schedule.T)
    z0_hat, c_hat, _ = _latents(generator)
    with torch.no_grad():
        out = fda(z0_hat, c_hat, torch.tensor([3, 40]))
    assert out.shape == z0_hat.shape
    assert not out.is_complex()
    assert torch.isfinite(out).all()


def test_z0_loss_weight_from_alpha_bar_pair():
    s = schedule_from_betas([0.1, 1.0 - 0.8 / 0.9])
    assert float(z0_loss_weight(1, s)) == pytest.approx(2.5)
    with pytest.raises(ValueError):
        z0_loss_weight(0, s)


def test_z0_loss_weight_positive_on_grid():
    s = make_schedule(1000)
    assert torch.all(z0_loss_weight(torch.arange(1, 1000), s) > 0)


def test_z0_prediction_loss_weighting(tiny_schedule, generator):
    z0 = torch.randn(2, 4, 8, 8, generator=generator)
    z_tilde = z0 + 0.5
    t = torch.tensor([1, 40])
    w = z0_loss_weight(t, tiny_schedule)
    expected = float(w.mean()) * 0.25
    assert float(z0_prediction_loss(z_tilde, z0, t, tiny_schedule)) == pytest.approx(expected, rel=1e-5)
    capped = float(z0_prediction_loss(z_tilde, z0, t, tiny_schedule, max_weight=1e-3))
    assert capped == pytest.approx(1e-3 * 0.25, rel=1e-5)


def test_sample_consistency_timesteps(generator):
    t_high, t_low = sample_consistency_timesteps(500, 50, 3, generator=generator, t_min=2)
    assert torch.all(t_high - t_low == 3)
    assert int(t_low.min()) >= 2
    assert int(t_high.max()) <= 49
    with pytest.raises(ValueError):
        sample_consistency_timesteps(4, 10, 9)


def test_consistency_loss_gradients_reach_online_head_only(head, tiny_schedule, generator):
    _randomize_output(head)
    target = copy.deepcopy(head)
    eps_net = nn.Conv2d(4, 4, 1)
    z0, noise, c_hat = _latents(generator)
    c_hat.requires_grad_(True)
    loss = consistency_loss(head, target, lambda z, t: eps_net(z), z0, c_hat,
                            torch.tensor([10, 30]), 2, tiny_schedule, noise)
    loss.backward()
    assert float(loss) > 0
    assert head.out.weight.grad is not None
    assert c_hat.grad is not None
    assert all(p.grad is None for p in target.parameters())
    assert all(p.grad is None for p in eps_net.parameters())


def test_consistency_loss_vanishes_for_zero_skip(head, tiny_schedule, generator):
    _randomize_output(head)
    target = copy.deepcopy(head)
    eps_net = nn.Conv2d(4, 4, 1)
    z0, noise, c_hat = _latents(generator)
    loss = consistency_loss(head, target, lambda z, t: eps_net(z), z0, c_hat,
                            torch.tensor([10, 30]), 0, tiny_schedule, noise)
    assert float(loss) == pytest.approx(0.0, abs=1e-10)
    with pytest.raises(ValueError):
        consistency_loss(head, target, lambda z, t: eps_net(z), z0, c_hat, 10, -1, tiny_schedule, noise)


def test_ema_update():
    torch.manual_seed(0)
    online, target = nn.Linear(3, 2), nn.Linear(3, 2)
    before = target.weight.detach().clone()
    ema_update(target, online, 0.9)
    assert torch.allclose(target.weight, 0.9 * before + 0.1 * online.weight.detach())
    ema_update(target, online, 0.0)
    assert torch.equal(target.weight, online.weight)
    with pytest.raises(ValueError):
        ema_update(target, online, 1.5)


def test_fresh_head_over_random_inputs(head, tiny_schedule, generator):
    for _ in range(100):
        t = int(torch.randint(0, tiny_schedule.T, (1,), generator=generator))
        z_t, eps, c_hat = (torch.randn(1, 4, 8, 8, generator=generator) for _ in range(3))
        with torch.no_grad():
            out = fase_forward(head, z_t, eps, c_hat, t, tiny_schedule)
        assert torch.allclose(out, float(c_skip(t, head.boundary)) * z_t, atol=1e-6)


def test_head_gradient_matches_finite_differences(head, tiny_schedule, fd, generator):
    _randomize_output(head)
    head.double()
    z_t, eps, c_hat = (torch.randn(1, 4, 8, 8, generator=generator, dtype=torch.float64) for _ in range(3))
    target = torch.randn(1, 4, 8, 8, generator=generator, dtype=torch.float64)
    loss_fn = lambda: ((fase_forward(head, z_t, eps, c_hat, 30, tiny_schedule) - target) ** 2).sum()
    loss_fn().backward()
    for param in (head.out.weight, head.fuse_in.weight):
        for index in (0, 19, 40):
            numeric = fd(loss_fn, param, index)
            analytic = float(param.grad.view(-1)[index])
            assert abs(numeric - analytic) <= 1e-3 * max(1.0, abs(analytic))
