# -*- coding: utf-8 -*-

# test_latent_codec.py

import dataclasses

import pytest
import torch

from config import CodecConfig
from latent_codec import (
    CODEBOOK_BETA,
    HEADER,
    FormatVersionError,
    LatentCodec,
    bit_allocation_map,
    checkerboard,
    codebook_loss,
    estimate_rate,
    gaussian_log_likelihood,
    hyper_quantize,
    pass_masks,
    quantize,
    rd_loss,
    unpack_bitstream,
)
from range_coder import ArithmeticEncoder, BitstreamError

SIGMA = 1.5


def small_codec_config(**overrides):
    cfg = CodecConfig(y_channels=8, hidden_channels=8, hyper_channels=8, rrdb_blocks=1, codebook_size=8, codebook_dim=4)
    return dataclasses.replace(cfg, **overrides)


def constant_sigma_codec(sigma=SIGMA, **overrides):
    """Codec whose entropy model predicts mu = 0 and a fixed sigma everywhere."""
    torch.manual_seed(0)
    codec = LatentCodec(small_codec_config(**overrides))
    group = codec.cfg.y_channels // 2
    with torch.no_grad():
        for head in codec.param_heads:
            head[-1].bias[group:] = sigma
    codec.eval()
    return codec


def random_symbols(shape, sigma, generator):
    return torch.round(torch.randn(shape, generator=generator) * sigma)


def test_quantize_modes():
    y = torch.tensor([0.4, 1.6, -2.5])
    mu = torch.tensor([0.1, 0.0, 0.0])
    assert torch.allclose(quantize(y, mu, "round"), torch.tensor([0.1, 2.0, -2.0]))
    noisy = quantize(y, mu, "noise")
    assert torch.all((noisy - y).abs() <= 0.5)
    with pytest.raises(ValueError):
        quantize(y, mu, "floor")


def test_ste_forward_rounds_and_backward_is_identity():
    y = torch.tensor([0.3, 1.7], requires_grad=True)
    out = quantize(y, torch.zeros(2), "ste")
    assert torch.equal(out.detach(), torch.tensor([0.0, 2.0]))
    out.sum().backward()
    assert torch.equal(y.grad, torch.ones(2))


def test_hyper_quantize_nearest_and_ties():
    codebook = torch.tensor([[0.0, 0.0], [1.0, 0.0], [1.0, 0.0]])
    l_y = torch.tensor([[[0.9, 0.1], [0.5, 0.0]]])
    indices, l_hat = hyper_quantize(l_y, codebook)
    # [0.5, 0] is equidistant from entries 0 and 1: lowest index wins
    assert indices.tolist() == [[1, 0]]
    assert torch.equal(l_hat[0, 0], codebook[1])
    with pytest.raises(ValueError):
        hyper_quantize(torch.zeros(1, 3), codebook)


def test_codebook_loss_gradient_routing():
    l_y = torch.randn(5, 4, dtype=torch.float64, requires_grad=True)
    l_hat = torch.randn(5, 4, dtype=torch.float64, requires_grad=True)
    codebook_loss(l_y, l_hat).backward()
    # the codebook term moves entries only, the commitment term moves the encoder only
    assert torch.allclose(l_hat.grad, 2 * (l_hat - l_y).detach())
    assert torch.allclose(l_y.grad, 2 * CODEBOOK_BETA * (l_y - l_hat).detach())


def test_gaussian_bin_masses_sum_to_one():
    values = torch.arange(-60, 61, dtype=torch.float64)
    mass = gaussian_log_likelihood(values, torch.tensor(0.3, dtype=torch.float64), torch.tensor(2.0, dtype=torch.float64)).exp()
    assert float(mass.sum()) == pytest.approx(1.0, abs=1e-9)


def test_rate_of_far_tail_is_finite():
    bits = estimate_rate(torch.tensor([40.0]), torch.tensor([0.0]), torch.tensor([0.01]))
    assert torch.isfinite(bits) and bits > 1000


def test_bit_allocation_map_partitions_rate(generator):
    y = random_symbols((2, 8, 4, 4), 2.0, generator)
    mu = torch.zeros_like(y)
    sigma = torch.full_like(y, 2.0)
    bits = bit_allocation_map(y, mu, sigma)
    assert bits.shape == (4, 4)
    assert float(bits.sum()) == pytest.approx(float(estimate_rate(y, mu, sigma)), rel=1e-5)


def test_rd_loss_zero_rate_weight():
    cfg = small_codec_config(lambda2=0.0)
    z0 = torch.randn(2, 4, 8, 8)
    rate = torch.tensor(123.0, requires_grad=True)
    l_y = torch.randn(2, 2, 2, 4)
    total, terms = rd_loss(z0, z0.clone(), rate, l_y, l_y.clone(), cfg)
    assert float(terms["rate"]) == 0.0
    assert float(terms["distortion"]) == 0.0
    total.backward()
    assert float(rate.grad) == 0.0


def test_pass_masks_partition_the_latent():
    masks = pass_masks((1, 8, 4, 6))
    stacked = torch.stack([m.expand(1, 8, 4, 6) for m in masks]).int()
    assert torch.all(stacked.sum(0) == 1)
    anchor = checkerboard(4, 6, dtype=torch.bool)
    assert torch.equal(masks[0][0, 0], anchor[0, 0])
    assert not masks[0][0, 4].any()


def test_entropy_params_only_read_earlier_passes(generator):
    torch.manual_seed(1)
    codec = LatentCodec(small_codec_config())
    for head in codec.param_heads:
        torch.nn.init.normal_(head[-1].weight, std=0.5)
    hyper = torch.randn(1, 8, 4, 4, generator=generator)
    context = torch.randn(1, 8, 4, 4, generator=generator)
    masks = pass_masks(context.shape)
    for p, mask in enumerate(masks):
        later = torch.zeros_like(mask)
        for m in masks[p:]:
            later = later | m
        perturbed = torch.where(later, torch.randn(context.shape, generator=generator), context)
        mu_a, sigma_a = codec.entropy_params(hyper, context)
        mu_b, sigma_b = codec.entropy_params(hyper, perturbed)
        assert torch.equal(mu_a[mask], mu_b[mask])
        assert torch.equal(sigma_a[mask], sigma_b[mask])


def test_parallel_params_reproduce_sequential_pass(generator):
    torch.manual_seed(2)
    codec = LatentCodec(small_codec_config())
    for head in codec.param_heads:
        torch.nn.init.normal_(head[-1].weight, std=0.5)
    codec.eval()
    with torch.no_grad():
        out = codec(torch.randn(1, 4, 16, 16, generator=generator))
        hyper = codec.hyper_synthesis(out["l_hat"])
        mu, sigma = codec.entropy_params(hyper, out["y_hat"])
    assert torch.equal(mu, out["mu"])
    assert torch.equal(sigma, out["sigma"])


def test_forward_shapes_and_bits(generator):
    codec = LatentCodec(small_codec_config())
    out = codec(torch.randn(2, 4, 16, 16, generator=generator))
    assert out["y"].shape == (2, 8, 8, 8)
    assert out["c_hat"].shape == (2, 4, 16, 16)
    assert out["indices"].shape == (2, 4, 4)
    assert out["y_bits"] > 0 and out["hyper_bits"] > 0


def test_analysis_rejects_indivisible_latent():
    codec = LatentCodec(small_codec_config())
    with pytest.raises(ValueError):
        codec.analysis(torch.zeros(1, 4, 10, 16))
    with pytest.raises(ValueError):
        codec.analysis(torch.zeros(1, 3, 16, 16))


def test_synthesis_gradient_matches_finite_differences(fd, generator):
    codec = LatentCodec(small_codec_config()).double()
    y_hat = random_symbols((1, 8, 4, 4), 2.0, generator).double()
    target = torch.randn(1, 4, 8, 8, generator=generator, dtype=torch.float64)
    loss_fn = lambda: ((codec.synthesis(y_hat) - target) ** 2).sum()
    param = codec.g_s[0].weight
    loss_fn().backward()
    for index in (0, 17, 101):
        numeric = fd(loss_fn, param, index)
        analytic = float(param.grad.view(-1)[index])
        assert abs(numeric - analytic) <= 1e-3 * max(1.0, abs(analytic))


def test_bitstream_round_trip_is_exact(generator):
    codec = constant_sigma_codec()
    y_hat = random_symbols((1, 8, 8, 8), SIGMA, generator)
    indices = torch.randint(0, 8, (1, 4, 4), generator=generator)
    data = codec.encode_bitstream(y_hat, indices, (64, 48), "q3", label=2)
    decoded, decoded_indices, header = codec.decode_bitstream(data)
    assert torch.equal(decoded, y_hat)
    assert torch.equal(decoded_indices, indices)
    assert (header.image_height, header.image_width) == (64, 48)
    assert header.preset == "q3"
    assert header.label == 2


def test_escape_symbols_round_trip(generator):
    codec = constant_sigma_codec(sigma=0.05)
    y_hat = random_symbols((1, 8, 4, 4), 1.0, generator)
    y_hat[0, 0, 0, 0] = 900.0
    y_hat[0, 5, 1, 1] = -70000.0
    indices = torch.zeros(1, 2, 2, dtype=torch.long)
    decoded, _, _ = codec.decode_bitstream(codec.encode_bitstream(y_hat, indices, (32, 32)))
    assert torch.equal(decoded, y_hat)


def test_fuzzed_latents_round_trip():
    generator = torch.Generator().manual_seed(99)
    codec = constant_sigma_codec()
    for trial in range(500):
        scale = float(torch.empty(1).uniform_(0.2, 6.0, generator=generator))
        y_hat = random_symbols((1, 8, 4, 4), scale, generator)
        indices = torch.randint(0, 8, (1, 2, 2), generator=generator)
        decoded, decoded_indices, _ = codec.decode_bitstream(codec.encode_bitstream(y_hat, indices, (32, 32)))
        assert torch.equal(decoded, y_hat), f"trial {trial}"
        assert torch.equal(decoded_indices, indices)


def test_actual_bits_track_the_estimate(generator):
    codec = constant_sigma_codec()
    y_hat = random_symbols((1, 8, 16, 16), SIGMA, generator)
    indices = torch.randint(0, 8, (1, 8, 8), generator=generator)
    data = codec.encode_bitstream(y_hat, indices, (128, 128))
    _, hyper_bytes, y_bytes = unpack_bitstream(data)
    mu = torch.zeros_like(y_hat)
    estimate = float(estimate_rate(y_hat, mu, torch.full_like(y_hat, SIGMA)) + codec.hyper_bits(indices))
    # each sub-stream carries a 4-byte checksum
    payload = 8 * (len(hyper_bytes) + len(y_bytes) - 8)
    assert estimate * 0.99 <= payload <= estimate * 1.01 + 64


def test_off_grid_latent_rejected():
    codec = constant_sigma_codec()
    y_hat = torch.full((1, 8, 2, 2), 0.5)
    with pytest.raises(ValueError):
        codec.encode_bitstream(y_hat, torch.zeros(1, 1, 1, dtype=torch.long), (16, 16))


def test_batch_coding_rejected():
    codec = constant_sigma_codec()
    with pytest.raises(ValueError):
        codec.encode_bitstream(torch.zeros(2, 8, 2, 2), torch.zeros(2, 1, 1, dtype=torch.long), (16, 16))


def test_corrupt_bitstreams(generator):
    codec = constant_sigma_codec()
    y_hat = random_symbols((1, 8, 4, 4), SIGMA, generator)
    data = codec.encode_bitstream(y_hat, torch.zeros(1, 2, 2, dtype=torch.long), (32, 32))
    with pytest.raises(BitstreamError):
        codec.decode_bitstream(b"XXXX" + data[4:])
    with pytest.raises(BitstreamError):
        codec.decode_bitstream(data[:-3])
    with pytest.raises(BitstreamError):
        codec.decode_bitstream(data + b"\x00")
    future = bytearray(data)
    future[4] = 9
    with pytest.raises(FormatVersionError):
        codec.decode_bitstream(bytes(future))


def test_channel_mismatch_rejected(generator):
    codec = constant_sigma_codec()
    data = codec.encode_bitstream(random_symbols((1, 8, 2, 2), SIGMA, generator), torch.zeros(1, 1, 1, dtype=torch.long), (16, 16))
    other = constant_sigma_codec(y_channels=4)
    with pytest.raises(BitstreamError):
        other.decode_bitstream(data)


def test_header_layout(generator):
    codec = constant_sigma_codec()
    data = codec.encode_bitstream(random_symbols((1, 8, 2, 2), SIGMA, generator), torch.zeros(1, 1, 1, dtype=torch.long), (20, 30), "q1")
    magic, version, preset, img_h, img_w, channels, height, width = HEADER.unpack(data[:HEADER.size])
    assert magic == b"DCR1" and version == 1 and preset == 0
    assert (img_h, img_w, channels, height, width) == (20, 30, 8, 2, 2)


def test_compress_reports_exact_bpp(generator):
    codec = constant_sigma_codec()
    rep = codec.compress(torch.randn(1, 4, 16, 16, generator=generator), (64, 64), "q2")
    assert rep.actual_bits == 8 * len(rep.bitstream)
    assert rep.bpp == rep.actual_bits / (64 * 64)
    back = codec.decompress(rep.bitstream)
    assert torch.equal(back.y_hat, rep.y_hat)
    assert back.image_size == (64, 64)
    assert back.preset == "q2"


def live_context_codec(seed=3):
    """Codec whose mean and scale heads read the checkerboard and channel context."""
    torch.manual_seed(seed)
    codec = LatentCodec(small_codec_config())
    with torch.no_grad():
        for head in codec.param_heads:
            head[-1].weight.normal_(0.0, 0.3)
            head[-1].bias.normal_(0.0, 0.3)
    codec.eval()
    return codec


def test_fuzzed_latents_round_trip_with_context():
    generator = torch.Generator().manual_seed(7)
    codec = live_context_codec()
    for trial in range(500):
        scale = float(torch.empty(1).uniform_(0.2, 6.0, generator=generator))
        with torch.no_grad():
            out = codec.forward_latent(torch.randn(1, 8, 4, 4, generator=generator) * scale)
        assert not torch.all(out["mu"] == 0)
        decoded, decoded_indices, _ = codec.decode_bitstream(codec.encode_bitstream(out["y_hat"], out["indices"], (32, 32)))
        assert torch.equal(decoded, out["y_hat"]), f"trial {trial}"
        assert torch.equal(decoded_indices, out["indices"])


def test_empty_latent_is_header_only():
    codec = constant_sigma_codec()
    y_hat = torch.zeros(1, 8, 0, 0)
    indices = torch.zeros(1, 0, 0, dtype=torch.long)
    data = codec.encode_bitstream(y_hat, indices, (0, 0))
    assert len(data) == HEADER.size + 8
    decoded, decoded_indices, header = codec.decode_bitstream(data)
    assert decoded.shape == (1, 8, 0, 0)
    assert decoded_indices.shape == (1, 0, 0)
    assert (header.height, header.width) == (0, 0)


def test_uniform_hyper_stream_costs_eight_bits_per_symbol(generator):
    codec = constant_sigma_codec(codebook_size=256)
    _, _, hyper_cdf = codec._tables()
    encoder = ArithmeticEncoder()
    for index in torch.randint(0, 256, (4096,), generator=generator).tolist():
        encoder.encode(index, hyper_cdf)
    # the coder appends a 4-byte checksum
    bits = 8 * (len(encoder.finish()) - 4)
    assert 8 * 4096 <= bits <= 8 * 4096 + 128


def test_zero_initialized_entropy_params():
    codec = LatentCodec(small_codec_config())
    mu, sigma = codec.entropy_params(torch.zeros(1, 8, 4, 4), torch.zeros(1, 8, 4, 4))
    assert torch.equal(mu, torch.zeros_like(mu))
    assert torch.allclose(sigma, torch.full_like(sigma, codec.cfg.sigma_min))


def test_analysis_gradient_matches_finite_differences(fd, generator):
    codec = LatentCodec(small_codec_config()).double()
    z0 = torch.randn(1, 4, 16, 16, generator=generator, dtype=torch.float64)
    target = torch.randn(1, 8, 8, 8, generator=generator, dtype=torch.float64)
    loss_fn = lambda: ((codec.analysis(z0) - target) ** 2).sum()
    param = codec.g_a[0].weight
    loss_fn().backward()
    for index in (0, 23, 150):
        numeric = fd(loss_fn, param, index)
        analytic = float(param.grad.view(-1)[index])
        assert abs(numeric - analytic) <= 1e-4 * max(1.0, abs(analytic))


def test_noise_quantization_follows_the_generator():
    y = torch.zeros(4, 8)
    first = quantize(y, y, "noise", torch.Generator().manual_seed(11))
    second = quantize(y, y, "noise", torch.Generator().manual_seed(11))
    assert torch.equal(first, second)
    assert torch.all(first.abs() <= 0.5)
    codec = live_context_codec()
    codec.train()
    z0 = torch.randn(1, 4, 16, 16, generator=torch.Generator().manual_seed(1))
    bits = [float(codec(z0, torch.Generator().manual_seed(5))["y_bits"]) for _ in range(2)]
    assert bits[0] == bits[1]
