# -*- coding: utf-8 -*-

# test_diffusion.py

import pytest
import torch

from diffusion import (
    CLEAN,
    ScheduleError,
    SingularityError,
    add_noise,
    ddim_step,
    make_schedule,
    predict_z0_from_eps,
    schedule_from_betas,
    timestep_tensor,
    uniform_timesteps,
)


@pytest.fixture
def schedule():
    return make_schedule(1000)


def test_linear_schedule_tables(schedule):
    assert schedule.T == 1000
    assert schedule.beta[0].item() == pytest.approx(1e-4)
    assert schedule.beta[-1].item() == pytest.approx(2e-2)
    assert torch.all(schedule.alpha_bar[1:] < schedule.alpha_bar[:-1])
    assert schedule.alpha_bar[0].item() == pytest.approx(1 - 1e-4)


def test_cosine_schedule_is_monotone():
    s = make_schedule(100, kind="cosine")
    assert torch.all(s.alpha_bar[1:] <= s.alpha_bar[:-1])


@pytest.mark.parametrize("kwargs", [{"T": 1}, {"beta_start": 0.0}, {"beta_start": 0.03, "beta_end": 0.02}, {"kind": "sigmoid"}])
def test_invalid_schedules(kwargs):
    with pytest.raises(ScheduleError):
        make_schedule(**kwargs)


def test_explicit_betas_must_be_valid():
    with pytest.raises(ScheduleError):
        schedule_from_betas([0.1, 0.05])
    with pytest.raises(ScheduleError):
        schedule_from_betas([0.1, 1.0])


def test_add_noise_closed_form(schedule, generator):
    z0 = torch.randn(2, 4, 8, 8, generator=generator, dtype=torch.float64)
    eps = torch.randn(2, 4, 8, 8, generator=generator, dtype=torch.float64)
    ab = schedule.alpha_bar[500]
    expected = ab.sqrt() * z0 + (1 - ab).sqrt() * eps
    assert torch.allclose(add_noise(z0, 500, eps, schedule), expected)


def test_add_noise_batched_timesteps_match_scalar(schedule, generator):
    z0 = torch.randn(3, 4, 8, 8, generator=generator, dtype=torch.float64)
    eps = torch.randn(3, 4, 8, 8, generator=generator, dtype=torch.float64)
    t = torch.tensor([0, 400, 999])
    batched = add_noise(z0, t, eps, schedule)
    for i, ti in enumerate(t.tolist()):
        assert torch.allclose(batched[i], add_noise(z0[i:i + 1], ti, eps[i:i + 1], schedule)[0])


def test_predict_z0_inverts_add_noise(schedule, generator):
    z0 = torch.randn(2, 4, 8, 8, generator=generator, dtype=torch.float64)
    eps = torch.randn(2, 4, 8, 8, generator=generator, dtype=torch.float64)
    z_t = add_noise(z0, 700, eps, schedule)
    assert torch.allclose(predict_z0_from_eps(z_t, eps, 700, schedule), z0, atol=1e-10)


def test_predict_z0_raises_below_floor():
    s = make_schedule(1000, alpha_floor=0.5)
    z = torch.zeros(1, 1, 2, 2)
    with pytest.raises(SingularityError):
        predict_z0_from_eps(z, z, 999, s)


def test_out_of_range_timestep(schedule):
    z = torch.zeros(1, 1, 2, 2)
    with pytest.raises(ScheduleError):
        add_noise(z, 1000, z, schedule)
    with pytest.raises(ScheduleError):
        add_noise(z, -1, z, schedule)


def test_shape_mismatch(schedule):
    with pytest.raises(ValueError):
        add_noise(torch.zeros(1, 1, 2, 2), 3, torch.zeros(1, 1, 2, 3), schedule)


def test_ddim_with_oracle_noise_reproduces_forward_process(schedule, generator):
    z0 = torch.randn(1, 4, 8, 8, generator=generator, dtype=torch.float64)
    eps = torch.randn(1, 4, 8, 8, generator=generator, dtype=torch.float64)
    z_high = add_noise(z0, 800, eps, schedule)
    stepped = ddim_step(z_high, eps, 800, 300, schedule)
    assert torch.allclose(stepped, add_noise(z0, 300, eps, schedule), atol=1e-12)


def test_ddim_identity_and_clean_target(schedule, generator):
    z0 = torch.randn(1, 4, 8, 8, generator=generator, dtype=torch.float64)
    eps = torch.randn(1, 4, 8, 8, generator=generator, dtype=torch.float64)
    z_t = add_noise(z0, 100, eps, schedule)
    assert torch.equal(ddim_step(z_t, eps, 100, 100, schedule), z_t)
    assert torch.allclose(ddim_step(z_t, eps, 100, CLEAN, schedule), z0, atol=1e-10)


def test_ddim_rejects_upward_steps(schedule):
    z = torch.zeros(1, 1, 2, 2)
    with pytest.raises(ScheduleError):
        ddim_step(z, z, 10, 20, schedule)


def test_chained_ddim_recovers_z0(schedule, generator):
    z0 = torch.randn(1, 4, 8, 8, generator=generator, dtype=torch.float64)
    eps = torch.randn(1, 4, 8, 8, generator=generator, dtype=torch.float64)
    steps = uniform_timesteps(schedule.T, 50)
    z = add_noise(z0, steps[0], eps, schedule)
    for i, t in enumerate(steps):
        target = steps[i + 1] if i + 1 < len(steps) else CLEAN
        z = ddim_step(z, eps, t, target, schedule)
    assert torch.allclose(z, z0, atol=1e-4)


def test_batched_ddim_matches_scalar(schedule, generator):
    z0 = torch.randn(2, 4, 8, 8, generator=generator, dtype=torch.float64)
    eps = torch.randn(2, 4, 8, 8, generator=generator, dtype=torch.float64)
    t_high = torch.tensor([600, 50])
    z_high = add_noise(z0, t_high, eps, schedule)
    batched = ddim_step(z_high, eps, t_high, t_high - 20, schedule)
    for i in range(2):
        single = ddim_step(z_high[i:i + 1], eps[i:i + 1], int(t_high[i]), int(t_high[i]) - 20, schedule)
        assert torch.allclose(batched[i:i + 1], single, atol=1e-12)


def test_uniform_timesteps():
    assert uniform_timesteps(1000, 1) == [999]
    steps = uniform_timesteps(1000, 50)
    assert len(steps) == 50
    assert steps[0] == 999 and steps[-1] == 0
    assert all(a > b for a, b in zip(steps, steps[1:]))


def test_timestep_tensor():
    assert timestep_tensor(5, 3).tolist() == [5, 5, 5]
    with pytest.raises(ValueError):
        timestep_tensor(torch.tensor([1, 2]), 3)
