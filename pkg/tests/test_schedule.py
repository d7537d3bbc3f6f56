import math

import pytest
import torch

import oracles
from protoreplay.errors import ConfigError, ContractViolation
from protoreplay.schedule import (NoiseSchedule, build_schedule, forward_sample, noise_coefficient,
                                  posterior_params)


def test_linear_schedule_matches_loop_oracle():
    s = build_schedule(10, 1e-4, 0.02)
    ab = oracles.cumulative_products(oracles.linear_alphas(10, 1e-4, 0.02))
    assert torch.allclose(s.alpha_bar, torch.tensor(ab, dtype=torch.float64), rtol=0, atol=1e-15)


def test_frozen_schedule_values():
    # computed by the independent loop oracle in tests/oracles.py
    s = build_schedule(10, 1e-4, 0.02)
    assert float(s.alpha_bar[0]) == pytest.approx(0.9999, abs=1e-15)
    assert float(s.alpha_bar[4]) == pytest.approx(0.9775683562735794, abs=1e-14)
    assert float(s.alpha_bar[9]) == pytest.approx(0.9037394161512371, abs=1e-14)
    assert float(s.sigma[1]) ** 2 == pytest.approx(9.586172315133455e-05, rel=1e-12)
    assert float(s.sigma[9]) ** 2 == pytest.approx(0.016167972223587568, rel=1e-12)
    big = build_schedule(1000)
    assert float(big.alpha_bar[-1]) == pytest.approx(4.0358297653756754e-05, rel=1e-9)


def test_alpha_bar_is_decreasing_and_positive():
    s = build_schedule(1000)
    assert bool((s.alpha_bar[1:] < s.alpha_bar[:-1]).all())
    assert float(s.alpha_bar.min()) > 0
    assert float(s.alpha_bar_at(0)) == 1.0


def test_sigma_one_is_zero():
    assert float(build_schedule(50).sigma[0]) == 0.0


def test_posterior_variance_elementwise_oracle():
    s = build_schedule(200, 5e-4, 0.1)
    ref = oracles.posterior_variances(oracles.linear_alphas(200, 5e-4, 0.1))
    assert torch.allclose(s.sigma ** 2, torch.tensor(ref, dtype=torch.float64), rtol=0, atol=1e-12)


def test_from_alphas_with_unit_first_alpha():
    s = NoiseSchedule.from_alphas([1.0, 0.9, 0.8])
    assert float(s.alpha_bar[0]) == 1.0
    assert float(s.sigma[0]) == 0.0
    assert float(noise_coefficient(s, 1)) == 0.0
    x = torch.tensor([0.5], dtype=torch.float64)
    mean, std = posterior_params(s, x, torch.tensor([3.0], dtype=torch.float64), 1)
    assert torch.equal(mean, x) and float(std) == 0.0


@pytest.mark.parametrize("kwargs", [dict(K=1), dict(K=10, beta_start=0.0), dict(K=10, beta_end=1.0),
                                    dict(K=10, beta_start=0.5, beta_end=0.1)])
def test_invalid_schedule(kwargs):
    with pytest.raises(ConfigError):
        build_schedule(**kwargs)


def test_invalid_schedule_reports_every_error():
    with pytest.raises(ConfigError) as info:
        build_schedule(1, 0.0, 2.0)
    assert len(info.value.errors) == 3


def test_forward_sample_closed_form():
    s = build_schedule(20)
    x0 = torch.tensor([[1.0, -2.0]], dtype=torch.float64)
    eps = torch.tensor([[0.3, 0.4]], dtype=torch.float64)
    ab = float(s.alpha_bar[6])
    expected = math.sqrt(ab) * x0 + math.sqrt(1 - ab) * eps
    assert torch.allclose(forward_sample(s, x0, 7, eps), expected, atol=1e-15)


def test_forward_sample_per_sample_steps():
    s = build_schedule(20)
    x0 = torch.ones(3, 1, 2, 2, dtype=torch.float64)
    eps = torch.zeros_like(x0)
    out = forward_sample(s, x0, torch.tensor([1, 5, 20]), eps)
    for b, k in enumerate([1, 5, 20]):
        assert torch.allclose(out[b], torch.full((1, 2, 2), math.sqrt(float(s.alpha_bar[k - 1])),
                                                 dtype=torch.float64))


def test_forward_sample_contracts():
    s = build_schedule(20)
    with pytest.raises(ContractViolation):
        forward_sample(s, torch.zeros(2, 3), 1, torch.zeros(2, 4))
    with pytest.raises(ContractViolation):
        forward_sample(s, torch.zeros(2, 3), 21, torch.zeros(2, 3))
    with pytest.raises(ContractViolation):
        forward_sample(s, torch.zeros(2, 3), 0, torch.zeros(2, 3))


def test_posterior_mean_with_true_noise_recovers_reverse_of_one_step():
    # with alpha_bar_{k-1} = 1 (k = 1) and the true eps, the mean is x0 exactly
    s = build_schedule(10)
    x0 = torch.tensor([0.7, -0.1], dtype=torch.float64)
    eps = torch.tensor([0.2, 1.5], dtype=torch.float64)
    xk = forward_sample(s, x0, 1, eps)
    mean, _ = posterior_params(s, xk, eps, 1)
    assert torch.allclose(mean, x0, atol=1e-13)


def test_posterior_mean_matches_quadrature_frozen():
    s = build_schedule(10, 1e-4, 0.02)
    mu, sd, xk, k = 0.7, 0.5, 0.3, 5
    ab = float(s.alpha_bar[k - 1])
    eps = oracles.optimal_eps_gaussian(xk, ab, mu, sd)
    mean, _ = posterior_params(s, torch.tensor([xk], dtype=torch.float64),
                               torch.tensor([eps], dtype=torch.float64), k)
    # frozen from oracles.bayes_reverse_mean
    assert float(mean) == pytest.approx(0.31455400833028385, abs=1e-9)
