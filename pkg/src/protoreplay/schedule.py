"""Diffusion noise schedule and the closed forms of the forward process.

Steps are 1-indexed throughout (``k = 1..K``); the arrays are stored
0-indexed, so ``alpha[k - 1]`` is alpha_k. ``alpha_bar_0`` is taken as 1.
"""
from dataclasses import dataclass

import torch

from .errors import ConfigError, ContractViolation


@dataclass(frozen=True)
class NoiseSchedule:
    alpha: torch.Tensor
    alpha_bar: torch.Tensor
    sigma: torch.Tensor
    beta_start: float | None = None
    beta_end: float | None = None

    @property
    def K(self) -> int:
        return int(self.alpha.shape[0])

    @classmethod
    def from_alphas(cls, alpha, beta_start=None, beta_end=None):
        """Build from explicit per-step alphas in (0, 1]; alpha_1 = 1 is allowed."""
        alpha = torch.as_tensor(alpha, dtype=torch.float64).clone()
        if alpha.ndim != 1 or alpha.numel() < 1:
            raise ConfigError("alphas must be a non-empty 1-D array")
        if not bool(((alpha > 0) & (alpha <= 1)).all()):
            raise ConfigError("alphas must lie in (0, 1]")
        alpha_bar = torch.cumprod(alpha, dim=0)
        prev = torch.cat([alpha_bar.new_ones(1), alpha_bar[:-1]])
        one_minus = 1.0 - alpha_bar
        var = torch.where(
            one_minus > 0,
            (1.0 - alpha) * (1.0 - prev) / torch.where(one_minus > 0, one_minus, 1.0),
            torch.zeros_like(alpha),
        )
        sigma = var.clamp_min(0.0).sqrt()
        for t in (alpha, alpha_bar, sigma):
            t.requires_grad_(False)
        return cls(alpha, alpha_bar, sigma, beta_start, beta_end)

    def config(self) -> dict:
        return {"K": self.K, "beta_start": self.beta_start, "beta_end": self.beta_end}

    def check_step(self, k):
        kt = torch.as_tensor(k)
        if kt.numel() and (int(kt.min()) < 1 or int(kt.max()) > self.K):
            raise ContractViolation(f"step index out of range 1..{self.K}: {k}")

    def alpha_bar_at(self, k):
        """alpha_bar_k with alpha_bar_0 = 1; ``k`` may be an int or an int tensor."""
        kt = torch.as_tensor(k)
        padded = torch.cat([self.alpha_bar.new_ones(1), self.alpha_bar])
        return padded[kt]


def build_schedule(K: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    """Linear beta ramp from ``beta_start`` to ``beta_end``, alpha_k = 1 - beta_k."""
    errors = []
    if not isinstance(K, int) or K < 2:
        errors.append(f"K must be an integer >= 2, got {K!r}")
    if not (0 < beta_start < 1):
        errors.append(f"beta_start must lie in (0, 1), got {beta_start!r}")
    if not (0 < beta_end < 1):
        errors.append(f"beta_end must lie in (0, 1), got {beta_end!r}")
    elif 0 < beta_start < 1 and beta_start > beta_end:
        errors.append("beta_start must not exceed beta_end")
    if errors:
        raise ConfigError("invalid schedule", errors)
    betas = torch.linspace(beta_start, beta_end, K, dtype=torch.float64)
    return NoiseSchedule.from_alphas(1.0 - betas, float(beta_start), float(beta_end))


def _per_sample(values, k, like):
    """Gather schedule values at step(s) k and shape them to broadcast over ``like``."""
    v = values[torch.as_tensor(k) - 1].to(like.dtype)
    if v.ndim == 1:
        v = v.reshape(-1, *([1] * (like.ndim - 1)))
    return v


def forward_sample(schedule: NoiseSchedule, x0, k, eps):
    """x_k = sqrt(alpha_bar_k) x0 + sqrt(1 - alpha_bar_k) eps."""
    if x0.shape != eps.shape:
        raise ContractViolation(f"x0 shape {tuple(x0.shape)} != eps shape {tuple(eps.shape)}")
    schedule.check_step(k)
    ab = _per_sample(schedule.alpha_bar, k, x0)
    return ab.sqrt() * x0 + (1.0 - ab).sqrt() * eps


def noise_coefficient(schedule: NoiseSchedule, k):
    """(1 - alpha_k) / sqrt(1 - alpha_bar_k), taken as 0 where alpha_k = 1."""
    kt = torch.as_tensor(k) - 1
    a = schedule.alpha[kt]
    one_minus_ab = 1.0 - schedule.alpha_bar[kt]
    safe = torch.where(one_minus_ab > 0, one_minus_ab, torch.ones_like(one_minus_ab))
    return torch.where(one_minus_ab > 0, (1.0 - a) / safe.sqrt(), torch.zeros_like(a))


def posterior_params(schedule: NoiseSchedule, xk, eps_hat, k):
    """Mean and std of the reverse transition given a noise estimate.

    mean = (x_k - eps_hat (1 - alpha_k) / sqrt(1 - alpha_bar_k)) / sqrt(alpha_k),
    std = sigma_k.
    """
    schedule.check_step(k)
    coef = noise_coefficient(schedule, k)
    kt = torch.as_tensor(k) - 1
    inv_sqrt_a = schedule.alpha[kt].rsqrt()
    if coef.ndim == 1:
        shape = (-1, *([1] * (xk.ndim - 1)))
        coef, inv_sqrt_a = coef.reshape(shape), inv_sqrt_a.reshape(shape)
    mean = (xk - eps_hat * coef.to(xk.dtype)) * inv_sqrt_a.to(xk.dtype)
    std = schedule.sigma[kt]
    return mean, std
