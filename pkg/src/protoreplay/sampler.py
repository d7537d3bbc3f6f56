"""Classifier-free guided reverse diffusion and replay-memory generation."""
from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field

import torch

from .errors import ConfigError, ContractViolation, NumericError
from .rng import torch_stream
from .schedule import NoiseSchedule, posterior_params

log = logging.getLogger(__name__)

SAMPLER_KINDS = ("ancestral", "ddim")


@dataclass(frozen=True)
class GuidanceConfig:
    w: float = 4.0
    inference_steps: int = 100
    sampler_kind: str = "ddim"
    # (low, high) bound for the predicted clean sample; None leaves it unclipped
    clip_x0: tuple | None = None

    def validate(self, K: int):
        errors = []
        if self.w < 0:
            errors.append(f"guidance weight w must be >= 0, got {self.w}")
        if self.sampler_kind not in SAMPLER_KINDS:
            errors.append(f"sampler_kind must be one of {SAMPLER_KINDS}, got {self.sampler_kind!r}")
        if not 1 <= self.inference_steps <= K:
            errors.append(f"inference_steps must lie in 1..{K}, got {self.inference_steps}")
        if self.sampler_kind == "ancestral" and self.inference_steps != K:
            errors.append("ancestral sampling runs all K steps; set inference_steps = K")
        if self.clip_x0 is not None and not (len(self.clip_x0) == 2 and self.clip_x0[0] < self.clip_x0[1]):
            errors.append(f"clip_x0 must be a (low, high) pair with low < high, got {self.clip_x0}")
        if errors:
            raise ConfigError("invalid guidance config", errors)


def guided_noise(denoiser, x_k, k, prototype, label_embedding, w: float):
    """w * eps(c, tau) + (1 - w) * eps(c, 0); the prototype is kept in both branches."""
    if w == 1:
        return denoiser(x_k, k, prototype, label_embedding)
    uncond = denoiser(x_k, k, prototype, torch.zeros_like(label_embedding))
    if w == 0:
        return uncond
    cond = denoiser(x_k, k, prototype, label_embedding)
    return w * cond + (1 - w) * uncond


def clip_noise(schedule: NoiseSchedule, x_k, k: int, eps, bounds):
    """Noise estimate consistent with the predicted clean sample clamped to ``bounds``."""
    if bounds is None:
        return eps
    ab = schedule.alpha_bar_at(k).to(x_k.dtype)
    x0 = ((x_k - (1 - ab).sqrt() * eps) / ab.sqrt()).clamp(*bounds)
    return (x_k - ab.sqrt() * x0) / (1 - ab).sqrt()


def ancestral_step(schedule: NoiseSchedule, denoiser, x_k, k: int, prototype, label_embedding,
                   w: float, z, clip_x0=None):
    """x_{k-1} = posterior mean(x_k, guided eps) + sigma_k z; no noise is added at k = 1."""
    eps = guided_noise(denoiser, x_k, k, prototype, label_embedding, w)
    eps = clip_noise(schedule, x_k, k, eps, clip_x0)
    mean, std = posterior_params(schedule, x_k, eps, k)
    if k == 1:
        return mean
    return mean + std.to(x_k.dtype) * z


def ddim_step(schedule: NoiseSchedule, denoiser, x_k, k: int, k_prev: int, prototype,
              label_embedding, w: float, clip_x0=None):
    """Deterministic (eta = 0) jump from step k to k_prev < k; k_prev = 0 means clean data."""
    if not 0 <= k_prev < k <= schedule.K:
        raise ContractViolation(f"DDIM step needs 0 <= k_prev < k <= K, got k={k}, k_prev={k_prev}")
    eps = guided_noise(denoiser, x_k, k, prototype, label_embedding, w)
    eps = clip_noise(schedule, x_k, k, eps, clip_x0)
    ab = schedule.alpha_bar_at(k).to(x_k.dtype)
    ab_prev = schedule.alpha_bar_at(k_prev).to(x_k.dtype)
    x0_hat = (x_k - (1 - ab).sqrt() * eps) / ab.sqrt()
    return ab_prev.sqrt() * x0_hat + (1 - ab_prev).sqrt() * eps


def ddim_grid(K: int, n_steps: int) -> list[int]:
    """Descending sub-grid of ``n_steps`` indices from K down to 1, evenly strided up to rounding."""
    if not 1 <= n_steps <= K:
        raise ContractViolation(f"need 1 <= n_steps <= K, got {n_steps} for K={K}")
    if n_steps == 1:
        return [K]
    return [int(v) for v in torch.linspace(K, 1, n_steps, dtype=torch.float64).round().tolist()]


@torch.no_grad()
def sample(schedule: NoiseSchedule, denoiser, prototype, label_embedding,
           guidance: GuidanceConfig, rng: torch.Generator, x_K=None):
    """Run a full guided reverse trajectory from x_K ~ N(0, I) for a batch.

    ``prototype`` has the batch's data shape and sets the output shape.
    """
    dtype = prototype.dtype
    x = x_K if x_K is not None else torch.randn(prototype.shape, generator=rng,
                                                dtype=torch.float64).to(dtype)
    if guidance.sampler_kind == "ancestral":
        for k in range(schedule.K, 0, -1):
            z = torch.randn(x.shape, generator=rng, dtype=torch.float64).to(dtype)
            x = ancestral_step(schedule, denoiser, x, k, prototype, label_embedding, guidance.w, z,
                               guidance.clip_x0)
    else:
        grid = ddim_grid(schedule.K, guidance.inference_steps)
        for k, k_prev in zip(grid, grid[1:] + [0]):
            x = ddim_step(schedule, denoiser, x, k, k_prev, prototype, label_embedding, guidance.w,
                          guidance.clip_x0)
    return x


@dataclass
class ReplayMemory:
    """Generated labelled samples standing in for old-task data."""
    x: torch.Tensor
    y: torch.Tensor
    provenance: dict = field(default_factory=dict)

    def __len__(self):
        return int(self.y.shape[0])

    def counts(self) -> dict[int, int]:
        return dict(sorted(Counter(int(c) for c in self.y.tolist()).items()))

    def select(self, class_ids) -> ReplayMemory:
        keep = torch.isin(self.y, torch.as_tensor(sorted(class_ids), dtype=self.y.dtype))
        return ReplayMemory(self.x[keep], self.y[keep], dict(self.provenance))

    @classmethod
    def empty(cls, sample_shape, dtype=torch.float32):
        return cls(torch.zeros((0, *sample_shape), dtype=dtype), torch.zeros(0, dtype=torch.long))


def generate_replay(labels, prototypes, table, denoiser, schedule: NoiseSchedule,
                    guidance: GuidanceConfig, L: int, seed: int, task: int = 0,
                    stream: str = "replay") -> ReplayMemory:
    """Draw exactly ``L`` samples for every class in ``labels``.

    Each class uses its own random stream derived from ``seed``, the task
    and the class id. A class whose batch comes out non-finite is retried
    once with a fresh stream before giving up.
    """
    if L < 1:
        raise ContractViolation(f"need at least one sample per class, got L={L}")
    if not len(labels):
        raise ContractViolation("no classes to generate replay for")
    xs, ys = [], []
    was_training = getattr(denoiser, "training", False)
    if was_training:
        denoiser.eval()
    try:
        for cid in sorted(int(c) for c in labels):
            if cid not in prototypes:
                raise ContractViolation(f"no prototype for class {cid}")
            ids = torch.full((L,), cid, dtype=torch.long)
            proto = prototypes.batch(ids, detach=True)
            emb = table.batch(ids, dtype=proto.dtype)
            x = None
            for attempt in range(2):
                rng = torch_stream(seed, stream, task, cid, attempt)
                try:
                    x = sample(schedule, denoiser, proto, emb, guidance, rng)
                except NumericError:
                    x = None
                if x is not None and torch.isfinite(x).all():
                    break
                log.warning("class %d: non-finite replay samples (attempt %d)", cid, attempt + 1)
                x = None
            if x is None:
                raise NumericError(f"class {cid}: replay generation stayed non-finite after a retry")
            xs.append(x)
            ys.append(ids)
    finally:
        if was_training:
            denoiser.train()
    return ReplayMemory(torch.cat(xs), torch.cat(ys), {"task": task, "seed": seed, "stream": stream})
