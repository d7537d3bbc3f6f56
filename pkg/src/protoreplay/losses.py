"""Training objectives: noise-prediction loss, diversity exploration, classifier CE."""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .conditioning import drop_mask
from .errors import ConfigError, ContractViolation
from .schedule import NoiseSchedule, forward_sample


@dataclass
class NoiseDraw:
    """One realisation of the per-sample randomness: step k, noise eps, drop draw u."""
    k: torch.Tensor
    eps: torch.Tensor
    u: torch.Tensor


def draw_noise(schedule: NoiseSchedule, x0: torch.Tensor, rng: torch.Generator) -> NoiseDraw:
    b = x0.shape[0]
    k = torch.randint(1, schedule.K + 1, (b,), generator=rng)
    eps = torch.randn(x0.shape, generator=rng, dtype=torch.float64).to(x0.dtype)
    u = torch.rand(b, generator=rng, dtype=torch.float64)
    return NoiseDraw(k, eps, u)


def _sq_norm(diff: torch.Tensor) -> torch.Tensor:
    return diff.pow(2).reshape(diff.shape[0], -1).sum(dim=1)


def _conditioning(y, prototypes, table, dtype):
    missing = [int(c) for c in torch.unique(y).tolist() if int(c) not in prototypes or int(c) not in table]
    if missing:
        raise ContractViolation(f"no prototype or embedding for classes {missing}")
    return prototypes.batch(y).to(dtype), table.batch(y, dtype=dtype)


def dm_loss(denoiser, schedule, x0, y, prototypes, table, delta: float,
            rng: torch.Generator | None = None, draw: NoiseDraw | None = None) -> torch.Tensor:
    """Batch mean of ||eps - eps_theta(x_k, k, c(y), tau(y))||^2, tau dropped at rate delta."""
    if draw is None:
        draw = draw_noise(schedule, x0, rng)
    proto, emb = _conditioning(y, prototypes, table, x0.dtype)
    emb = emb * drop_mask(delta, draw.u).to(x0.dtype)[:, None]
    x_k = forward_sample(schedule, x0, draw.k, draw.eps)
    return _sq_norm(draw.eps - denoiser(x_k, draw.k, proto, emb)).mean()


def de_loss(denoiser, schedule, x0, y, neighbors: dict, prototypes, table,
            rng: torch.Generator | None = None, draw: NoiseDraw | None = None) -> torch.Tensor:
    """Batch mean of k ||eps_theta(., c(y), tau(y)) - eps_theta(., c(y~), tau(y~))||^2.

    Both branches see the same x_k. The neighbour's prototype is a constant.
    """
    labels = [int(c) for c in y.tolist()]
    if not labels or any(c not in neighbors for c in labels):
        raise ContractViolation("every sample needs a previous-class neighbour for the DE loss")
    if draw is None:
        draw = draw_noise(schedule, x0, rng)
    y_nb = torch.tensor([neighbors[c] for c in labels], dtype=torch.long)
    proto, emb = _conditioning(y, prototypes, table, x0.dtype)
    proto_nb, emb_nb = _conditioning(y_nb, prototypes, table, x0.dtype)
    x_k = forward_sample(schedule, x0, draw.k, draw.eps)
    diff = denoiser(x_k, draw.k, proto, emb) - denoiser(x_k, draw.k, proto_nb.detach(), emb_nb)
    return (draw.k.to(x0.dtype) * _sq_norm(diff)).mean()


@dataclass
class LossBreakdown:
    l_dm: torch.Tensor | float
    l_de: torch.Tensor | float
    gamma: float
    total: torch.Tensor | float

    def as_floats(self):
        return tuple(float(v.detach()) if torch.is_tensor(v) else float(v)
                     for v in (self.l_dm, self.l_de, self.total))


def total_loss(l_dm, l_de, gamma: float) -> LossBreakdown:
    if gamma < 0:
        raise ConfigError(f"gamma must be non-negative, got {gamma}")
    return LossBreakdown(l_dm, l_de, gamma, l_dm + gamma * l_de)


def classifier_loss(classifier, x, y) -> torch.Tensor:
    """Mean cross-entropy; class ids are 1-based, logits column ``id - 1``."""
    logits = classifier(x)
    target = torch.as_tensor(y, dtype=torch.long) - 1
    if target.numel() and (int(target.min()) < 0 or int(target.max()) >= logits.shape[1]):
        raise ContractViolation(f"labels outside 1..{logits.shape[1]}")
    return F.cross_entropy(logits, target)
