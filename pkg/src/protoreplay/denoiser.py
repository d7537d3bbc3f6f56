"""Conditional noise-prediction networks eps_theta(x_k, k, c(y), tau(y)).

The prototype enters by concatenation with x_k along the channel (image)
or feature (vector) axis; the label embedding and the time code are
projected and added to hidden features.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ContractViolation, NumericError


def assemble_conditioning(x_k: torch.Tensor, prototype: torch.Tensor) -> torch.Tensor:
    """Concatenate ``(x_k, prototype)`` along channels / features, x_k first.

    Unbatched vectors (d,) and images (C, H, W) concatenate on axis 0,
    batched ones on axis 1.
    """
    if x_k.shape != prototype.shape:
        raise ContractViolation(
            f"x_k shape {tuple(x_k.shape)} != prototype shape {tuple(prototype.shape)}")
    axis = 0 if x_k.ndim in (1, 3) else 1
    return torch.cat([x_k, prototype], dim=axis)


def timestep_code(k, width: int, dtype=torch.float32) -> torch.Tensor:
    """Sinusoidal code of the (1-based) step index, shape (B, width)."""
    k = torch.as_tensor(k, dtype=torch.float64).reshape(-1)
    half = width // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / max(half, 1))
    args = k[:, None] * freqs[None, :]
    code = torch.cat([torch.sin(args), torch.cos(args)], dim=1)
    if width % 2:
        code = F.pad(code, (0, 1))
    return code.to(dtype)


@dataclass
class DenoiserInput:
    x_k: torch.Tensor
    k: torch.Tensor | int
    prototype: torch.Tensor
    label_embedding: torch.Tensor


class _Denoiser(nn.Module):
    arch: dict

    def _embed(self, k, label_embedding, batch, dtype):
        k = torch.as_tensor(k)
        if k.ndim == 0:
            k = k.expand(batch)
        emb = self.time_mlp(timestep_code(k, self.arch["time_dim"], dtype))
        if self.label_proj is not None:
            emb = emb + self.label_proj(label_embedding.to(dtype))
        return emb

    def forward(self, x_k, k, prototype, label_embedding):
        out = self._forward(assemble_conditioning(x_k, prototype), k, label_embedding)
        if not torch.isfinite(out).all():
            raise NumericError("denoiser produced non-finite output")
        return out


class VectorDenoiser(_Denoiser):
    """Three-layer perceptron for flat vector data."""

    def __init__(self, dim: int, embed_dim: int, hidden: int = 128, time_dim: int = 32,
                 label_conditioning: bool = True):
        super().__init__()
        self.arch = dict(kind="vector", dim=dim, embed_dim=embed_dim, hidden=hidden,
                         time_dim=time_dim, label_conditioning=label_conditioning)
        self.time_mlp = nn.Sequential(nn.Linear(time_dim, hidden), nn.SiLU(), nn.Linear(hidden, hidden))
        self.label_proj = nn.Linear(embed_dim, hidden) if label_conditioning else None
        self.l1 = nn.Linear(2 * dim, hidden)
        self.l2 = nn.Linear(hidden, hidden)
        self.l3 = nn.Linear(hidden, hidden)
        self.out = nn.Linear(hidden, dim)

    def _forward(self, h, k, label_embedding):
        emb = self._embed(k, label_embedding, h.shape[0], h.dtype)
        h = F.silu(self.l1(h) + emb)
        h = F.silu(self.l2(h) + emb)
        h = F.silu(self.l3(h) + emb)
        return self.out(h)


class _CrossAttention(nn.Module):
    """Spatial features attend over the label embedding split into tokens."""

    def __init__(self, channels: int, embed_dim: int, n_tokens: int):
        super().__init__()
        if embed_dim % n_tokens:
            raise ContractViolation("embedding dimension must be divisible by the token count")
        self.n_tokens = n_tokens
        self.kv = nn.Linear(embed_dim // n_tokens, 2 * channels)
        self.q = nn.Conv2d(channels, channels, 1)
        self.proj = nn.Conv2d(channels, channels, 1)

    def forward(self, h, label_embedding):
        b, c, hh, ww = h.shape
        tokens = label_embedding.to(h.dtype).reshape(b, self.n_tokens, -1)
        key, value = self.kv(tokens).chunk(2, dim=-1)
        q = self.q(h).flatten(2).transpose(1, 2)
        attn = torch.softmax(q @ key.transpose(1, 2) / math.sqrt(c), dim=-1)
        out = (attn @ value).transpose(1, 2).reshape(b, c, hh, ww)
        return h + self.proj(out)


class ImageDenoiser(_Denoiser):
    """Small encoder-decoder with two resolution levels and one skip connection."""

    def __init__(self, channels: int, embed_dim: int, width: int = 32, time_dim: int = 32,
                 label_conditioning: bool = True, cross_attention: bool = False, n_tokens: int = 4):
        super().__init__()
        self.arch = dict(kind="image", channels=channels, embed_dim=embed_dim, width=width,
                         time_dim=time_dim, label_conditioning=label_conditioning,
                         cross_attention=cross_attention, n_tokens=n_tokens)
        w = width
        self.time_mlp = nn.Sequential(nn.Linear(time_dim, 2 * w), nn.SiLU(), nn.Linear(2 * w, 2 * w))
        # with cross-attention the label reaches the network only through attention
        use_proj = label_conditioning and not cross_attention
        self.label_proj = nn.Linear(embed_dim, 2 * w) if use_proj else None
        self.attn = _CrossAttention(2 * w, embed_dim, n_tokens) if (cross_attention and label_conditioning) else None
        self.inp = nn.Conv2d(2 * channels, w, 3, padding=1)
        self.enc1 = nn.Conv2d(w, w, 3, padding=1)
        self.down = nn.Conv2d(w, 2 * w, 3, stride=2, padding=1)
        self.enc2 = nn.Conv2d(2 * w, 2 * w, 3, padding=1)
        self.up = nn.ConvTranspose2d(2 * w, w, 4, stride=2, padding=1)
        self.dec1 = nn.Conv2d(2 * w, w, 3, padding=1)
        self.out = nn.Conv2d(w, channels, 3, padding=1)
        self.norm1 = nn.GroupNorm(min(8, w), w)
        self.norm2 = nn.GroupNorm(min(8, 2 * w), 2 * w)

    def _forward(self, h, k, label_embedding):
        w = self.arch["width"]
        emb = self._embed(k, label_embedding, h.shape[0], h.dtype)
        e1, e2 = emb[:, :w, None, None], emb[:, :, None, None]
        h1 = F.silu(self.inp(h))
        h1 = F.silu(self.norm1(self.enc1(h1)) + e1)
        h2 = F.silu(self.down(h1))
        h2 = F.silu(self.norm2(self.enc2(h2)) + e2)
        if self.attn is not None:
            h2 = self.attn(h2, label_embedding)
        u = F.silu(self.up(h2))
        u = F.silu(self.dec1(torch.cat([u, h1], dim=1)))
        return self.out(u)


def build_denoiser(arch: dict) -> _Denoiser:
    arch = dict(arch)
    kind = arch.pop("kind")
    if kind == "vector":
        return VectorDenoiser(**arch)
    if kind == "image":
        return ImageDenoiser(**arch)
    raise ContractViolation(f"unknown denoiser kind {kind!r}")


def make_denoiser(sample_shape, embed_dim: int, hidden: int = 128, width: int = 32,
                  time_dim: int = 32, cross_attention: bool = False) -> _Denoiser:
    """Pick the architecture from the data shape: (d,) -> MLP, (C, H, W) -> conv net."""
    if len(sample_shape) == 1:
        return VectorDenoiser(sample_shape[0], embed_dim, hidden=hidden, time_dim=time_dim)
    if len(sample_shape) == 3:
        return ImageDenoiser(sample_shape[0], embed_dim, width=width, time_dim=time_dim,
                             cross_attention=cross_attention)
    raise ContractViolation(f"unsupported sample shape {tuple(sample_shape)}")


def predict_noise(denoiser, inp: DenoiserInput) -> torch.Tensor:
    return denoiser(inp.x_k, inp.k, inp.prototype, inp.label_embedding)
