"""Stage 3: diffusion action expert.

The expert denoises a fixed-horizon chunk of low-level actions, conditioned
hierarchically: expert layer i cross-attends to backbone layer i, planner
layer i, the embedded latent action tokens, and the proprioceptive state.
Noise prediction with a cosine signal schedule; ancestral sampling.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import torch
import torch.nn as nn

from .nn import Block, timestep_embedding


@dataclass
class DiffusionConfig:
    num_steps: int = 50
    schedule: str = "cosine"
    prediction_target: str = "noise"

    def __post_init__(self) -> None:
        if self.num_steps < 1:
            raise ValueError("num_steps must be >= 1")
        if self.schedule != "cosine":
            raise ValueError(f"unsupported schedule {self.schedule!r}")
        if self.prediction_target != "noise":
            raise ValueError(f"unsupported prediction target {self.prediction_target!r}")


def alpha_bar_schedule(num_steps: int, s: float = 0.008,
                       dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """Cosine signal-level schedule; index t in [0, T], abar[0] == 1 exactly,
    strictly decreasing in (0, 1]."""
    t = torch.arange(num_steps + 1, dtype=torch.float64)
    f = torch.cos(((t / num_steps + s) / (1.0 + s)) * math.pi / 2.0) ** 2
    abar = f / f[0]
    abar = abar.clamp_min(1e-8)
    abar[0] = 1.0
    return abar.to(dtype)


def forward_diffuse(chunk: torch.Tensor, t: int, noise: torch.Tensor,
                    abar: torch.Tensor) -> torch.Tensor:
    """Closed-form noising: sqrt(abar_t) x0 + sqrt(1 - abar_t) eps."""
    if not (0 <= t < abar.shape[0]):
        raise ValueError(f"diffusion step {t} out of range [0, {abar.shape[0] - 1}]")
    a = abar[t].to(chunk.dtype)
    return torch.sqrt(a) * chunk + torch.sqrt(1.0 - a) * noise


@dataclass
class ExpertContext:
    """Everything the expert conditions on, one entry per trunk layer."""
    backbone_states: list[torch.Tensor]
    planner_states: list[torch.Tensor]
    latent_embed: torch.Tensor  # (B, k, d)
    proprio: torch.Tensor       # (B, proprio_dim)

    def validate(self) -> None:
        if (not self.backbone_states or not self.planner_states
                or self.latent_embed is None or self.proprio is None):
            raise ValueError("expert context is missing a component")
        if len(self.backbone_states) != len(self.planner_states):
            raise ValueError("backbone/planner context depth mismatch")


class ActionExpert(nn.Module):
    def __init__(self, width: int, depth: int, horizon: int, action_dim: int,
                 proprio_dim: int = 3, heads: int = 4, mlp_ratio: int = 4):
        super().__init__()
        self.horizon = horizon
        self.action_dim = action_dim
        self.action_in = nn.Linear(action_dim, width)
        self.pos = nn.Parameter(torch.randn(1, horizon, width) * 0.02)
        self.time_mlp = nn.Sequential(nn.Linear(width, width), nn.GELU(),
                                      nn.Linear(width, width))
        self.proprio_in = nn.Linear(proprio_dim, width)
        self.blocks = nn.ModuleList(
            Block(width, heads, cross=True, mlp_ratio=mlp_ratio) for _ in range(depth))
        # Per-layer feature-wise modulation from the pooled context; the final
        # linear is zero-initialized so each block starts as an unmodulated
        # identity and the conditioning path carries gradient from step one.
        self.film = nn.ModuleList(
            nn.Sequential(nn.Linear(width, width), nn.GELU(),
                          nn.Linear(width, 2 * width)) for _ in range(depth))
        for f in self.film:
            nn.init.zeros_(f[-1].weight)
            nn.init.zeros_(f[-1].bias)
        self.norm = nn.LayerNorm(width)
        self.out = nn.Linear(width, action_dim)

    def forward(self, noisy_chunk: torch.Tensor, t: torch.Tensor,
                context: ExpertContext) -> torch.Tensor:
        """Predict the noise added to the chunk; (B, H, action_dim)."""
        context.validate()
        if len(context.backbone_states) != len(self.blocks):
            raise ValueError("context depth does not match expert depth")
        b = noisy_chunk.shape[0]
        temb = self.time_mlp(timestep_embedding(t.to(noisy_chunk.dtype), self.pos.shape[-1]))
        x = self.action_in(noisy_chunk) + self.pos + temb[:, None]
        ptok = self.proprio_in(context.proprio)[:, None]
        for blk, film, bb, pl in zip(self.blocks, self.film,
                                     context.backbone_states,
                                     context.planner_states):
            ctx = torch.cat([bb, pl, context.latent_embed, ptok], dim=1)
            x = blk(x, ctx=ctx)
            scale, shift = film(ctx.mean(dim=1) + temb).chunk(2, dim=-1)
            x = x * (1.0 + scale[:, None]) + shift[:, None]
        return self.out(self.norm(x))


def expert_loss(pred_noise: torch.Tensor, true_noise: torch.Tensor,
                pad_mask: torch.Tensor) -> torch.Tensor:
    """Noise-prediction MSE; padded chunk positions contribute exactly zero.

    pad_mask is (B, H) with True on real (non-padded) steps.
    """
    err = (pred_noise - true_noise) ** 2
    weight = pad_mask[..., None].to(err.dtype)
    denom = (weight.sum() * err.shape[-1]).clamp_min(1.0)
    return (err * weight).sum() / denom


def denoise_step(x: torch.Tensor, eps: torch.Tensor, t: int, abar: torch.Tensor,
                 noise: Optional[torch.Tensor] = None) -> torch.Tensor:
    """One reverse diffusion step from index t to t-1.

    At t == 1 the direct x0 formula is used, so applying it to a t=1-noised
    chunk with the oracle noise recovers the original chunk. For t > 1 the
    implied x0 estimate is clipped to the normalized data range [-1, 1]
    before forming the posterior mean; with abar_t near zero the division by
    sqrt(abar_t) amplifies any noise-prediction error by orders of magnitude,
    and an unclipped estimate destabilizes the whole reverse chain.
    """
    if not (1 <= t < abar.shape[0]):
        raise ValueError(f"reverse step {t} out of range [1, {abar.shape[0] - 1}]")
    a_t = abar[t].to(x.dtype)
    a_prev = abar[t - 1].to(x.dtype)
    x0_hat = (x - torch.sqrt(1.0 - a_t) * eps) / torch.sqrt(a_t)
    if t == 1:
        return x0_hat
    x0_hat = x0_hat.clamp(-1.0, 1.0)
    alpha_t = a_t / a_prev
    beta_t = 1.0 - alpha_t
    mean = (torch.sqrt(a_prev) * beta_t / (1.0 - a_t)) * x0_hat \
        + (torch.sqrt(alpha_t) * (1.0 - a_prev) / (1.0 - a_t)) * x
    var = beta_t * (1.0 - a_prev) / (1.0 - a_t)
    if noise is None:
        noise = torch.zeros_like(x)
    return mean + torch.sqrt(var) * noise


def sample_chunk(model: ActionExpert, context: ExpertContext, abar: torch.Tensor,
                 seed: int, batch: int = 1) -> torch.Tensor:
    """Ancestral sampling from pure noise, deterministic given seed."""
    context.validate()
    num_steps = abar.shape[0] - 1
    gen = torch.Generator().manual_seed(seed)
    x = torch.randn(batch, model.horizon, model.action_dim, generator=gen)
    for t in range(num_steps, 0, -1):
        t_vec = torch.full((batch,), t, dtype=torch.long)
        with torch.no_grad():
            eps = model(x, t_vec, context)
        noise = torch.randn(x.shape, generator=gen) if t > 1 else None
        x = denoise_step(x, eps, t, abar, noise)
    return x


class ActionNormalizer(nn.Module):
    """Per-dimension min-max normalization to [-1, 1], stored as buffers."""

    def __init__(self, action_dim: int):
        super().__init__()
        self.register_buffer("lo", -torch.ones(action_dim))
        self.register_buffer("hi", torch.ones(action_dim))

    @torch.no_grad()
    def fit(self, actions: torch.Tensor) -> None:
        lo = actions.reshape(-1, actions.shape[-1]).min(0).values
        hi = actions.reshape(-1, actions.shape[-1]).max(0).values
        degenerate = (hi - lo) < 1e-6
        lo = torch.where(degenerate, lo - 1.0, lo)
        hi = torch.where(degenerate, hi + 1.0, hi)
        self.lo.copy_(lo)
        self.hi.copy_(hi)

    def normalize(self, a: torch.Tensor) -> torch.Tensor:
        return 2.0 * (a - self.lo) / (self.hi - self.lo) - 1.0

    def denormalize(self, a: torch.Tensor) -> torch.Tensor:
        return (a.clamp(-1.0, 1.0) + 1.0) / 2.0 * (self.hi - self.lo) + self.lo
