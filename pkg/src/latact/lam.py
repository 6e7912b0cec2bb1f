"""Stage 1: latent action model.

An inverse-dynamics encoder summarizes what happened between two head-view
frames into a handful of discrete tokens; a forward-dynamics decoder must
reconstruct the later frame from the earlier frame plus those tokens alone.
The bottleneck is a vector quantizer with EMA codebook updates and a
straight-through gradient path.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .checkpoint import load_checkpoint, load_into_module, module_arrays, save_checkpoint
from .episodes import Episode
from .nn import Attention, Block, PatchEmbed, unpatchify
from .seeding import derive_seed

logger = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class LamConfig:
    frame_gap: int = 5
    num_tokens: int = 4
    codebook_size: int = 32
    embed_dim: int = 64
    encoder_depth: int = 2
    decoder_depth: int = 2
    commitment_beta: float = 0.25
    ema_decay: float = 0.95
    image_size: int = 64
    patch_size: int = 16
    channels: int = 3
    heads: int = 4
    mlp_ratio: int = 4

    def __post_init__(self) -> None:
        if self.num_tokens < 1:
            raise ValueError("num_tokens must be >= 1")
        if self.codebook_size < 2:
            raise ValueError("codebook_size must be >= 2")
        if self.frame_gap < 1:
            raise ValueError("frame_gap must be >= 1")
        if not (0.0 < self.ema_decay < 1.0):
            raise ValueError("ema_decay must be in (0, 1)")


class VectorQuantizer(nn.Module):
    """Shared codebook over all token slots, EMA-updated.

    ``entries`` is the |C| x d embedding table; ``usage_counts`` tracks the
    EMA of assignment counts (kept in float64 so the usage-mass identity is
    checkable to full precision).
    """

    def __init__(self, codebook_size: int, dim: int, decay: float = 0.99,
                 beta: float = 0.25, eps: float = 1e-5):
        super().__init__()
        self.decay = decay
        self.beta = beta
        self.eps = eps
        entries = torch.randn(codebook_size, dim) * 0.5
        self.register_buffer("entries", entries)
        self.register_buffer("usage_counts", torch.zeros(codebook_size, dtype=torch.float64))
        self.register_buffer("ema_embed", entries.clone().double())

    @property
    def codebook_size(self) -> int:
        return self.entries.shape[0]

    def assign(self, flat: torch.Tensor) -> torch.Tensor:
        """Nearest entry per row by squared Euclidean distance.

        Ties break to the lowest codebook index, deterministically.
        """
        if self.entries.numel() == 0:
            raise ValueError("empty codebook")
        d = ((flat[:, None, :] - self.entries[None].to(flat.dtype)) ** 2).sum(-1)
        d_min = d.min(dim=-1, keepdim=True).values
        idx = torch.arange(self.codebook_size, device=flat.device)
        candidates = torch.where(d == d_min, idx, torch.full_like(idx, self.codebook_size))
        return candidates.min(dim=-1).values

    def forward(self, embeddings: torch.Tensor):
        """Quantize (B, k, d) embeddings; returns (tokens, ste output, losses)."""
        if not torch.isfinite(embeddings).all():
            raise ValueError("non-finite embeddings")
        b, k, d = embeddings.shape
        flat = embeddings.reshape(b * k, d)
        tokens = self.assign(flat).reshape(b, k)
        quantized = self.entries.to(embeddings.dtype)[tokens]
        commitment = ((embeddings - quantized.detach()) ** 2).mean()
        q_error = ((embeddings.detach() - quantized) ** 2).mean()
        # (x - x.detach()) is exactly zero in the forward pass, so the STE
        # output equals the selected codebook rows bit-for-bit while the
        # gradient passes through unchanged.
        ste = quantized.detach() + (embeddings - embeddings.detach())
        losses = {"commitment": self.beta * commitment, "q_error": q_error}
        return tokens, ste, losses

    @torch.no_grad()
    def ema_update(self, embeddings: torch.Tensor, tokens: torch.Tensor) -> None:
        flat = embeddings.reshape(-1, embeddings.shape[-1]).double()
        idx = tokens.reshape(-1)
        one_hot = F.one_hot(idx, self.codebook_size).double()
        batch_counts = one_hot.sum(0)
        batch_embed = one_hot.t() @ flat
        self.usage_counts.mul_(self.decay).add_(batch_counts, alpha=1.0 - self.decay)
        self.ema_embed.mul_(self.decay).add_(batch_embed, alpha=1.0 - self.decay)
        n = self.usage_counts.sum()
        smoothed = (self.usage_counts + self.eps) / (n + self.codebook_size * self.eps) * n
        self.entries.copy_((self.ema_embed / smoothed[:, None]).to(self.entries.dtype))

    @torch.no_grad()
    def init_from_data(self, flat: torch.Tensor) -> None:
        """Seed entries with evenly spaced rows of a (shuffled) batch."""
        n = flat.shape[0]
        ids = torch.linspace(0, n - 1, self.codebook_size).long()
        self.entries.copy_(flat[ids].to(self.entries.dtype))
        self.ema_embed.copy_(self.entries.double())
        self.usage_counts.fill_(1.0)

    @torch.no_grad()
    def restart_dead(self, flat: torch.Tensor, min_usage_frac: float = 0.03) -> int:
        """Re-seed starved entries with the worst-quantized batch rows."""
        threshold = min_usage_frac * float(self.usage_counts.mean())
        dead = torch.nonzero(self.usage_counts < threshold).flatten()
        if dead.numel() == 0:
            return 0
        tokens = self.assign(flat)
        err = ((flat - self.entries.to(flat.dtype)[tokens]) ** 2).sum(-1)
        worst = torch.argsort(err, descending=True)[:dead.numel()]
        self.entries[dead] = flat[worst].to(self.entries.dtype)
        self.ema_embed[dead] = self.entries[dead].double()
        self.usage_counts[dead] = self.usage_counts.mean()
        return int(dead.numel())

    def perplexity(self) -> float:
        total = float(self.usage_counts.sum())
        if total <= 0.0:
            return 0.0
        p = (self.usage_counts / total).clamp_min(1e-12)
        return float(torch.exp(-(p * p.log()).sum()))


class SpatioTemporalEncoder(nn.Module):
    """Two-frame encoder: spatial attention within each frame, causally
    masked temporal attention across frames, then k readout slots."""

    def __init__(self, cfg: LamConfig):
        super().__init__()
        self.cfg = cfg
        self.patch = PatchEmbed(cfg.image_size, cfg.patch_size, cfg.channels, cfg.embed_dim)
        self.pos = nn.Parameter(torch.randn(1, self.patch.n_patches, cfg.embed_dim) * 0.02)
        self.time = nn.Parameter(torch.randn(1, 2, 1, cfg.embed_dim) * 0.02)
        self.spatial = nn.ModuleList(
            Block(cfg.embed_dim, cfg.heads, mlp_ratio=cfg.mlp_ratio)
            for _ in range(cfg.encoder_depth))
        self.temporal_norm = nn.ModuleList(
            nn.LayerNorm(cfg.embed_dim) for _ in range(cfg.encoder_depth))
        self.temporal_attn = nn.ModuleList(
            Attention(cfg.embed_dim, cfg.heads) for _ in range(cfg.encoder_depth))
        self.slots = nn.Parameter(torch.randn(1, cfg.num_tokens, cfg.embed_dim) * 0.02)
        self.diff_norm = nn.LayerNorm(cfg.embed_dim)
        self.readout = Block(cfg.embed_dim, cfg.heads, cross=True, mlp_ratio=cfg.mlp_ratio)
        # Batch normalization (not layer norm) ahead of the quantizer: each
        # slot's outputs are a near-constant vector plus a small
        # input-dependent deviation, and nearest-neighbour assignment over raw
        # outputs lets a single code capture a whole slot. Centering and
        # rescaling every (slot, feature) pair across the batch makes codes
        # compete over the input-dependent deviation instead.
        self.out_norm = nn.BatchNorm1d(cfg.num_tokens * cfg.embed_dim,
                                       affine=False)

    def trunk(self, first: torch.Tensor, second: torch.Tensor) -> torch.Tensor:
        """Per-patch features, shape (B, 2, S, d); time 0 never sees time 1."""
        if first.shape != second.shape:
            raise ValueError("frame pair dimensions must match")
        b = first.shape[0]
        x0 = self.patch(first) + self.pos
        x1 = self.patch(second) + self.pos
        x = torch.stack([x0, x1], dim=1) + self.time  # (B, 2, S, d)
        s = x.shape[2]
        causal = torch.triu(torch.ones(2, 2, dtype=torch.bool, device=x.device), diagonal=1)
        for blk, t_norm, t_attn in zip(self.spatial, self.temporal_norm, self.temporal_attn):
            y = x.reshape(b * 2, s, -1)
            y = blk(y)
            x = y.reshape(b, 2, s, -1)
            y = x.permute(0, 2, 1, 3).reshape(b * s, 2, -1)
            y = y + t_attn(t_norm(y), mask=causal)
            x = y.reshape(b, s, 2, -1).permute(0, 2, 1, 3)
        return x

    def forward(self, first: torch.Tensor, second: torch.Tensor) -> torch.Tensor:
        x = self.trunk(first, second)
        b = x.shape[0]
        # Normalized per-patch feature differences make the inter-frame change
        # salient to the readout; raw patch features are dominated by the
        # (batch-constant) background and starve the slots of motion signal.
        diff = self.diff_norm(x[:, 1] - x[:, 0])
        tokens = torch.cat([x[:, 1], diff], dim=1)
        slots = self.slots.expand(b, -1, -1)
        out = self.readout(slots, ctx=tokens)
        k, d = out.shape[1], out.shape[2]
        return self.out_norm(out.reshape(b, k * d)).reshape(b, k, d)


class SpatialDecoder(nn.Module):
    """Forward-dynamics decoder: first-frame patches plus k code embeddings
    attend jointly; patch tokens are projected back to pixels."""

    def __init__(self, cfg: LamConfig):
        super().__init__()
        self.cfg = cfg
        self.patch = PatchEmbed(cfg.image_size, cfg.patch_size, cfg.channels, cfg.embed_dim)
        self.pos = nn.Parameter(torch.randn(1, self.patch.n_patches, cfg.embed_dim) * 0.02)
        self.code_proj = nn.Linear(cfg.embed_dim, cfg.embed_dim)
        self.code_pos = nn.Parameter(torch.randn(1, cfg.num_tokens, cfg.embed_dim) * 0.02)
        self.blocks = nn.ModuleList(
            Block(cfg.embed_dim, cfg.heads, mlp_ratio=cfg.mlp_ratio)
            for _ in range(cfg.decoder_depth))
        self.norm = nn.LayerNorm(cfg.embed_dim)
        patch_dim = cfg.channels * cfg.patch_size ** 2
        self.head = nn.Linear(cfg.embed_dim, patch_dim)

    def forward(self, first: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        b = first.shape[0]
        patches = self.patch(first) + self.pos
        codes = self.code_proj(cond) + self.code_pos
        x = torch.cat([patches, codes], dim=1)
        for blk in self.blocks:
            x = blk(x)
        out = self.head(self.norm(x[:, :self.patch.n_patches]))
        return unpatchify(out, self.cfg.image_size, self.cfg.patch_size, self.cfg.channels)


class LatentActionModel(nn.Module):
    def __init__(self, cfg: LamConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = SpatioTemporalEncoder(cfg)
        self.quantizer = VectorQuantizer(cfg.codebook_size, cfg.embed_dim,
                                         decay=cfg.ema_decay, beta=cfg.commitment_beta)
        self.decoder = SpatialDecoder(cfg)

    def encode(self, first: torch.Tensor, second: torch.Tensor) -> torch.Tensor:
        return self.encoder(first, second)

    def decode(self, first: torch.Tensor, tokens: torch.Tensor) -> torch.Tensor:
        if tokens.min() < 0 or tokens.max() >= self.cfg.codebook_size:
            raise ValueError("latent token out of codebook range")
        cond = self.quantizer.entries.to(first.dtype)[tokens]
        return self.decoder(first, cond)

    def forward(self, first: torch.Tensor, second: torch.Tensor,
                quantize: bool = True):
        """Full pass; with quantize=False the bottleneck is bypassed (used by
        the finite-difference gradient check, where the discrete jump has no
        derivative)."""
        emb = self.encoder(first, second)
        if quantize:
            tokens, cond, losses = self.quantizer(emb)
        else:
            with torch.no_grad():
                tokens = self.quantizer.assign(
                    emb.reshape(-1, emb.shape[-1])).reshape(emb.shape[:2])
            rows = self.quantizer.entries.to(emb.dtype)[tokens]
            commitment = ((emb - rows.detach()) ** 2).mean()
            cond = emb
            losses = {"commitment": self.quantizer.beta * commitment,
                      "q_error": torch.zeros((), dtype=emb.dtype)}
        recon = self.decoder(first, cond)
        loss = F.mse_loss(recon, second) + losses["commitment"]
        return {"recon": recon, "tokens": tokens, "embeddings": emb,
                "loss": loss, **losses}


# ---------------------------------------------------------------------------
# Training and labeling


def _episode_head_frames(episode: Episode) -> np.ndarray:
    return np.stack([obs.head_view for obs, _ in episode.frames])


def build_pair_index(lengths: list[int], gap: int) -> list[tuple[int, int]]:
    """(episode index, start frame) for every frame pair separated by gap."""
    return [(e, t) for e, n in enumerate(lengths) for t in range(n - gap)]


class FramePairDataset:
    """In-memory frame-pair source over a list of episodes (head view only)."""

    def __init__(self, episodes: list[Episode], gap: int):
        self.frames = [( _episode_head_frames(ep) * 255).astype(np.uint8)
                       for ep in episodes]
        self.index = build_pair_index([f.shape[0] for f in self.frames], gap)
        self.gap = gap

    def __len__(self) -> int:
        return len(self.index)

    def batch(self, ids: np.ndarray) -> tuple[torch.Tensor, torch.Tensor]:
        first = np.stack([self.frames[self.index[i][0]][self.index[i][1]] for i in ids])
        second = np.stack([self.frames[self.index[i][0]][self.index[i][1] + self.gap]
                           for i in ids])
        to = lambda a: torch.from_numpy(a.astype(np.float32) / 255.0)
        return to(first), to(second)


def train_lam(episodes: list[Episode], cfg: LamConfig, epochs: int = 20,
              batch_size: int = 64, lr: float = 1e-3, seed: int = 0,
              val_fraction: float = 0.1, out_path: Optional[Path] = None,
              max_steps_per_epoch: Optional[int] = None) -> dict:
    """Train the LAM; returns history plus the trained model."""
    if not episodes:
        raise ValueError("dataset is empty")
    torch.manual_seed(derive_seed(seed, "lam-init"))
    model = LatentActionModel(cfg)
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    n_val = max(1, int(len(episodes) * val_fraction)) if len(episodes) > 1 else 0
    train_eps = episodes[:len(episodes) - n_val] if n_val else episodes
    val_eps = episodes[len(episodes) - n_val:] if n_val else episodes
    train_ds = FramePairDataset(train_eps, cfg.frame_gap)
    val_ds = FramePairDataset(val_eps, cfg.frame_gap)
    if len(train_ds) == 0:
        raise ValueError("no frame pairs: episodes shorter than frame_gap")
    rng = np.random.default_rng(derive_seed(seed, "lam-batches"))

    def val_mse() -> tuple[float, float]:
        model.eval()
        tot, copy_tot, n = 0.0, 0.0, 0
        with torch.no_grad():
            for lo in range(0, len(val_ds), 128):
                ids = np.arange(lo, min(lo + 128, len(val_ds)))
                first, second = val_ds.batch(ids)
                out = model(first, second)
                tot += float(F.mse_loss(out["recon"], second)) * len(ids)
                copy_tot += float(F.mse_loss(first, second)) * len(ids)
                n += len(ids)
        model.train()
        return tot / n, copy_tot / n

    history = {"train_loss": [], "val_mse": [], "copy_mse": [], "perplexity": [],
               "step_losses": []}
    v0, copy0 = val_mse()
    history["initial_val_mse"] = v0
    step = 0
    for epoch in range(epochs):
        order = rng.permutation(len(train_ds))
        if max_steps_per_epoch is not None:
            order = order[:max_steps_per_epoch * batch_size]
        losses = []
        for lo in range(0, len(order), batch_size):
            ids = order[lo:lo + batch_size]
            first, second = train_ds.batch(ids)
            if step == 0:
                with torch.no_grad():
                    emb0 = model.encoder(first, second)
                    model.quantizer.init_from_data(emb0.reshape(-1, emb0.shape[-1]))
            out = model(first, second)
            loss = out["loss"]
            if not torch.isfinite(loss):
                snap = Path(out_path or ".").with_suffix(".diverged.ckpt")
                save_lam(model, snap)
                raise TrainingDiverged(
                    f"NaN loss at epoch {epoch} step {step}; snapshot at {snap}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            model.quantizer.ema_update(out["embeddings"], out["tokens"])
            if step % 10 == 9:
                with torch.no_grad():
                    model.quantizer.restart_dead(
                        out["embeddings"].detach().reshape(-1, cfg.embed_dim),
                        min_usage_frac=0.1)
            losses.append(loss.item())
            if step < 10:
                history["step_losses"].append(loss.item())
            step += 1
        v, copy = val_mse()
        history["train_loss"].append(float(np.mean(losses)))
        history["val_mse"].append(v)
        history["copy_mse"].append(copy)
        history["perplexity"].append(model.quantizer.perplexity())
        logger.info("lam epoch %d: train %.5f val %.5f copy %.5f perplexity %.2f",
                    epoch, history["train_loss"][-1], v, copy, history["perplexity"][-1])
    if out_path is not None:
        save_lam(model, out_path)
    history["model"] = model
    return history


def save_lam(model: LatentActionModel, path: Path) -> None:
    save_checkpoint(path, "lam", asdict(model.cfg), module_arrays(model))


def load_lam(path: Path) -> LatentActionModel:
    kind, config, arrays = load_checkpoint(path)
    if kind != "lam":
        raise ValueError(f"{path}: expected lam checkpoint, got {kind}")
    model = LatentActionModel(LamConfig(**config))
    load_into_module(model, arrays)
    model.eval()
    return model


def label_latents(episode: Episode, model: LatentActionModel,
                  batch_size: int = 128) -> np.ndarray:
    """LAM pseudo-labels, one token vector per frame t in [0, N-1-gap].

    Computed from the head view only; wrist views never enter.
    """
    gap = model.cfg.frame_gap
    n = len(episode.frames)
    if n <= gap:
        logger.warning("episode %s too short for frame gap %d", episode.episode_id, gap)
        return np.zeros((0, model.cfg.num_tokens), dtype=np.int64)
    heads = _episode_head_frames(episode)
    out = []
    model.eval()
    with torch.no_grad():
        for lo in range(0, n - gap, batch_size):
            hi = min(lo + batch_size, n - gap)
            first = torch.from_numpy(heads[lo:hi])
            second = torch.from_numpy(heads[lo + gap:hi + gap])
            emb = model.encode(first, second)
            tokens = model.quantizer.assign(
                emb.reshape(-1, emb.shape[-1])).reshape(emb.shape[0], -1)
            out.append(tokens.numpy())
    return np.concatenate(out, axis=0)
