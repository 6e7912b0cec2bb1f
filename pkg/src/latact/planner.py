"""Stage 2: vision-language backbone and latent planner.

A small from-scratch trunk embeds the three camera views and the word-level
instruction with full bidirectional attention, keeping every intermediate
layer state. The planner holds one slot per latent token; planner layer i
cross-attends to backbone layer-i states (layer-by-layer conditioning) and
k classification heads predict the LAM pseudo-labels. Training follows a
masked-token objective: each slot is masked independently, at least one per
sample, and only masked slots contribute to the loss.
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
from .nn import Block, PatchEmbed
from .world import HEAD_RES, INSTRUCTION_TEMPLATES, PALETTE, WRIST_RES

logger = logging.getLogger(__name__)


def build_vocab() -> list[str]:
    """Word-level vocabulary covering every task template and color name."""
    words = set()
    for templates in INSTRUCTION_TEMPLATES.values():
        for t in templates:
            for color in PALETTE:
                words.update(t.format(c=color, b=color).split())
    return sorted(words) + ["<pad>"]


class OutOfVocabulary(ValueError):
    pass


class Tokenizer:
    def __init__(self, vocab: Optional[list[str]] = None):
        self.vocab = vocab if vocab is not None else build_vocab()
        self.index = {w: i for i, w in enumerate(self.vocab)}
        self.pad_id = self.index["<pad>"]

    def encode(self, text: str) -> list[int]:
        ids = []
        for word in text.split():
            if word not in self.index:
                raise OutOfVocabulary(f"word {word!r} not in instruction vocabulary")
            ids.append(self.index[word])
        return ids

    def encode_padded(self, text: str, max_words: int) -> list[int]:
        ids = self.encode(text)
        if len(ids) > max_words:
            raise ValueError(f"instruction longer than {max_words} words")
        return ids + [self.pad_id] * (max_words - len(ids))


@dataclass
class BackboneConfig:
    patch_size: int = 16
    trunk_depth: int = 4
    trunk_width: int = 64
    heads: int = 4
    mlp_ratio: int = 4
    max_words: int = 12
    channels: int = 3

    def __post_init__(self) -> None:
        if self.trunk_depth < 1:
            raise ValueError("trunk_depth must be >= 1")


class VisionLanguageBackbone(nn.Module):
    """Multiview patches + instruction words through a bidirectional trunk;
    returns the hidden states of every layer (the context stack)."""

    def __init__(self, cfg: BackboneConfig, vocab_size: int):
        super().__init__()
        self.cfg = cfg
        d = cfg.trunk_width
        self.head_patch = PatchEmbed(HEAD_RES, cfg.patch_size, cfg.channels, d)
        self.wrist_patch = PatchEmbed(WRIST_RES, cfg.patch_size, cfg.channels, d)
        self.head_pos = nn.Parameter(torch.randn(1, self.head_patch.n_patches, d) * 0.02)
        self.wrist_pos = nn.Parameter(torch.randn(1, self.wrist_patch.n_patches, d) * 0.02)
        self.view_emb = nn.Parameter(torch.randn(3, 1, d) * 0.02)  # head, left, right
        self.word_emb = nn.Embedding(vocab_size, d)
        self.word_pos = nn.Parameter(torch.randn(1, cfg.max_words, d) * 0.02)
        self.blocks = nn.ModuleList(
            Block(d, cfg.heads, mlp_ratio=cfg.mlp_ratio) for _ in range(cfg.trunk_depth))

    def embed_tokens(self, head, left, right, word_ids) -> torch.Tensor:
        if word_ids.shape[1] > self.cfg.max_words:
            raise ValueError(f"instruction longer than {self.cfg.max_words} words")
        b = head.shape[0]
        tokens = [
            self.head_patch(head) + self.head_pos + self.view_emb[0],
            self.wrist_patch(left) + self.wrist_pos + self.view_emb[1],
            self.wrist_patch(right) + self.wrist_pos + self.view_emb[2],
        ]
        if word_ids.shape[1] > 0:
            words = self.word_emb(word_ids) + self.word_pos[:, :word_ids.shape[1]]
            tokens.append(words)
        return torch.cat(tokens, dim=1)

    def forward(self, head, left, right, word_ids) -> list[torch.Tensor]:
        x = self.embed_tokens(head, left, right, word_ids)
        stack = []
        for blk in self.blocks:
            x = blk(x)
            stack.append(x)
        return stack


@dataclass
class PlannerOutput:
    logits: torch.Tensor        # (B, k, |C|)
    predicted_code: torch.Tensor  # (B, k) argmax per slot, ties -> lowest index


class LatentPlanner(nn.Module):
    """One layer per backbone layer; slots attend among themselves and
    cross-attend to the matching backbone layer state."""

    def __init__(self, cfg: BackboneConfig, num_tokens: int, codebook_size: int):
        super().__init__()
        self.cfg = cfg
        self.num_tokens = num_tokens
        self.codebook_size = codebook_size
        d = cfg.trunk_width
        self.slot_emb = nn.Parameter(torch.randn(1, num_tokens, d) * 0.02)
        self.mask_emb = nn.Parameter(torch.randn(1, 1, d) * 0.02)
        self.token_emb = nn.Embedding(codebook_size, d)
        self.blocks = nn.ModuleList(
            Block(d, cfg.heads, cross=True, mlp_ratio=cfg.mlp_ratio)
            for _ in range(cfg.trunk_depth))
        self.norm = nn.LayerNorm(d)
        self.heads = nn.ModuleList(
            nn.Linear(d, codebook_size) for _ in range(num_tokens))

    def forward(self, context: list[torch.Tensor],
                known_tokens: Optional[torch.Tensor] = None,
                mask: Optional[torch.Tensor] = None,
                return_states: bool = False):
        """Predict latent-token logits from a context stack.

        known_tokens/mask implement the masked objective: where mask is True
        the slot input is the mask embedding, elsewhere the ground-truth
        token embedding is fed. With both omitted, all slots are masked
        (inference mode).
        """
        if len(context) != len(self.blocks):
            raise ValueError(
                f"context stack depth {len(context)} != planner depth {len(self.blocks)}")
        b = context[0].shape[0]
        x = self.slot_emb.expand(b, -1, -1)
        if mask is None:
            x = x + self.mask_emb
        else:
            if known_tokens is None:
                raise ValueError("mask given without known_tokens")
            fill = torch.where(mask[..., None], self.mask_emb.expand(b, self.num_tokens, -1),
                               self.token_emb(known_tokens))
            x = x + fill
        states = []
        for blk, ctx in zip(self.blocks, context):
            x = blk(x, ctx=ctx)
            states.append(x)
        x = self.norm(x)
        logits = torch.stack([head(x[:, i]) for i, head in enumerate(self.heads)], dim=1)
        if return_states:
            return logits, states
        return logits


def predicted_code(logits: torch.Tensor) -> torch.Tensor:
    """Argmax per slot with deterministic lowest-index tie-breaking."""
    c = logits.shape[-1]
    m = logits.max(dim=-1, keepdim=True).values
    idx = torch.arange(c, device=logits.device)
    candidates = torch.where(logits == m, idx, torch.full_like(idx, c))
    return candidates.min(dim=-1).values


def sample_mask(shape: tuple[int, int], p_mask: float,
                generator: torch.Generator) -> torch.Tensor:
    """Independent Bernoulli mask with at least one masked slot per row."""
    b, k = shape
    mask = torch.rand(b, k, generator=generator) < p_mask
    none_masked = ~mask.any(dim=1)
    if none_masked.any():
        forced = torch.randint(0, k, (int(none_masked.sum()),), generator=generator)
        rows = torch.nonzero(none_masked).flatten()
        mask[rows, forced] = True
    return mask


def planner_loss(logits: torch.Tensor, labels: torch.Tensor,
                 mask: torch.Tensor) -> torch.Tensor:
    """Cross-entropy on masked slots only, averaged over masked entries."""
    b, k, c = logits.shape
    flat_logits = logits.reshape(b * k, c)
    flat_labels = labels.reshape(b * k)
    losses = F.cross_entropy(flat_logits, flat_labels, reduction="none")
    flat_mask = mask.reshape(b * k).to(losses.dtype)
    return (losses * flat_mask).sum() / flat_mask.sum().clamp_min(1.0)


# ---------------------------------------------------------------------------
# Stage-2 training


class PlannerModel(nn.Module):
    """Backbone + planner bundle used for Stage-2 training and inference."""

    def __init__(self, cfg: BackboneConfig, num_tokens: int, codebook_size: int,
                 vocab: Optional[list[str]] = None):
        super().__init__()
        self.tokenizer = Tokenizer(vocab)
        self.backbone = VisionLanguageBackbone(cfg, len(self.tokenizer.vocab))
        self.planner = LatentPlanner(cfg, num_tokens, codebook_size)
        self.cfg = cfg

    def encode_context(self, head, left, right, word_ids) -> list[torch.Tensor]:
        return self.backbone(head, left, right, word_ids)

    def predict(self, head, left, right, word_ids) -> PlannerOutput:
        context = self.encode_context(head, left, right, word_ids)
        logits = self.planner(context)
        return PlannerOutput(logits=logits, predicted_code=predicted_code(logits))


def save_planner(model: PlannerModel, path: Path) -> None:
    config = {
        "backbone": asdict(model.cfg),
        "num_tokens": model.planner.num_tokens,
        "codebook_size": model.planner.codebook_size,
        "vocab": model.tokenizer.vocab,
    }
    save_checkpoint(path, "planner", config, module_arrays(model))


def load_planner(path: Path) -> PlannerModel:
    kind, config, arrays = load_checkpoint(path)
    if kind != "planner":
        raise ValueError(f"{path}: expected planner checkpoint, got {kind}")
    model = PlannerModel(BackboneConfig(**config["backbone"]), config["num_tokens"],
                         config["codebook_size"], vocab=config["vocab"])
    load_into_module(model, arrays)
    model.eval()
    return model
