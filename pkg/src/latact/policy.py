"""Policy bundle and Stage-2/Stage-3 training.

``GoPolicy`` glues the frozen LAM, the vision-language backbone, the latent
planner and the diffusion action expert into one inference pipeline: encode
context, predict latent tokens (all slots masked), then denoise an action
chunk conditioned on every layer. A learned null branch stands in for the
planner when conditioning is dropped, which doubles as the no-latent-planner
ablation at evaluation time.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn as nn

from .checkpoint import load_checkpoint, load_into_module, module_arrays, save_checkpoint
from .episodes import Episode
from .expert import (ActionExpert, ActionNormalizer, DiffusionConfig, ExpertContext,
                     alpha_bar_schedule, expert_loss, forward_diffuse, sample_chunk)
from .lam import LamConfig, LatentActionModel, TrainingDiverged, label_latents
from .planner import (BackboneConfig, PlannerModel, planner_loss, predicted_code,
                      sample_mask)
from .seeding import derive_seed
from .world import Observation

logger = logging.getLogger(__name__)

ACTION_DIM = 3
PROPRIO_DIM = 3


@dataclass
class PolicyConfig:
    horizon: int = 30          # action chunk length
    replan_every: int = 10     # closed-loop: execute m actions, then re-plan
    p_mask: float = 0.5
    p_cond_drop: float = 0.15  # train-time planner-branch dropout (null branch)
    lambda_expert: float = 1.0


class GoPolicy(nn.Module):
    def __init__(self, lam: LatentActionModel, planner_model: PlannerModel,
                 diffusion: DiffusionConfig, policy_cfg: PolicyConfig):
        super().__init__()
        self.lam = lam
        for p in self.lam.parameters():
            p.requires_grad_(False)
        self.pm = planner_model
        bb = planner_model.cfg
        k = planner_model.planner.num_tokens
        d = bb.trunk_width
        self.expert = ActionExpert(d, bb.trunk_depth, policy_cfg.horizon, ACTION_DIM,
                                   proprio_dim=PROPRIO_DIM, heads=bb.heads,
                                   mlp_ratio=bb.mlp_ratio)
        self.null_planner = nn.Parameter(torch.randn(bb.trunk_depth, k, d) * 0.02)
        self.null_latent = nn.Parameter(torch.randn(1, k, d) * 0.02)
        self.normalizer = ActionNormalizer(ACTION_DIM)
        self.diffusion = diffusion
        self.policy_cfg = policy_cfg
        self.register_buffer("abar", alpha_bar_schedule(diffusion.num_steps))

    def trainable_parameters(self):
        return (p for n, p in self.named_parameters()
                if not n.startswith("lam.") and p.requires_grad)

    def build_context(self, head, left, right, word_ids,
                      latent_tokens: Optional[torch.Tensor] = None,
                      planner_mask: Optional[torch.Tensor] = None,
                      known_tokens: Optional[torch.Tensor] = None,
                      proprio: Optional[torch.Tensor] = None,
                      use_planner: bool = True,
                      drop_mask: Optional[torch.Tensor] = None):
        """Assemble the expert's hierarchical context.

        Training passes ground-truth latent tokens (teacher forcing) plus a
        per-sample drop mask; inference passes nothing and the planner's own
        prediction is embedded. use_planner=False routes every sample through
        the learned null branch (the no-latent-planner ablation).
        """
        b = head.shape[0]
        backbone_states = self.pm.encode_context(head, left, right, word_ids)
        logits, planner_states = self.pm.planner(
            backbone_states, known_tokens=known_tokens, mask=planner_mask,
            return_states=True)
        if latent_tokens is None:
            latent_tokens = predicted_code(logits)
        latent_embed = self.pm.planner.token_emb(latent_tokens)

        if not use_planner:
            drop_mask = torch.ones(b, dtype=torch.bool)
        if drop_mask is not None:
            sel = drop_mask[:, None, None]
            planner_states = [
                torch.where(sel, self.null_planner[i][None].expand(b, -1, -1), s)
                for i, s in enumerate(planner_states)]
            latent_embed = torch.where(sel, self.null_latent.expand(b, -1, -1),
                                       latent_embed)
        ctx = ExpertContext(backbone_states=backbone_states,
                            planner_states=planner_states,
                            latent_embed=latent_embed, proprio=proprio)
        return ctx, logits

    @torch.no_grad()
    def infer_action(self, obs: Observation, instruction: str, seed: int,
                     use_planner: bool = True) -> np.ndarray:
        """One policy step: predict latent tokens, denoise a chunk.

        Returns a (horizon, 3) array of denormalized actions in [-1, 1].
        """
        self.eval()
        word_ids = torch.tensor(
            [self.pm.tokenizer.encode_padded(instruction, self.pm.cfg.max_words)],
            dtype=torch.long)
        head = torch.from_numpy(obs.head_view)[None]
        left = torch.from_numpy(obs.left_wrist_view)[None]
        right = torch.from_numpy(obs.right_wrist_view)[None]
        proprio = torch.from_numpy(obs.proprio)[None]
        ctx, _ = self.build_context(head, left, right, word_ids, proprio=proprio,
                                    use_planner=use_planner)
        chunk = sample_chunk(self.expert, ctx, self.abar, seed)
        actions = self.normalizer.denormalize(chunk[0])
        return actions.clamp(-1.0, 1.0).numpy()


def save_policy(policy: GoPolicy, path: Path) -> None:
    config = {
        "lam": asdict(policy.lam.cfg),
        "backbone": asdict(policy.pm.cfg),
        "diffusion": asdict(policy.diffusion),
        "policy": asdict(policy.policy_cfg),
        "num_tokens": policy.pm.planner.num_tokens,
        "codebook_size": policy.pm.planner.codebook_size,
        "vocab": policy.pm.tokenizer.vocab,
    }
    save_checkpoint(path, "policy", config, module_arrays(policy))


def load_policy(path: Path) -> GoPolicy:
    kind, config, arrays = load_checkpoint(path)
    if kind != "policy":
        raise ValueError(f"{path}: expected policy checkpoint, got {kind}")
    lam = LatentActionModel(LamConfig(**config["lam"]))
    pm = PlannerModel(BackboneConfig(**config["backbone"]), config["num_tokens"],
                      config["codebook_size"], vocab=config["vocab"])
    policy = GoPolicy(lam, pm, DiffusionConfig(**config["diffusion"]),
                      PolicyConfig(**config["policy"]))
    load_into_module(policy, arrays)
    policy.eval()
    return policy


# ---------------------------------------------------------------------------
# Training data assembly


class PolicyDataset:
    """In-memory multiview dataset with LAM pseudo-labels and action chunks."""

    def __init__(self, episodes: list[Episode], lam: LatentActionModel,
                 tokenizer, horizon: int, max_words: int):
        self.horizon = horizon
        self.heads, self.lefts, self.rights = [], [], []
        self.proprios, self.actions, self.labels, self.word_ids = [], [], [], []
        gap = lam.cfg.frame_gap
        for ep in episodes:
            labels = label_latents(ep, lam)
            if labels.shape[0] == 0:
                continue
            self.heads.append(np.stack(
                [(o.head_view * 255).astype(np.uint8) for o, _ in ep.frames]))
            self.lefts.append(np.stack(
                [(o.left_wrist_view * 255).astype(np.uint8) for o, _ in ep.frames]))
            self.rights.append(np.stack(
                [(o.right_wrist_view * 255).astype(np.uint8) for o, _ in ep.frames]))
            self.proprios.append(np.stack([o.proprio for o, _ in ep.frames]))
            self.actions.append(np.stack([a.delta for _, a in ep.frames]))
            self.labels.append(labels)
            ids = tokenizer.encode_padded(ep.task_instruction, max_words)
            self.word_ids.append(np.array(ids, dtype=np.int64))
        if not self.heads:
            raise ValueError("no usable episodes (all shorter than the frame gap)")
        self.index = [(e, t) for e, lab in enumerate(self.labels)
                      for t in range(lab.shape[0])]

    def __len__(self) -> int:
        return len(self.index)

    def all_actions(self) -> torch.Tensor:
        return torch.from_numpy(np.concatenate(self.actions, axis=0))

    def batch(self, ids: np.ndarray):
        h, l, r, p, w, lab, chunks, pad = [], [], [], [], [], [], [], []
        for i in ids:
            e, t = self.index[i]
            h.append(self.heads[e][t])
            l.append(self.lefts[e][t])
            r.append(self.rights[e][t])
            p.append(self.proprios[e][t])
            w.append(self.word_ids[e])
            lab.append(self.labels[e][t])
            acts = self.actions[e][t:t + self.horizon]
            n = acts.shape[0]
            if n < self.horizon:
                acts = np.concatenate(
                    [acts, np.repeat(acts[-1:], self.horizon - n, axis=0)], axis=0)
            chunks.append(acts)
            m = np.zeros(self.horizon, dtype=bool)
            m[:n] = True
            pad.append(m)
        img = lambda a: torch.from_numpy(np.stack(a).astype(np.float32) / 255.0)
        return {
            "head": img(h), "left": img(l), "right": img(r),
            "proprio": torch.from_numpy(np.stack(p)),
            "word_ids": torch.from_numpy(np.stack(w)),
            "labels": torch.from_numpy(np.stack(lab)),
            "chunk": torch.from_numpy(np.stack(chunks)),
            "pad_mask": torch.from_numpy(np.stack(pad)),
        }


# ---------------------------------------------------------------------------
# Stage 2: planner-only training


def train_planner(episodes: list[Episode], lam: LatentActionModel,
                  backbone_cfg: BackboneConfig, epochs: int = 10,
                  batch_size: int = 32, lr: float = 1e-3, seed: int = 0,
                  p_mask: float = 0.5, val_fraction: float = 0.1,
                  out_path: Optional[Path] = None,
                  max_steps_per_epoch: Optional[int] = None) -> dict:
    """Masked latent-token prediction; the LAM stays frozen throughout."""
    torch.manual_seed(derive_seed(seed, "planner-init"))
    k = lam.cfg.num_tokens
    c = lam.cfg.codebook_size
    model = PlannerModel(backbone_cfg, k, c)
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    n_val = max(1, int(len(episodes) * val_fraction)) if len(episodes) > 1 else 0
    train_eps = episodes[:len(episodes) - n_val] if n_val else episodes
    val_eps = episodes[len(episodes) - n_val:] if n_val else episodes
    train_ds = PolicyDataset(train_eps, lam, model.tokenizer, horizon=1,
                             max_words=backbone_cfg.max_words)
    val_ds = PolicyDataset(val_eps, lam, model.tokenizer, horizon=1,
                           max_words=backbone_cfg.max_words)
    rng = np.random.default_rng(derive_seed(seed, "planner-batches"))
    gen = torch.Generator().manual_seed(derive_seed(seed, "planner-masks"))

    def accuracy(ds: PolicyDataset) -> float:
        model.eval()
        hits, total = 0, 0
        with torch.no_grad():
            for lo in range(0, len(ds), 128):
                b = ds.batch(np.arange(lo, min(lo + 128, len(ds))))
                out = model.predict(b["head"], b["left"], b["right"], b["word_ids"])
                hits += int((out.predicted_code == b["labels"]).sum())
                total += b["labels"].numel()
        model.train()
        return hits / max(total, 1)

    history = {"loss": [], "train_acc": [], "val_acc": [], "step_losses": []}
    step = 0
    for epoch in range(epochs):
        order = rng.permutation(len(train_ds))
        if max_steps_per_epoch is not None:
            order = order[:max_steps_per_epoch * batch_size]
        losses = []
        for lo in range(0, len(order), batch_size):
            b = train_ds.batch(order[lo:lo + batch_size])
            context = model.encode_context(b["head"], b["left"], b["right"], b["word_ids"])
            mask = sample_mask(tuple(b["labels"].shape), p_mask, gen)
            logits = model.planner(context, known_tokens=b["labels"], mask=mask)
            loss = planner_loss(logits, b["labels"], mask)
            if not torch.isfinite(loss):
                raise TrainingDiverged(f"NaN planner loss at step {step}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
            if step < 10:
                history["step_losses"].append(loss.item())
            step += 1
        history["loss"].append(float(np.mean(losses)))
        history["train_acc"].append(accuracy(train_ds))
        history["val_acc"].append(accuracy(val_ds))
        logger.info("planner epoch %d: loss %.4f train_acc %.3f val_acc %.3f",
                    epoch, history["loss"][-1], history["train_acc"][-1],
                    history["val_acc"][-1])
    if out_path is not None:
        from .planner import save_planner
        save_planner(model, out_path)
    history["model"] = model
    return history


# ---------------------------------------------------------------------------
# Stage 3: joint planner + expert training


def joint_train(episodes: list[Episode], lam: LatentActionModel,
                backbone_cfg: BackboneConfig, diffusion: DiffusionConfig,
                policy_cfg: Optional[PolicyConfig] = None,
                planner_model: Optional[PlannerModel] = None,
                epochs: int = 10, batch_size: int = 32, lr: float = 1e-3,
                seed: int = 0, out_path: Optional[Path] = None,
                max_steps_per_epoch: Optional[int] = None) -> dict:
    """Joint masked-token + diffusion training; LAM frozen, everything else
    optimized. Per-sample conditioning dropout trains the null branch used by
    the no-latent-planner ablation."""
    policy_cfg = policy_cfg or PolicyConfig()
    torch.manual_seed(derive_seed(seed, "joint-init"))
    if planner_model is None:
        planner_model = PlannerModel(backbone_cfg, lam.cfg.num_tokens,
                                     lam.cfg.codebook_size)
    else:
        if (planner_model.planner.num_tokens != lam.cfg.num_tokens
                or planner_model.planner.codebook_size != lam.cfg.codebook_size):
            raise ValueError("planner checkpoint incompatible with LAM (k or |C|)")
    policy = GoPolicy(lam, planner_model, diffusion, policy_cfg)
    lam_before = {k_: v.clone() for k_, v in lam.state_dict().items()}
    opt = torch.optim.Adam(policy.trainable_parameters(), lr=lr)
    ds = PolicyDataset(episodes, lam, planner_model.tokenizer,
                       horizon=policy_cfg.horizon, max_words=backbone_cfg.max_words)
    policy.normalizer.fit(ds.all_actions())
    rng = np.random.default_rng(derive_seed(seed, "joint-batches"))
    gen = torch.Generator().manual_seed(derive_seed(seed, "joint-noise"))
    T = diffusion.num_steps

    history = {"planner_loss": [], "expert_loss": [], "step_losses": []}
    step = 0
    policy.train()
    for epoch in range(epochs):
        order = rng.permutation(len(ds))
        if max_steps_per_epoch is not None:
            order = order[:max_steps_per_epoch * batch_size]
        pl_losses, ex_losses = [], []
        for lo in range(0, len(order), batch_size):
            b = ds.batch(order[lo:lo + batch_size])
            n = b["labels"].shape[0]
            mask = sample_mask((n, lam.cfg.num_tokens), policy_cfg.p_mask, gen)
            drop = torch.rand(n, generator=gen) < policy_cfg.p_cond_drop
            ctx, logits = policy.build_context(
                b["head"], b["left"], b["right"], b["word_ids"],
                latent_tokens=b["labels"], planner_mask=mask,
                known_tokens=b["labels"], proprio=b["proprio"], drop_mask=drop)
            l_pl = planner_loss(logits, b["labels"], mask)

            chunk = policy.normalizer.normalize(b["chunk"])
            t = torch.randint(1, T + 1, (n,), generator=gen)
            noise = torch.randn(chunk.shape, generator=gen)
            a = policy.abar[t][:, None, None]
            noisy = torch.sqrt(a) * chunk + torch.sqrt(1.0 - a) * noise
            eps_hat = policy.expert(noisy, t, ctx)
            l_ex = expert_loss(eps_hat, noise, b["pad_mask"])

            loss = l_pl + policy_cfg.lambda_expert * l_ex
            if not torch.isfinite(loss):
                raise TrainingDiverged(f"NaN joint loss at step {step}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            pl_losses.append(l_pl.item())
            ex_losses.append(l_ex.item())
            if step < 10:
                history["step_losses"].append(loss.item())
            step += 1
        history["planner_loss"].append(float(np.mean(pl_losses)))
        history["expert_loss"].append(float(np.mean(ex_losses)))
        logger.info("joint epoch %d: planner %.4f expert %.4f", epoch,
                    history["planner_loss"][-1], history["expert_loss"][-1])

    for k_, v in lam.state_dict().items():
        if not torch.equal(v, lam_before[k_]):
            raise AssertionError(f"frozen LAM parameter {k_} changed during joint training")
    policy.eval()
    if out_path is not None:
        save_policy(policy, out_path)
    history["policy"] = policy
    return history
