"""End-to-end glue: dataset generation, full-pipeline training, trainers.

Everything downstream of a single root seed is split with derive_seed so
partial re-runs (one stage, one fraction) reproduce their sub-results.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import store, world
from .episodes import Episode, QualityFlag, trim_idle_frames
from .evaluation import TRAIN_SPAWN_REGION, PolicyAgent
from .expert import DiffusionConfig
from .lam import LamConfig, train_lam
from .planner import BackboneConfig
from .policy import GoPolicy, PolicyConfig, joint_train
from .seeding import derive_seed
from .world import SKILLS, ActionVector

logger = logging.getLogger(__name__)

FAILURE_RATE = 0.01


def generate_dataset(root: Path, n_episodes: int, seed: int,
                     skills: tuple[str, ...] = SKILLS,
                     spawn_region: tuple[float, float, float, float] = TRAIN_SPAWN_REGION,
                     failure_rate: float = FAILURE_RATE,
                     overwrite: bool = False) -> list[Path]:
    """Write a demonstration corpus; returns manifest paths in episode order.

    Skills round-robin; roughly failure_rate of the episodes include an
    injected drop-and-recover segment with a failure annotation.
    """
    root = Path(root)
    paths = []
    for i in range(n_episodes):
        ep_seed = derive_seed(seed, "episode", i)
        skill = skills[i % len(skills)]
        paraphrase = derive_seed(seed, "paraphrase", i) % 3
        task = world.sample_task(ep_seed, skill, paraphrase=paraphrase)
        inject = (derive_seed(seed, "failure", i) % 10_000) < failure_rate * 10_000
        episode = world.generate_episode(ep_seed, task, inject_failure=inject,
                                         spawn_region=spawn_region)
        paths.append(store.write_episode(episode, root, overwrite=overwrite))
    return paths


def load_episodes(manifests: list[Path]) -> list[Episode]:
    return [store.read_episode(m) for m in manifests]


# ---------------------------------------------------------------------------
# Defect injection (the "unverified" arm of the quality ablation)


def inject_defects(episode: Episode, seed: int) -> Episode:
    """A plausibly-sloppy version of the episode: unverified flag, idle
    padding at the boundaries, action noise, or truncation."""
    rng = np.random.default_rng(derive_seed(seed, "defect", episode.episode_id))
    ep = Episode(
        episode_id=episode.episode_id + "-raw",
        frames=list(episode.frames),
        frame_rate_hz=episode.frame_rate_hz,
        task_instruction=episode.task_instruction,
        sub_steps=list(episode.sub_steps),
        failures=list(episode.failures),
        quality=QualityFlag("unverified"),
        meta=dict(episode.meta),
    )
    kind = rng.integers(0, 3)
    if kind == 0:  # idle frames left untrimmed at the start
        from dataclasses import replace
        obs0 = ep.frames[0][0]
        shift = int(rng.integers(6, 15))
        pad = [(replace(obs0, timestamp=i), ActionVector.zero()) for i in range(shift)]
        ep.frames = pad + [(replace(o, timestamp=o.timestamp + shift), a)
                           for o, a in ep.frames]
        for s in ep.sub_steps:
            s.start_frame += shift
            s.end_frame += shift
        for f in ep.failures:
            f.frame += shift
    elif kind == 1:  # sensor noise on the recorded actions
        noisy = []
        for obs, act in ep.frames:
            delta = act.delta + rng.normal(0, 0.25, size=3).astype(np.float32)
            noisy.append((obs, ActionVector(np.clip(delta, -1, 1))))
        ep.frames = noisy
    else:  # truncated before task completion
        keep = max(2, int(len(ep.frames) * 0.5))
        ep.frames = ep.frames[:keep]
        ep.sub_steps = [s for s in ep.sub_steps if s.end_frame < keep]
        ep.failures = [f for f in ep.failures if f.frame < keep]
        ep.meta["success"] = "0"
    return ep


def generate_defective_dataset(root: Path, n_episodes: int, seed: int,
                               overwrite: bool = False) -> list[Path]:
    """Same tasks/seeds as generate_dataset, but every episode passes through
    inject_defects — an equal-size unverified training set."""
    root = Path(root)
    paths = []
    for i in range(n_episodes):
        ep_seed = derive_seed(seed, "episode", i)
        skill = SKILLS[i % len(SKILLS)]
        paraphrase = derive_seed(seed, "paraphrase", i) % 3
        task = world.sample_task(ep_seed, skill, paraphrase=paraphrase)
        episode = world.generate_episode(ep_seed, task,
                                         spawn_region=TRAIN_SPAWN_REGION)
        paths.append(store.write_episode(inject_defects(episode, seed), root,
                                         overwrite=overwrite))
    return paths


# ---------------------------------------------------------------------------
# Full pipeline training


@dataclass
class TrainBudget:
    """Step/epoch caps sized for a single desktop CPU core."""
    lam_epochs: int = 6
    lam_batch: int = 64
    lam_steps_per_epoch: Optional[int] = 120
    joint_epochs: int = 6
    joint_batch: int = 32
    joint_steps_per_epoch: Optional[int] = 120
    lr: float = 1e-3


@dataclass
class PipelineConfig:
    lam: LamConfig = field(default_factory=LamConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    budget: TrainBudget = field(default_factory=TrainBudget)


def train_full_pipeline(episodes: list[Episode], seed: int,
                        cfg: Optional[PipelineConfig] = None,
                        out_dir: Optional[Path] = None) -> tuple[GoPolicy, dict]:
    """Stage 1 then joint Stages 2+3 from one seed; optionally checkpoints."""
    cfg = cfg or PipelineConfig()
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
    b = cfg.budget
    lam_hist = train_lam(
        episodes, cfg.lam, epochs=b.lam_epochs, batch_size=b.lam_batch,
        lr=b.lr, seed=derive_seed(seed, "stage1"),
        max_steps_per_epoch=b.lam_steps_per_epoch,
        out_path=None if out_dir is None else Path(out_dir) / "lam.ckpt")
    joint_hist = joint_train(
        episodes, lam_hist["model"], cfg.backbone, cfg.diffusion, cfg.policy,
        epochs=b.joint_epochs, batch_size=b.joint_batch, lr=b.lr,
        seed=derive_seed(seed, "stage23"),
        max_steps_per_epoch=b.joint_steps_per_epoch,
        out_path=None if out_dir is None else Path(out_dir) / "policy.ckpt")
    history = {"lam": {k: v for k, v in lam_hist.items() if k != "model"},
               "joint": {k: v for k, v in joint_hist.items() if k != "policy"}}
    return joint_hist["policy"], history


def make_trainer(cfg: Optional[PipelineConfig] = None):
    """Manifest-list trainer for run_scaling_study / quality_ablation."""
    def trainer(manifests: list[Path], seed: int) -> PolicyAgent:
        episodes = [trim_idle_frames(ep) for ep in load_episodes(manifests)]
        policy, _ = train_full_pipeline(episodes, seed, cfg)
        return PolicyAgent(policy, use_planner=True, method="full")
    return trainer
