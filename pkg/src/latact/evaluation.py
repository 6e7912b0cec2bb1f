"""Evaluation harness: rollouts, scoring, scaling analysis, quality ablation.

Scores are normalized per-episode task scores in [0, 1] with milestone
partial credit, averaged over a fixed number of rollouts per (task,
scenario, method). The scaling analysis fits score = a * N^b by least
squares in log-log space and reports the Pearson correlation of the logs.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import world
from .seeding import derive_seed
from .world import ActionVector, Observation, TaskSpec, WorldState

logger = logging.getLogger(__name__)

SCENARIO_KINDS = ("seen", "position-shift", "visual-distractor", "language-variant")

# Training data is generated on the left portion of the table; the
# position-shift scenario spawns in the complementary strip.
TRAIN_SPAWN_REGION = (0.15, 0.62, 0.15, 0.85)
SHIFT_SPAWN_REGION = (0.62, 0.85, 0.15, 0.85)


@dataclass
class ScenarioSpec:
    kind: str = "seen"
    spawn_region: Optional[tuple[float, float, float, float]] = None
    n_distractors: int = 0
    paraphrase: int = 0

    def __post_init__(self) -> None:
        if self.kind not in SCENARIO_KINDS:
            raise ValueError(f"unknown scenario kind {self.kind!r}")

    @property
    def name(self) -> str:
        return self.kind


def default_scenarios() -> list["ScenarioSpec"]:
    return [
        ScenarioSpec("seen", spawn_region=TRAIN_SPAWN_REGION),
        ScenarioSpec("position-shift", spawn_region=SHIFT_SPAWN_REGION),
        ScenarioSpec("visual-distractor", spawn_region=TRAIN_SPAWN_REGION,
                     n_distractors=2),
        ScenarioSpec("language-variant", spawn_region=TRAIN_SPAWN_REGION,
                     paraphrase=1),
    ]


def scenario_setup(scenario: ScenarioSpec, seed: int, skill: str):
    """Task and reset options realizing the scenario for one rollout."""
    task = world.sample_task(seed, skill, paraphrase=scenario.paraphrase)
    kwargs = {
        "n_distractors": scenario.n_distractors,
        "spawn_region": scenario.spawn_region or TRAIN_SPAWN_REGION,
    }
    return task, kwargs


# ---------------------------------------------------------------------------
# Agents


class ScriptedAgent:
    """Privileged expert; the evaluation upper bound."""

    method = "scripted"

    def begin(self, seed: int, task: TaskSpec) -> None:
        pass

    def act(self, state: WorldState, obs: Observation, task: TaskSpec) -> ActionVector:
        return world.scripted_policy(state, task)


class RandomAgent:
    method = "random"

    def begin(self, seed: int, task: TaskSpec) -> None:
        self._rng = np.random.default_rng(derive_seed(seed, "random-agent"))

    def act(self, state: WorldState, obs: Observation, task: TaskSpec) -> ActionVector:
        return ActionVector(self._rng.uniform(-1, 1, size=3).astype(np.float32))


class PolicyAgent:
    """Closed-loop wrapper around a trained policy: sample a chunk, execute
    the first replan_every actions, then re-plan."""

    def __init__(self, policy, use_planner: bool = True, method: Optional[str] = None):
        self.policy = policy
        self.use_planner = use_planner
        self.method = method or ("full" if use_planner else "no-planner")

    def begin(self, seed: int, task: TaskSpec) -> None:
        self._seed = seed
        self._buffer: list[np.ndarray] = []
        self._replans = 0

    def act(self, state: WorldState, obs: Observation, task: TaskSpec) -> ActionVector:
        if not self._buffer:
            chunk = self.policy.infer_action(
                obs, task.instruction,
                seed=derive_seed(self._seed, "chunk", self._replans),
                use_planner=self.use_planner)
            m = self.policy.policy_cfg.replan_every
            self._buffer = list(chunk[:m])
            self._replans += 1
        return ActionVector(np.asarray(self._buffer.pop(0), dtype=np.float32))


# ---------------------------------------------------------------------------
# Rollouts and reports


@dataclass
class RolloutRecord:
    task: str
    scenario: str
    method: str
    seed: int
    score: float
    flagged: bool = False


@dataclass
class EvalReport:
    records: list[RolloutRecord] = field(default_factory=list)
    n_rollouts: int = 10
    base_seed: int = 0

    def mean_score(self, task: Optional[str] = None, scenario: Optional[str] = None,
                   method: Optional[str] = None) -> float:
        scores = self.scores(task, scenario, method)
        if not scores:
            raise ValueError("no matching rollout records")
        return sum(scores) / len(scores)

    def scores(self, task: Optional[str] = None, scenario: Optional[str] = None,
               method: Optional[str] = None) -> list[float]:
        return [r.score for r in self.records
                if (task is None or r.task == task)
                and (scenario is None or r.scenario == scenario)
                and (method is None or r.method == method)]

    def groups(self) -> list[tuple[str, str, str]]:
        return sorted({(r.task, r.scenario, r.method) for r in self.records})


def run_rollout(agent, task: TaskSpec, seed: int, reset_kwargs: dict) -> float:
    """One closed-loop episode; returns the final-state score."""
    state, obs = world.reset(seed, task, **reset_kwargs)
    agent.begin(seed, task)
    for t in range(task.max_steps):
        if world.success_score(state, task) >= 1.0:
            break
        action = agent.act(state, obs, task)
        state, obs = world.step(state, action, task, timestamp=t + 1)
    return world.success_score(state, task)


def evaluate(agents: dict[str, object], skills: list[str],
             scenarios: list[ScenarioSpec], n_rollouts: int = 10,
             base_seed: int = 0) -> EvalReport:
    """Score every (task, scenario, method) over n_rollouts episodes.

    Rollout i uses world seed base_seed + i. An agent failure mid-rollout
    scores 0 and is flagged; evaluation continues.
    """
    report = EvalReport(n_rollouts=n_rollouts, base_seed=base_seed)
    for skill in skills:
        for scenario in scenarios:
            for method, agent in agents.items():
                for i in range(n_rollouts):
                    seed = base_seed + i
                    task, kwargs = scenario_setup(scenario, seed, skill)
                    try:
                        score = run_rollout(agent, task, seed, kwargs)
                        flagged = False
                    except Exception:
                        logger.exception("rollout failed: %s/%s/%s seed %d",
                                         skill, scenario.name, method, seed)
                        score, flagged = 0.0, True
                    report.records.append(RolloutRecord(
                        task=skill, scenario=scenario.name, method=method,
                        seed=seed, score=float(score), flagged=flagged))
    report.records.sort(key=lambda r: (r.task, r.scenario, r.method, r.seed))
    return report


# ---------------------------------------------------------------------------
# Power-law scaling


@dataclass
class ScalingFit:
    points: list[tuple[float, float]]  # (trajectory_count, mean score)
    coefficient: float                 # a in score = a * N^b
    exponent: float                    # b
    pearson_r: float
    failures: list[str] = field(default_factory=list)


def fit_power_law(points: list[tuple[float, float]]) -> ScalingFit:
    """Least-squares line in (log N, log score) space."""
    if len(points) < 2:
        raise ValueError("need at least 2 points")
    if any(n <= 0 or s <= 0 for n, s in points):
        raise ValueError("power-law fit requires positive counts and scores")
    log_n = np.log(np.array([n for n, _ in points], dtype=np.float64))
    log_s = np.log(np.array([s for _, s in points], dtype=np.float64))
    b, log_a = np.polyfit(log_n, log_s, 1)
    if np.allclose(log_s, log_s.mean()) or np.allclose(log_n, log_n.mean()):
        r = 0.0
    else:
        r = float(np.corrcoef(log_n, log_s)[0, 1])
    return ScalingFit(points=list(points), coefficient=float(math.exp(log_a)),
                      exponent=float(b), pearson_r=r)


def subsample_episodes(items: list, fraction: float, seed: int) -> list:
    """Seeded whole-episode subsampling; fractions are prefix-nested."""
    if not (0.0 < fraction <= 1.0):
        raise ValueError("fraction must be in (0, 1]")
    rng = np.random.default_rng(derive_seed(seed, "subsample"))
    order = rng.permutation(len(items))
    keep = max(1, int(round(fraction * len(items))))
    return [items[i] for i in sorted(order[:keep])]


def run_scaling_study(manifests: list, trainer: Callable[[list, int], object],
                      skills: list[str], fractions: tuple[float, ...] = (0.1, 0.5, 1.0),
                      n_rollouts: int = 10, base_seed: int = 0,
                      seed: int = 0) -> tuple[ScalingFit, dict[float, EvalReport]]:
    """Train the pipeline per dataset fraction and fit the scaling curve.

    Subsampling is by whole episode, never by frame. A training failure at
    one fraction is recorded and the study continues.
    """
    if not manifests:
        raise ValueError("empty dataset")
    points: list[tuple[float, float]] = []
    reports: dict[float, EvalReport] = {}
    failures: list[str] = []
    scenarios = [ScenarioSpec("seen", spawn_region=TRAIN_SPAWN_REGION)]
    for fraction in sorted(fractions):
        subset = subsample_episodes(manifests, fraction, seed)
        try:
            agent = trainer(subset, derive_seed(seed, "scale-train", fraction))
        except Exception as exc:
            logger.exception("training failed at fraction %s", fraction)
            failures.append(f"fraction {fraction}: {exc}")
            continue
        report = evaluate({getattr(agent, "method", "policy"): agent}, skills,
                          scenarios, n_rollouts=n_rollouts, base_seed=base_seed)
        reports[fraction] = report
        points.append((float(len(subset)), report.mean_score()))
    fit = fit_power_law(points) if len(points) >= 2 else ScalingFit(
        points=points, coefficient=float("nan"), exponent=float("nan"),
        pearson_r=float("nan"))
    fit.failures = failures
    return fit, reports


# ---------------------------------------------------------------------------
# Data-quality ablation


@dataclass
class AblationReport:
    score_verified: float
    score_unverified: float
    report_verified: EvalReport
    report_unverified: EvalReport

    @property
    def delta(self) -> float:
        return self.score_verified - self.score_unverified


def quality_ablation(verified: list, unverified: list,
                     trainer: Callable[[list, int], object], skills: list[str],
                     n_rollouts: int = 10, base_seed: int = 0,
                     seed: int = 0) -> AblationReport:
    """Train one policy per set with identical seeds/steps, evaluate
    identically, report the verified-minus-unverified score delta."""
    if not verified or not unverified:
        raise ValueError("both manifest sets must be nonempty")
    sv, su = {str(m) for m in verified}, {str(m) for m in unverified}
    if sv != su and sv & su:  # identical sets are a valid (trivial) comparison
        raise ValueError(f"manifest sets partially overlap: {sorted(sv & su)[:3]}")
    scenarios = [ScenarioSpec("seen", spawn_region=TRAIN_SPAWN_REGION)]
    train_seed = derive_seed(seed, "ablation-train")
    reports = {}
    for name, manifests in (("verified", verified), ("unverified", unverified)):
        agent = trainer(manifests, train_seed)
        reports[name] = evaluate({getattr(agent, "method", "policy"): agent},
                                 skills, scenarios, n_rollouts=n_rollouts,
                                 base_seed=base_seed)
    return AblationReport(
        score_verified=reports["verified"].mean_score(),
        score_unverified=reports["unverified"].mean_score(),
        report_verified=reports["verified"],
        report_unverified=reports["unverified"],
    )


# ---------------------------------------------------------------------------
# Report emission


def emit_report(report: EvalReport, out_dir: Path,
                scaling: Optional[ScalingFit] = None) -> list[Path]:
    """Write the score table (17-significant-digit CSV) and plots."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []

    table = out_dir / "scores.csv"
    lines = ["task,scenario,method,seed,score"]
    for r in sorted(report.records, key=lambda r: (r.task, r.scenario, r.method, r.seed)):
        lines.append(f"{r.task},{r.scenario},{r.method},{r.seed},{r.score:.17g}")
    table.write_text("\n".join(lines) + "\n")
    written.append(table)

    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    groups = report.groups()
    fig, ax = plt.subplots(figsize=(max(6, len(groups) * 0.6), 4))
    labels = [f"{t}\n{s}\n{m}" for t, s, m in groups]
    means = [report.mean_score(t, s, m) for t, s, m in groups]
    ax.bar(range(len(groups)), means)
    ax.set_xticks(range(len(groups)))
    ax.set_xticklabels(labels, fontsize=6)
    ax.set_ylabel("mean normalized score")
    ax.set_ylim(0, 1.05)
    fig.tight_layout()
    bars = out_dir / "scores.png"
    fig.savefig(bars)
    plt.close(fig)
    written.append(bars)

    if scaling is not None and scaling.points:
        fig, ax = plt.subplots(figsize=(5, 4))
        ns = np.array([p[0] for p in scaling.points])
        ss = np.array([p[1] for p in scaling.points])
        ax.loglog(ns, ss, "o", label="measured")
        grid = np.geomspace(ns.min(), ns.max(), 50)
        ax.loglog(grid, scaling.coefficient * grid ** scaling.exponent, "-",
                  label=f"fit b={scaling.exponent:.3f}, r={scaling.pearson_r:.3f}")
        ax.set_xlabel("trajectories")
        ax.set_ylabel("mean score")
        ax.legend()
        fig.tight_layout()
        curve = out_dir / "scaling.png"
        fig.savefig(curve)
        plt.close(fig)
        written.append(curve)
    return written


def parse_report_csv(path: Path) -> EvalReport:
    """Inverse of the emit_report table, for round-trip checks."""
    lines = Path(path).read_text().strip().splitlines()
    records = []
    for line in lines[1:]:
        task, scenario, method, seed, score = line.split(",")
        records.append(RolloutRecord(task=task, scenario=scenario, method=method,
                                     seed=int(seed), score=float(score)))
    return EvalReport(records=records)
