"""Episode container, validation, idle trimming and dataset statistics."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .world import ActionVector, Observation

logger = logging.getLogger(__name__)

DURATION_BUCKETS = (0.0, 5.0, 20.0, 30.0, 60.0)
QUALITY_STATUSES = ("verified", "unverified", "rejected")


@dataclass
class SubStepAnnotation:
    start_frame: int
    end_frame: int
    skill: str
    instruction: str


@dataclass
class FailureAnnotation:
    frame: int
    reason: str


@dataclass
class QualityFlag:
    status: str = "unverified"

    def __post_init__(self) -> None:
        if self.status not in QUALITY_STATUSES:
            raise ValueError(f"invalid quality status {self.status!r}")


@dataclass
class Episode:
    episode_id: str
    frames: list[tuple[Observation, ActionVector]]
    frame_rate_hz: float
    task_instruction: str
    sub_steps: list[SubStepAnnotation]
    failures: list[FailureAnnotation]
    quality: QualityFlag
    meta: dict[str, str] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def duration_s(self) -> float:
        return len(self.frames) / self.frame_rate_hz


def episodes_equal(a: Episode, b: Episode) -> bool:
    """Bit-exact equality on every field, including annotation order."""
    if (a.episode_id != b.episode_id or a.frame_rate_hz != b.frame_rate_hz
            or a.task_instruction != b.task_instruction
            or a.quality.status != b.quality.status or a.meta != b.meta
            or len(a.frames) != len(b.frames)
            or a.sub_steps != b.sub_steps or a.failures != b.failures):
        return False
    for (oa, aa), (ob, ab) in zip(a.frames, b.frames):
        if oa.timestamp != ob.timestamp:
            return False
        if not (np.array_equal(oa.head_view, ob.head_view)
                and np.array_equal(oa.left_wrist_view, ob.left_wrist_view)
                and np.array_equal(oa.right_wrist_view, ob.right_wrist_view)
                and np.array_equal(oa.proprio, ob.proprio)
                and np.array_equal(aa.delta, ab.delta)):
            return False
    return True


# ---------------------------------------------------------------------------
# Validation


@dataclass
class Violation:
    kind: str
    detail: str


@dataclass
class ValidationReport:
    episode_id: str
    violations: list[Violation] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def add(self, kind: str, detail: str) -> None:
        self.violations.append(Violation(kind, detail))


def validate_episode(episode: Episode) -> ValidationReport:
    """Report-based integrity check; never raises on bad content."""
    report = ValidationReport(episode.episode_id)
    n = len(episode.frames)
    timestamps = [obs.timestamp for obs, _ in episode.frames]

    monotone = all(b > a for a, b in zip(timestamps, timestamps[1:]))
    if not monotone:
        for i, (a, b) in enumerate(zip(timestamps, timestamps[1:])):
            if b <= a:
                report.add("non_monotone_timestamp",
                           f"frame {i + 1}: timestamp {b} follows {a}")
    elif timestamps:
        expected = set(range(timestamps[0], timestamps[-1] + 1))
        for missing in sorted(expected - set(timestamps)):
            report.add("missing_frame", f"frame index {missing} absent")
        if timestamps[0] != 0:
            report.add("missing_frame",
                       f"frame indices 0..{timestamps[0] - 1} absent")

    prev_end = -1
    for s in episode.sub_steps:
        if s.start_frame > s.end_frame:
            report.add("annotation_out_of_bounds",
                       f"sub-step [{s.start_frame}, {s.end_frame}] inverted")
        if s.start_frame < 0 or s.end_frame > n - 1:
            report.add("annotation_out_of_bounds",
                       f"sub-step [{s.start_frame}, {s.end_frame}] outside [0, {n - 1}]")
        if s.start_frame <= prev_end:
            report.add("overlapping_sub_steps",
                       f"sub-step starting at {s.start_frame} overlaps previous end {prev_end}")
        prev_end = max(prev_end, s.end_frame)

    for f in episode.failures:
        if f.frame < 0 or f.frame > n - 1:
            report.add("annotation_out_of_bounds",
                       f"failure at frame {f.frame} outside [0, {n - 1}]")

    for i, (obs, action) in enumerate(episode.frames):
        for name, img in (("head", obs.head_view), ("left_wrist", obs.left_wrist_view),
                          ("right_wrist", obs.right_wrist_view)):
            lo, hi = float(img.min()), float(img.max())
            if lo < 0.0 or hi > 1.0:
                report.add("pixel_out_of_range",
                           f"frame {i} {name}: values in [{lo:.4g}, {hi:.4g}]")
        if np.abs(action.delta).max() > 1.0:
            report.add("action_out_of_range",
                       f"frame {i}: action magnitude {np.abs(action.delta).max():.4g}")
    return report


# ---------------------------------------------------------------------------
# Idle-frame trimming


def _is_idle(action: ActionVector, eps: float) -> bool:
    return float(np.abs(action.delta).max()) < eps


def trim_idle_frames(episode: Episode, eps: float = 1e-3, min_run: int = 5) -> Episode:
    """Drop maximal leading/trailing idle runs of length >= min_run.

    Interior pauses are kept. Annotations are re-indexed; annotations that
    fall entirely inside a removed run are dropped with a warning. If every
    frame is idle, a single-frame episode flagged degenerate is returned.
    """
    if eps <= 0.0:
        raise ValueError("eps must be positive")
    if min_run < 1:
        raise ValueError("min_run must be >= 1")
    n = len(episode.frames)
    lead = 0
    while lead < n and _is_idle(episode.frames[lead][1], eps):
        lead += 1
    if lead == n:
        logger.warning("episode %s: all frames idle; returning degenerate episode",
                       episode.episode_id)
        obs, action = episode.frames[0]
        meta = dict(episode.meta)
        meta["degenerate"] = "1"
        return replace(episode, frames=[(replace(obs, timestamp=0), action)],
                       sub_steps=[], failures=[], meta=meta)

    tail = 0
    while tail < n and _is_idle(episode.frames[n - 1 - tail][1], eps):
        tail += 1
    if lead < min_run:
        lead = 0
    if tail < min_run:
        tail = 0
    if lead == 0 and tail == 0:
        return episode

    lo, hi = lead, n - tail  # keep frames [lo, hi)
    new_frames = [(replace(obs, timestamp=i), action)
                  for i, (obs, action) in enumerate(episode.frames[lo:hi])]

    sub_steps = []
    for s in episode.sub_steps:
        start, end = s.start_frame - lo, s.end_frame - lo
        if end < 0 or start > hi - lo - 1:
            logger.warning("episode %s: sub-step %r dropped by idle trim",
                           episode.episode_id, s.instruction)
            continue
        sub_steps.append(replace(s, start_frame=max(start, 0),
                                 end_frame=min(end, hi - lo - 1)))
    failures = []
    for f in episode.failures:
        frame = f.frame - lo
        if frame < 0 or frame > hi - lo - 1:
            logger.warning("episode %s: failure annotation at %d dropped by idle trim",
                           episode.episode_id, f.frame)
            continue
        failures.append(replace(f, frame=frame))
    return replace(episode, frames=new_frames, sub_steps=sub_steps, failures=failures)


# ---------------------------------------------------------------------------
# Dataset statistics


@dataclass
class DatasetStats:
    trajectory_count: int
    total_duration_s: float
    skill_histogram: dict[str, int]
    duration_histogram: dict[str, int]
    scene_histogram: dict[str, int]
    unreadable: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "trajectory_count": self.trajectory_count,
            "total_duration_s": self.total_duration_s,
            "skill_histogram": dict(sorted(self.skill_histogram.items())),
            "duration_histogram": self.duration_histogram,
            "scene_histogram": dict(sorted(self.scene_histogram.items())),
            "unreadable": self.unreadable,
        }


def duration_bucket(seconds: float) -> str:
    edges = list(DURATION_BUCKETS) + [float("inf")]
    for lo, hi in zip(edges, edges[1:]):
        if lo <= seconds < hi:
            return f"[{lo:g},{hi:g})" if hi != float("inf") else f"[{lo:g},inf)"
    raise ValueError(f"negative duration {seconds}")


def empty_duration_histogram() -> dict[str, int]:
    edges = list(DURATION_BUCKETS) + [float("inf")]
    out = {}
    for lo, hi in zip(edges, edges[1:]):
        key = f"[{lo:g},{hi:g})" if hi != float("inf") else f"[{lo:g},inf)"
        out[key] = 0
    return out
