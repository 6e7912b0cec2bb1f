"""Deterministic 2-D tabletop manipulation world.

Coordinates live in the unit square; the gripper is a point effector that
can translate, grasp the nearest object within reach, and push objects on
contact. Observations are flat-shaded multi-view renders: a 64x64 head view
plus two 32x32 wrist crops taken directly from the head render, so crops
commute with rendering by construction.

Everything is a pure function of (seed, task): resets, scripted
demonstrations and episode generation are bitwise reproducible.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .seeding import derive_seed

HEAD_RES = 64
WRIST_RES = 32
CHANNELS = 3

GRASP_RADIUS = 0.08
CONTACT_RADIUS = 0.05
MAX_STEP = 0.08
OBJECT_HALF = 0.045
DEFAULT_GOAL_RADIUS = 0.08
STACK_RADIUS = 0.06
BEHIND_DIST = 0.11

SKILLS = ("pick", "place", "push", "stack")

PALETTE = {
    "red": (220, 50, 47),
    "green": (60, 180, 75),
    "blue": (50, 110, 220),
    "yellow": (230, 200, 40),
    "purple": (150, 70, 190),
    "orange": (240, 130, 30),
}
_GRIPPER_COLOR = (255, 255, 255)
_GOAL_COLOR = (160, 160, 160)
_BG_COLOR = (32, 32, 32)

INSTRUCTION_TEMPLATES = {
    "pick": [
        "pick the {c} block and place it in the goal",
        "put the {c} block into the goal region",
        "move the {c} block to the goal",
    ],
    "place": [
        "place the held {c} block in the goal",
        "put down the {c} block in the goal region",
        "lower the {c} block into the goal",
    ],
    "push": [
        "push the {c} block into the goal",
        "slide the {c} block to the goal region",
        "shove the {c} block into the goal",
    ],
    "stack": [
        "stack the {c} block on the {b} block",
        "put the {c} block on top of the {b} block",
        "set the {c} block onto the {b} block",
    ],
}


@dataclass
class TaskSpec:
    skill: str
    instruction: str
    target_object: int
    goal_region: tuple[float, float, float]  # (x, y, radius)
    max_steps: int = 80

    def validate(self) -> None:
        if self.skill not in SKILLS:
            raise ValueError(f"unknown skill {self.skill!r}")
        gx, gy, gr = self.goal_region
        if not (0.0 <= gx <= 1.0 and 0.0 <= gy <= 1.0):
            raise ValueError(f"goal_region center ({gx}, {gy}) outside table")
        if gr <= 0.0:
            raise ValueError("goal_region radius must be positive")
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")


@dataclass
class WorldState:
    object_poses: np.ndarray  # (n, 2) float64
    object_kinds: list[str]
    gripper_pose: np.ndarray  # (2,) float64
    gripper_closed: bool
    held_object: Optional[int]
    object_colors: list[str]
    seed: int

    def copy(self) -> "WorldState":
        return WorldState(
            object_poses=self.object_poses.copy(),
            object_kinds=list(self.object_kinds),
            gripper_pose=self.gripper_pose.copy(),
            gripper_closed=self.gripper_closed,
            held_object=self.held_object,
            object_colors=list(self.object_colors),
            seed=self.seed,
        )


@dataclass
class Observation:
    head_view: np.ndarray  # (3, 64, 64) float32 in [0, 1]
    left_wrist_view: np.ndarray  # (3, 32, 32)
    right_wrist_view: np.ndarray  # (3, 32, 32)
    proprio: np.ndarray  # (3,) float32: gripper x, y, closed flag
    timestamp: int


@dataclass
class ActionVector:
    delta: np.ndarray  # (3,) float32: dx, dy, dgrip, each in [-1, 1]

    @staticmethod
    def make(dx: float, dy: float, dgrip: float) -> "ActionVector":
        return ActionVector(np.clip(np.array([dx, dy, dgrip], dtype=np.float32), -1.0, 1.0))

    @staticmethod
    def zero() -> "ActionVector":
        return ActionVector(np.zeros(3, dtype=np.float32))


def scene_colors(seed: int, n: int) -> list[str]:
    """Per-seed object color assignment, shared by sample_task and reset."""
    rng = np.random.default_rng(derive_seed(seed, "colors"))
    names = list(PALETTE)
    perm = rng.permutation(len(names))
    return [names[perm[i % len(names)]] for i in range(n)]


def sample_task(seed: int, skill: str, paraphrase: int = 0,
                goal_radius: float = DEFAULT_GOAL_RADIUS) -> TaskSpec:
    """Sample a task compatible with ``reset(seed, task)``."""
    if skill not in SKILLS:
        raise ValueError(f"unknown skill {skill!r}")
    rng = np.random.default_rng(derive_seed(seed, "task", skill))
    goal = rng.uniform(0.2, 0.8, size=2)
    colors = scene_colors(seed, 2)
    template = INSTRUCTION_TEMPLATES[skill][paraphrase % len(INSTRUCTION_TEMPLATES[skill])]
    instruction = template.format(c=colors[0], b=colors[1])
    return TaskSpec(
        skill=skill,
        instruction=instruction,
        target_object=0,
        goal_region=(float(goal[0]), float(goal[1]), goal_radius),
        max_steps=80,
    )


def _sample_point(rng: np.random.Generator, region: tuple[float, float, float, float],
                  avoid: list[tuple[np.ndarray, float]]) -> np.ndarray:
    x0, x1, y0, y1 = region
    for _ in range(256):
        p = np.array([rng.uniform(x0, x1), rng.uniform(y0, y1)])
        if all(np.linalg.norm(p - q) >= d for q, d in avoid):
            return p
    raise RuntimeError("could not place object; spawn region too constrained")


def reset(seed: int, task: TaskSpec, n_distractors: int = 0,
          spawn_region: Optional[tuple[float, float, float, float]] = None,
          ) -> tuple[WorldState, Observation]:
    """Build the initial state for (seed, task) and render it."""
    if seed < 0:
        raise ValueError("seed must be non-negative")
    task.validate()
    rng = np.random.default_rng(derive_seed(seed, "reset", task.skill))
    region = spawn_region if spawn_region is not None else (0.15, 0.85, 0.15, 0.85)
    gx, gy, gr = task.goal_region
    goal = np.array([gx, gy])

    n_objects = 2 if task.skill == "stack" else 1
    poses = []
    kinds = []
    # Target must not start inside (or trivially near) the goal.
    avoid: list[tuple[np.ndarray, float]] = [(goal, gr + 0.12)]
    target = _sample_point(rng, region, avoid)
    poses.append(target)
    kinds.append("square")
    if task.skill == "stack":
        # Base block sits at the goal center; stacking is delivery onto it.
        poses.append(goal.copy())
        kinds.append("square")
    avoid += [(p, 0.18) for p in poses]
    colors = scene_colors(seed, n_objects + n_distractors)
    for i in range(n_distractors):
        p = _sample_point(rng, region, avoid)
        poses.append(p)
        kinds.append("circle")
        avoid.append((p, 0.18))

    if task.skill == "place":
        gripper = poses[0].copy()
        held: Optional[int] = 0
        closed = True
    else:
        gripper = _sample_point(rng, (0.1, 0.9, 0.1, 0.9), [(p, 0.16) for p in poses])
        held = None
        closed = False

    state = WorldState(
        object_poses=np.array(poses, dtype=np.float64),
        object_kinds=kinds,
        gripper_pose=gripper.astype(np.float64),
        gripper_closed=closed,
        held_object=held,
        object_colors=colors,
        seed=seed,
    )
    return state, render(state, task, timestamp=0)


def step(state: WorldState, action: ActionVector, task: TaskSpec,
         timestamp: int = 0) -> tuple[WorldState, Observation]:
    """Advance one control step; all actions are clamped, never rejected."""
    delta = np.clip(np.asarray(action.delta, dtype=np.float64), -1.0, 1.0)
    new = state.copy()
    new.gripper_pose = np.clip(new.gripper_pose + delta[:2], 0.0, 1.0)

    dgrip = float(delta[2])
    if dgrip > 0.5 and not new.gripper_closed:
        new.gripper_closed = True
        dists = np.linalg.norm(new.object_poses - new.gripper_pose, axis=1)
        nearest = int(np.argmin(dists))
        if dists[nearest] <= GRASP_RADIUS:
            new.held_object = nearest
    elif dgrip < -0.5 and new.gripper_closed:
        new.gripper_closed = False
        new.held_object = None

    if new.held_object is not None:
        new.object_poses[new.held_object] = new.gripper_pose.copy()

    # Contact pushing: an open, moving gripper displaces objects radially.
    moved = float(np.linalg.norm(delta[:2])) > 1e-9
    for i in range(len(new.object_poses)):
        if i == new.held_object or new.gripper_closed or not moved:
            continue
        off = new.object_poses[i] - new.gripper_pose
        dist = float(np.linalg.norm(off))
        if dist < CONTACT_RADIUS:
            if dist < 1e-9:
                direction = delta[:2]
                norm = float(np.linalg.norm(direction))
                direction = direction / norm if norm > 1e-9 else np.array([1.0, 0.0])
            else:
                direction = off / dist
            new.object_poses[i] = np.clip(
                new.gripper_pose + direction * CONTACT_RADIUS, 0.0, 1.0)

    return new, render(new, task, timestamp=timestamp)


# ---------------------------------------------------------------------------
# Rendering


def _draw_square(img: np.ndarray, center: np.ndarray, half_px: int,
                 color: tuple[int, int, int], filled: bool = True) -> None:
    res = img.shape[0]
    cy = int(np.clip(round(center[1] * (res - 1)), 0, res - 1))
    cx = int(np.clip(round(center[0] * (res - 1)), 0, res - 1))
    y0, y1 = max(0, cy - half_px), min(res - 1, cy + half_px)
    x0, x1 = max(0, cx - half_px), min(res - 1, cx + half_px)
    if filled:
        img[y0:y1 + 1, x0:x1 + 1] = color
    else:
        img[y0, x0:x1 + 1] = color
        img[y1, x0:x1 + 1] = color
        img[y0:y1 + 1, x0] = color
        img[y0:y1 + 1, x1] = color


def _draw_disc(img: np.ndarray, center: np.ndarray, radius_px: float,
               color: tuple[int, int, int]) -> None:
    res = img.shape[0]
    cy = center[1] * (res - 1)
    cx = center[0] * (res - 1)
    yy, xx = np.ogrid[:res, :res]
    mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= radius_px ** 2
    img[mask] = color


def _draw_ring(img: np.ndarray, center: np.ndarray, radius_px: float,
               color: tuple[int, int, int]) -> None:
    res = img.shape[0]
    cy = center[1] * (res - 1)
    cx = center[0] * (res - 1)
    yy, xx = np.ogrid[:res, :res]
    d = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
    img[np.abs(d - radius_px) <= 0.75] = color


def render_head(state: WorldState, task: TaskSpec) -> np.ndarray:
    """Flat-shaded 64x64 head view as uint8 HxWx3."""
    img = np.empty((HEAD_RES, HEAD_RES, 3), dtype=np.uint8)
    img[:] = _BG_COLOR
    gx, gy, gr = task.goal_region
    _draw_ring(img, np.array([gx, gy]), gr * (HEAD_RES - 1), _GOAL_COLOR)
    half_px = max(1, int(round(OBJECT_HALF * (HEAD_RES - 1))))
    for i, pose in enumerate(state.object_poses):
        color = PALETTE[state.object_colors[i]]
        if state.object_kinds[i] == "circle":
            _draw_disc(img, pose, half_px, color)
        else:
            _draw_square(img, pose, half_px, color)
    if state.gripper_closed:
        _draw_square(img, state.gripper_pose, 2, _GRIPPER_COLOR, filled=True)
    else:
        _draw_square(img, state.gripper_pose, 3, _GRIPPER_COLOR, filled=False)
    return img


def _wrist_crop(head: np.ndarray, state: WorldState, col_offset: int) -> np.ndarray:
    res = head.shape[0]
    cy = int(np.clip(round(state.gripper_pose[1] * (res - 1)), 0, res - 1))
    cx = int(np.clip(round(state.gripper_pose[0] * (res - 1)), 0, res - 1)) + col_offset
    half = WRIST_RES // 2
    y0 = int(np.clip(cy - half, 0, res - WRIST_RES))
    x0 = int(np.clip(cx - half, 0, res - WRIST_RES))
    return head[y0:y0 + WRIST_RES, x0:x0 + WRIST_RES]


def _to_chw_float(img: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(img.transpose(2, 0, 1)).astype(np.float32) / 255.0


def render(state: WorldState, task: TaskSpec, timestamp: int = 0) -> Observation:
    head = render_head(state, task)
    left = _wrist_crop(head, state, -6)
    right = _wrist_crop(head, state, 6)
    proprio = np.array(
        [state.gripper_pose[0], state.gripper_pose[1], 1.0 if state.gripper_closed else 0.0],
        dtype=np.float32)
    return Observation(
        head_view=_to_chw_float(head),
        left_wrist_view=_to_chw_float(left),
        right_wrist_view=_to_chw_float(right),
        proprio=proprio,
        timestamp=timestamp,
    )


# ---------------------------------------------------------------------------
# Scripted expert


def _capped(vec: np.ndarray, cap: float = MAX_STEP) -> np.ndarray:
    norm = float(np.linalg.norm(vec))
    if norm <= cap or norm < 1e-12:
        return vec
    return vec * (cap / norm)


def _goal_center(task: TaskSpec) -> np.ndarray:
    return np.array([task.goal_region[0], task.goal_region[1]])


def scripted_policy(state: WorldState, task: TaskSpec, noise: float = 0.0,
                    rng: Optional[np.random.Generator] = None) -> ActionVector:
    """Greedy waypoint controller completing the task within max_steps."""
    action = _scripted_core(state, task)
    if noise > 0.0:
        if rng is None:
            raise ValueError("action noise requires an rng")
        jitter = rng.normal(0.0, noise, size=2).astype(np.float32)
        delta = action.delta.copy()
        delta[:2] = np.clip(delta[:2] + jitter, -1.0, 1.0)
        action = ActionVector(delta)
    return action


def _scripted_core(state: WorldState, task: TaskSpec) -> ActionVector:
    if success_score(state, task) >= 1.0:
        return ActionVector.zero()
    skill = task.skill
    goal = _goal_center(task)
    goal_r = task.goal_region[2]
    target = state.object_poses[task.target_object]
    gripper = state.gripper_pose

    if skill == "push":
        return _scripted_push(state, task)

    release_r = STACK_RADIUS * 0.5 if skill == "stack" else goal_r * 0.5
    if state.held_object == task.target_object:
        to_goal = goal - gripper
        if float(np.linalg.norm(to_goal)) > release_r:
            d = _capped(to_goal)
            return ActionVector.make(d[0], d[1], 0.0)
        return ActionVector.make(0.0, 0.0, -1.0)

    # Not holding the target: approach and grasp.
    if state.gripper_closed:
        return ActionVector.make(0.0, 0.0, -1.0)
    to_obj = target - gripper
    dist = float(np.linalg.norm(to_obj))
    # Grasp trigger sits above the contact radius so the approach can never
    # push the block ahead of the gripper indefinitely.
    if dist > CONTACT_RADIUS + 0.015:
        standoff = target - (to_obj / dist) * (CONTACT_RADIUS + 0.01)
        d = _capped(standoff - gripper)
        return ActionVector.make(d[0], d[1], 0.0)
    return ActionVector.make(0.0, 0.0, 1.0)


def _scripted_push(state: WorldState, task: TaskSpec) -> ActionVector:
    """Orbit to the far side of the block, then nudge it toward the goal."""
    goal = _goal_center(task)
    obj = state.object_poses[task.target_object]
    gripper = state.gripper_pose
    if state.gripper_closed:
        return ActionVector.make(0.0, 0.0, -1.0)

    to_goal = goal - obj
    dist_goal = float(np.linalg.norm(to_goal))
    u = to_goal / dist_goal if dist_goal > 1e-9 else np.array([1.0, 0.0])

    away = gripper - obj
    dist_obj = float(np.linalg.norm(away))
    aligned = (
        CONTACT_RADIUS * 0.5 < dist_obj <= BEHIND_DIST + 0.02
        and float(np.dot(-away / dist_obj, u)) > 0.95
    )
    if aligned:
        d = _capped(u, 0.035)
        return ActionVector.make(d[0], d[1], 0.0)

    if dist_obj > BEHIND_DIST + 0.04:
        # Approach, but stop on the orbit circle.
        target = obj + (away / dist_obj) * BEHIND_DIST if dist_obj > 1e-9 else obj - u * BEHIND_DIST
        d = _capped(target - gripper)
        return ActionVector.make(d[0], d[1], 0.0)

    # Orbit around the block toward the point behind it (opposite the goal).
    theta = math.atan2(away[1], away[0]) if dist_obj > 1e-9 else math.atan2(-u[1], -u[0])
    theta_target = math.atan2(-u[1], -u[0])
    diff = (theta_target - theta + math.pi) % (2.0 * math.pi) - math.pi
    dtheta = float(np.clip(diff, -0.45, 0.45))
    new_pos = obj + BEHIND_DIST * np.array([math.cos(theta + dtheta), math.sin(theta + dtheta)])
    d = _capped(np.clip(new_pos, 0.0, 1.0) - gripper, 0.06)
    return ActionVector.make(d[0], d[1], 0.0)


# ---------------------------------------------------------------------------
# Scoring


def success_score(state: WorldState, task: TaskSpec) -> float:
    """Milestone-based partial credit in [0, 1]; larger milestones win."""
    skill = task.skill
    goal = _goal_center(task)
    goal_r = task.goal_region[2]
    target_pose = state.object_poses[task.target_object]
    holding = state.held_object == task.target_object
    d_obj_goal = float(np.linalg.norm(target_pose - goal))
    d_grip_obj = float(np.linalg.norm(state.gripper_pose - target_pose))

    if skill in ("pick", "place"):
        if d_obj_goal <= goal_r and not holding:
            return 1.0
        if holding and d_obj_goal <= 2.0 * goal_r:
            return 0.75
        if holding:
            return 0.5
        if skill == "pick" and d_grip_obj <= 2.0 * GRASP_RADIUS:
            return 0.25
        return 0.0
    if skill == "push":
        if d_obj_goal <= goal_r:
            return 1.0
        if d_obj_goal <= 2.0 * goal_r:
            return 0.5
        if d_grip_obj <= 0.25:
            return 0.25
        return 0.0
    if skill == "stack":
        base = state.object_poses[1]
        d_tb = float(np.linalg.norm(target_pose - base))
        if d_tb <= STACK_RADIUS and not holding:
            return 1.0
        if holding and d_tb <= 2.0 * STACK_RADIUS:
            return 0.75
        if holding:
            return 0.5
        if d_grip_obj <= 2.0 * GRASP_RADIUS:
            return 0.25
        return 0.0
    raise ValueError(f"unknown skill {skill!r}")


# ---------------------------------------------------------------------------
# Episode generation


def _phase_label(state: WorldState, task: TaskSpec) -> str:
    if task.skill == "push":
        return "push" if success_score(state, task) < 1.0 else "done"
    if success_score(state, task) >= 1.0:
        return "done"
    if state.held_object == task.target_object:
        return "transport"
    return "approach"


def generate_episode(seed: int, task: TaskSpec, inject_failure: bool = False,
                     frame_rate_hz: float = 10.0, n_distractors: int = 0,
                     spawn_region: Optional[tuple[float, float, float, float]] = None,
                     noise: float = 0.0):
    """Roll the scripted expert to completion and package the trajectory."""
    from .episodes import Episode, FailureAnnotation, QualityFlag, SubStepAnnotation

    state, obs = reset(seed, task, n_distractors=n_distractors, spawn_region=spawn_region)
    rng = np.random.default_rng(derive_seed(seed, "episode-noise"))
    frames: list[tuple[Observation, ActionVector]] = []
    phases: list[str] = []
    failures: list[FailureAnnotation] = []
    drop_pending = inject_failure and task.skill in ("pick", "place", "stack")
    transport_run = 0

    for t in range(task.max_steps):
        if success_score(state, task) >= 1.0:
            break
        phase = _phase_label(state, task)
        action = scripted_policy(state, task, noise=noise, rng=rng if noise > 0 else None)
        if drop_pending and phase == "transport":
            transport_run += 1
            if transport_run == 3:
                action = ActionVector.make(0.0, 0.0, -1.0)
                failures.append(FailureAnnotation(frame=t, reason="object dropped in transit"))
                drop_pending = False
        frames.append((obs, action))
        phases.append(phase)
        state, obs = step(state, action, task, timestamp=t + 1)

    final_score = success_score(state, task)
    frames.append((obs, ActionVector.zero()))
    phases.append("done" if final_score >= 1.0 else _phase_label(state, task))

    sub_steps = []
    start = 0
    for i in range(1, len(phases) + 1):
        if i == len(phases) or phases[i] != phases[start]:
            sub_steps.append(SubStepAnnotation(
                start_frame=start,
                end_frame=i - 1,
                skill=phases[start],
                instruction=f"{phases[start]}: {task.instruction}",
            ))
            start = i

    episode_id = f"ep-{task.skill}-{seed:08d}"
    return Episode(
        episode_id=episode_id,
        frames=frames,
        frame_rate_hz=frame_rate_hz,
        task_instruction=task.instruction,
        sub_steps=sub_steps,
        failures=failures,
        quality=QualityFlag("verified"),
        meta={
            "skill": task.skill,
            "scene": f"tabletop-{seed % 8}",
            "seed": str(seed),
            "success": "1" if final_score >= 1.0 else "0",
            "final_score": f"{final_score:.6f}",
        },
    )
