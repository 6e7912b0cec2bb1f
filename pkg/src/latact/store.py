"""On-disk episode container.

Layout per episode, under a dataset root:

    <root>/<episode_id>/
        manifest.json     # id, rate, instruction, annotations, quality,
                          # meta, stream dims and per-blob sha256 checksums
        head.blob         # raw uint8 pixel frames, little-endian header
        left_wrist.blob
        right_wrist.blob
        lowdim.blob       # per-frame [proprio, action] rows, float32 LE

Pixels are stored as 8-bit; observations produced by the renderer are exact
multiples of 1/255, so read(write(e)) is bit-exact. No compression:
determinism first.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .episodes import (Episode, FailureAnnotation, QualityFlag, SubStepAnnotation,
                       validate_episode)
from .world import ActionVector, Observation

_MAGIC = b"LABL"
_VERSION = 1


class StoreError(Exception):
    pass


def _write_blob(path: Path, array: np.ndarray) -> str:
    """Write an array blob (uint8 or float32) and return its sha256 hex."""
    if array.dtype == np.uint8:
        kind = 0
    elif array.dtype == np.float32:
        kind = 1
    else:
        raise StoreError(f"unsupported blob dtype {array.dtype}")
    header = _MAGIC + struct.pack("<HHB", _VERSION, kind, array.ndim)
    header += struct.pack(f"<{array.ndim}I", *array.shape)
    payload = header + np.ascontiguousarray(array).tobytes()
    path.write_bytes(payload)
    return hashlib.sha256(payload).hexdigest()


def _read_blob(path: Path, checksum: str) -> np.ndarray:
    payload = path.read_bytes()
    if hashlib.sha256(payload).hexdigest() != checksum:
        raise StoreError(f"checksum mismatch in {path.name}")
    if payload[:4] != _MAGIC:
        raise StoreError(f"bad magic in {path.name}")
    version, kind, ndim = struct.unpack("<HHB", payload[4:9])
    if version != _VERSION:
        raise StoreError(f"unsupported blob version {version}")
    offset = 9 + 4 * ndim
    shape = struct.unpack(f"<{ndim}I", payload[9:offset])
    dtype = np.uint8 if kind == 0 else np.dtype("<f4")
    return np.frombuffer(payload[offset:], dtype=dtype).reshape(shape).copy()


def _quantize_pixels(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_episode(episode: Episode, root: Path, overwrite: bool = False) -> Path:
    """Persist a validated episode; returns its directory handle."""
    report = validate_episode(episode)
    if not report.ok:
        v = report.violations[0]
        raise StoreError(f"invalid episode {episode.episode_id}: {v.kind}: {v.detail}")
    root = Path(root)
    ep_dir = root / episode.episode_id
    if ep_dir.exists() and not overwrite:
        raise StoreError(f"episode {episode.episode_id} already exists at {ep_dir}")
    ep_dir.mkdir(parents=True, exist_ok=True)

    head = np.stack([_quantize_pixels(obs.head_view) for obs, _ in episode.frames])
    left = np.stack([_quantize_pixels(obs.left_wrist_view) for obs, _ in episode.frames])
    right = np.stack([_quantize_pixels(obs.right_wrist_view) for obs, _ in episode.frames])
    lowdim = np.stack([
        np.concatenate([obs.proprio.astype(np.float32), act.delta.astype(np.float32)])
        for obs, act in episode.frames
    ]).astype("<f4")

    checksums = {
        "head.blob": _write_blob(ep_dir / "head.blob", head),
        "left_wrist.blob": _write_blob(ep_dir / "left_wrist.blob", left),
        "right_wrist.blob": _write_blob(ep_dir / "right_wrist.blob", right),
        "lowdim.blob": _write_blob(ep_dir / "lowdim.blob", lowdim),
    }
    manifest = {
        "version": _VERSION,
        "episode_id": episode.episode_id,
        "n_frames": len(episode.frames),
        "frame_rate_hz": episode.frame_rate_hz,
        "task_instruction": episode.task_instruction,
        "sub_steps": [
            {"start_frame": s.start_frame, "end_frame": s.end_frame,
             "skill": s.skill, "instruction": s.instruction}
            for s in episode.sub_steps
        ],
        "failures": [{"frame": f.frame, "reason": f.reason} for f in episode.failures],
        "quality": episode.quality.status,
        "meta": episode.meta,
        "streams": {
            "head": list(head.shape), "left_wrist": list(left.shape),
            "right_wrist": list(right.shape), "lowdim": list(lowdim.shape),
        },
        "checksums": checksums,
    }
    (ep_dir / "manifest.json").write_text(
        json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return ep_dir


def read_manifest(handle: Path) -> dict:
    handle = Path(handle)
    path = handle / "manifest.json" if handle.is_dir() else handle
    return json.loads(path.read_text())


def read_episode(handle: Path) -> Episode:
    """Load an episode directory; verifies every blob checksum."""
    ep_dir = Path(handle)
    if ep_dir.name == "manifest.json":
        ep_dir = ep_dir.parent
    manifest = read_manifest(ep_dir)
    checksums = manifest["checksums"]
    head = _read_blob(ep_dir / "head.blob", checksums["head.blob"])
    left = _read_blob(ep_dir / "left_wrist.blob", checksums["left_wrist.blob"])
    right = _read_blob(ep_dir / "right_wrist.blob", checksums["right_wrist.blob"])
    lowdim = _read_blob(ep_dir / "lowdim.blob", checksums["lowdim.blob"])

    frames = []
    for t in range(manifest["n_frames"]):
        obs = Observation(
            head_view=head[t].astype(np.float32) / 255.0,
            left_wrist_view=left[t].astype(np.float32) / 255.0,
            right_wrist_view=right[t].astype(np.float32) / 255.0,
            proprio=lowdim[t, :3].copy(),
            timestamp=t,
        )
        frames.append((obs, ActionVector(lowdim[t, 3:].copy())))
    return Episode(
        episode_id=manifest["episode_id"],
        frames=frames,
        frame_rate_hz=manifest["frame_rate_hz"],
        task_instruction=manifest["task_instruction"],
        sub_steps=[SubStepAnnotation(**s) for s in manifest["sub_steps"]],
        failures=[FailureAnnotation(**f) for f in manifest["failures"]],
        quality=QualityFlag(manifest["quality"]),
        meta=dict(manifest["meta"]),
    )


def list_manifests(root: Path) -> list[Path]:
    """All episode manifests under a dataset root, sorted by episode id."""
    return sorted(Path(root).glob("*/manifest.json"))


def filter_by_quality(manifests: list[Path], status: str) -> list[Path]:
    """Subset of manifests with a matching quality flag, order preserved."""
    if status not in ("verified", "unverified", "rejected"):
        raise ValueError(f"invalid quality status {status!r}")
    out = []
    for m in manifests:
        if read_manifest(m)["quality"] == status:
            out.append(m)
    return out


def compute_stats(manifests: list[Path]):
    """Exact dataset statistics from manifests alone (no blob reads)."""
    from .episodes import DatasetStats, duration_bucket, empty_duration_histogram

    skill_hist: dict[str, int] = {}
    scene_hist: dict[str, int] = {}
    duration_hist = empty_duration_histogram()
    total_duration = 0.0
    count = 0
    unreadable = []
    for m in sorted(manifests):
        try:
            manifest = read_manifest(m)
            duration = manifest["n_frames"] / manifest["frame_rate_hz"]
            skill = manifest["meta"].get("skill", "unknown")
            scene = manifest["meta"].get("scene", "unknown")
        except Exception:
            unreadable.append(str(m))
            continue
        count += 1
        total_duration += duration
        skill_hist[skill] = skill_hist.get(skill, 0) + 1
        scene_hist[scene] = scene_hist.get(scene, 0) + 1
        duration_hist[duration_bucket(duration)] += 1
    return DatasetStats(
        trajectory_count=count,
        total_duration_s=total_duration,
        skill_histogram=skill_hist,
        duration_histogram=duration_hist,
        scene_histogram=scene_hist,
        unreadable=unreadable,
    )
