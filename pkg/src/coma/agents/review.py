"""Joint-trace review artifacts: what the captioner looks at."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List

import numpy as np

from ..motiondata import JOINT_NAMES, PART_JOINTS, PARTS, MotionSequence, standard_layout
from ..trajedit import integrate_root

PART_COLORS: Dict[str, str] = {"LU": "#1f77b4", "RU": "#d62728", "LL": "#2ca02c", "RL": "#ff7f0e"}
REVIEW_FORMAT = "coma-joint-trace/1"


def joint_parts(name: str) -> List[str]:
    return [p for p in PARTS if name in PART_JOINTS[p]]


def joint_color_id(name: str) -> int:
    """Index into PARTS of the joint's first part (torso joints take LU, pelvis takes LL)."""
    parts = joint_parts(name)
    if not parts:
        raise KeyError(name)
    return PARTS.index(parts[0])


def recover_joints(m: MotionSequence) -> np.ndarray:
    """(T, 22, 3) world positions, y up.  Root-relative positions are turned by the
    integrated heading and offset by the integrated planar root path."""
    layout = standard_layout()
    f = m.frames.astype(np.float64)
    pos = layout.block("joint_pos")
    local = f[:, pos.start:pos.stop].reshape(m.T, -1, 3)
    yaw = np.cumsum(f[:, layout.root_rot_vel])[:, None]
    path = integrate_root(m)
    side, up, fwd = local[..., 0], local[..., 1], local[..., 2]
    out = np.zeros((m.T, len(JOINT_NAMES), 3))
    out[:, 0, 0] = path[:, 0]
    out[:, 0, 1] = f[:, layout.root_height]
    out[:, 0, 2] = path[:, 1]
    out[:, 1:, 0] = path[:, :1] + fwd * np.cos(yaw) + side * np.sin(yaw)
    out[:, 1:, 1] = up
    out[:, 1:, 2] = path[:, 1:] + fwd * np.sin(yaw) - side * np.cos(yaw)
    return out


@dataclass(frozen=True)
class ReviewArtifact:
    path: Path
    fps: float
    joints: np.ndarray  # (T, 22, 3)


def render_for_review(m: MotionSequence, path) -> ReviewArtifact:
    path = Path(path)
    joints = recover_joints(m)
    doc = {
        "format": REVIEW_FORMAT,
        "fps": m.fps,
        "joint_names": list(JOINT_NAMES),
        "joint_parts": [joint_parts(n) for n in JOINT_NAMES],
        "joint_color": [joint_color_id(n) for n in JOINT_NAMES],
        "part_colors": [PART_COLORS[p] for p in PARTS],
        "parts": list(PARTS),
        "frames": joints.tolist(),
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc), encoding="utf-8")
    return ReviewArtifact(path, m.fps, joints)


def read_review(path) -> ReviewArtifact:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("format") != REVIEW_FORMAT:
        raise ValueError(f"{path}: not a joint-trace review file")
    return ReviewArtifact(Path(path), float(doc["fps"]), np.asarray(doc["frames"], dtype=np.float64))
