"""Motion feature representation, body-part partitioning, file format and synthetic clips.

Frames follow the 263-dim HumanML3D layout::

    [0]        root rotational velocity (rad/frame)
    [1:3]      root planar linear velocity (units/frame)
    [3]        root height
    [4:67]     joint positions, joints 1..21, xyz
    [67:193]   joint rotations, joints 1..21, 6D
    [193:259]  joint velocities, joints 0..21, xyz
    [259:263]  foot contacts (l_ankle, l_foot, r_ankle, r_foot)
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

JOINT_NAMES: Tuple[str, ...] = (
    "pelvis", "left_hip", "right_hip", "spine1", "left_knee", "right_knee",
    "spine2", "left_ankle", "right_ankle", "spine3", "left_foot", "right_foot",
    "neck", "left_collar", "right_collar", "head", "left_shoulder",
    "right_shoulder", "left_elbow", "right_elbow", "left_wrist", "right_wrist",
)

PARTS: Tuple[str, ...] = ("LU", "RU", "LL", "RL")

PART_JOINTS: Dict[str, Tuple[str, ...]] = {
    "LU": ("left_collar", "left_shoulder", "left_elbow", "left_wrist",
           "spine3", "spine2", "spine1", "head", "neck"),
    "RU": ("right_collar", "right_shoulder", "right_elbow", "right_wrist",
           "spine3", "spine2", "spine1", "head", "neck"),
    "LL": ("left_ankle", "left_foot", "left_hip", "pelvis", "left_knee"),
    "RL": ("right_ankle", "right_foot", "right_hip", "pelvis", "right_knee"),
}

DEFAULT_FPS = 20.0
MOTION_MAGIC = b"CMA1"
MOTION_VERSION = 1


class MotionFormatError(ValueError):
    pass


@dataclass(frozen=True)
class Block:
    name: str
    start: int
    length: int
    joints: Tuple[int, ...]  # owning joint per feature group
    width: int  # features per joint

    @property
    def stop(self) -> int:
        return self.start + self.length


@dataclass(frozen=True)
class FeatureLayout:
    joint_count: int
    feature_dim: int
    blocks: Tuple[Block, ...]

    def block(self, name: str) -> Block:
        for b in self.blocks:
            if b.name == name:
                return b
        raise KeyError(name)

    @property
    def root_rot_vel(self) -> int:
        return self.block("root_rot_vel").start

    @property
    def root_lin_vel(self) -> Tuple[int, int]:
        b = self.block("root_lin_vel")
        return (b.start, b.start + 1)

    @property
    def root_height(self) -> int:
        return self.block("root_height").start

    def joint_indices(self, block_name: str, joint: int) -> List[int]:
        """Feature indices of ``joint`` inside block ``block_name`` (empty if absent)."""
        b = self.block(block_name)
        out = []
        for slot, j in enumerate(b.joints):
            if j == joint:
                base = b.start + slot * b.width
                out.extend(range(base, base + b.width))
        return out

    def owner_joint(self) -> np.ndarray:
        """Array mapping every feature index to the index of its owning joint."""
        owner = np.full(self.feature_dim, -1, dtype=np.int64)
        for b in self.blocks:
            for slot, j in enumerate(b.joints):
                base = b.start + slot * b.width
                owner[base:base + b.width] = j
        return owner


def standard_layout() -> FeatureLayout:
    jc = len(JOINT_NAMES)
    nonroot = tuple(range(1, jc))
    j = JOINT_NAMES.index
    blocks = []
    start = 0
    for name, joints, width in (
        ("root_rot_vel", (0,), 1),
        ("root_lin_vel", (0,), 2),
        ("root_height", (0,), 1),
        ("joint_pos", nonroot, 3),
        ("joint_rot", nonroot, 6),
        ("joint_vel", tuple(range(jc)), 3),
        ("foot_contact", (j("left_ankle"), j("left_foot"), j("right_ankle"), j("right_foot")), 1),
    ):
        blocks.append(Block(name, start, len(joints) * width, joints, width))
        start += len(joints) * width
    return FeatureLayout(joint_count=jc, feature_dim=start, blocks=tuple(blocks))


@dataclass(frozen=True)
class PartitionScheme:
    parts: Tuple[str, ...]
    joints_per_part: Dict[str, Tuple[str, ...]]
    feature_indices_per_part: Dict[str, np.ndarray]

    def part_dim(self, part: str) -> int:
        return len(self.indices(part))

    @property
    def part_dims(self) -> Dict[str, int]:
        return {p: self.part_dim(p) for p in self.parts}

    def indices(self, part: str) -> np.ndarray:
        try:
            return self.feature_indices_per_part[part]
        except KeyError:
            raise KeyError(f"unknown body part {part!r}; expected one of {self.parts}") from None


def four_part_partition(layout: Optional[FeatureLayout] = None) -> PartitionScheme:
    """Four overlapping parts; a feature belongs to a part iff its owning joint does."""
    layout = layout or standard_layout()
    owner = layout.owner_joint()
    indices = {}
    for part in PARTS:
        members = np.array([JOINT_NAMES.index(name) for name in PART_JOINTS[part]])
        idx = np.nonzero(np.isin(owner, members))[0]
        idx.setflags(write=False)
        indices[part] = idx
    return PartitionScheme(PARTS, dict(PART_JOINTS), indices)


@dataclass(frozen=True)
class MotionSequence:
    frames: np.ndarray
    fps: float = DEFAULT_FPS
    text: Optional[str] = None

    def __post_init__(self):
        frames = np.array(self.frames, dtype=np.float32, copy=True)
        if frames.ndim != 2 or frames.shape[0] < 1:
            raise ValueError(f"frames must be a non-empty T x D matrix, got shape {frames.shape}")
        if not np.isfinite(frames).all():
            raise ValueError("motion frames contain non-finite values")
        if not self.fps > 0:
            raise ValueError("fps must be positive")
        frames.setflags(write=False)
        object.__setattr__(self, "frames", frames)

    @property
    def T(self) -> int:
        return self.frames.shape[0]

    @property
    def D(self) -> int:
        return self.frames.shape[1]

    def with_frames(self, frames: np.ndarray) -> "MotionSequence":
        return MotionSequence(frames, self.fps, self.text)


@dataclass(frozen=True)
class PartMotion:
    part: str
    frames: np.ndarray = field(repr=False)


def slice_part(m: MotionSequence, part: str, scheme: Optional[PartitionScheme] = None) -> PartMotion:
    scheme = scheme or four_part_partition()
    idx = scheme.indices(part)
    if m.D <= int(idx.max()):
        raise ValueError(f"motion has {m.D} features, partition needs {int(idx.max()) + 1}")
    return PartMotion(part, m.frames[:, idx].copy())


def mean_root_speed(m: MotionSequence, layout: Optional[FeatureLayout] = None) -> float:
    layout = layout or standard_layout()
    a, b = layout.root_lin_vel
    vel = m.frames[:, a:b + 1].astype(np.float64)
    return float(np.linalg.norm(vel, axis=1).mean())


def write_motion(m: MotionSequence, path) -> None:
    path = Path(path)
    header = struct.pack("<4sIIIf", MOTION_MAGIC, MOTION_VERSION, m.T, m.D, m.fps)
    payload = np.ascontiguousarray(m.frames, dtype="<f4").tobytes()
    path.write_bytes(header + payload)
    caption = Path(str(path) + ".txt")
    if m.text is not None:
        caption.write_text(m.text, encoding="utf-8")
    elif caption.exists():
        caption.unlink()


def read_motion(path, expected_dim: Optional[int] = None) -> MotionSequence:
    path = Path(path)
    raw = path.read_bytes()
    hsize = struct.calcsize("<4sIIIf")
    if len(raw) < hsize:
        raise MotionFormatError(f"{path}: file shorter than header")
    magic, version, T, D, fps = struct.unpack_from("<4sIIIf", raw)
    if magic != MOTION_MAGIC:
        raise MotionFormatError(f"{path}: bad magic {magic!r}")
    if version != MOTION_VERSION:
        raise MotionFormatError(f"{path}: unsupported version {version}")
    if expected_dim is not None and D != expected_dim:
        raise MotionFormatError(f"{path}: feature dim {D} != expected {expected_dim}")
    need = T * D * 4
    if len(raw) - hsize != need:
        raise MotionFormatError(f"{path}: truncated payload ({len(raw) - hsize} bytes, header says {need})")
    frames = np.frombuffer(raw, dtype="<f4", offset=hsize).reshape(T, D)
    caption = Path(str(path) + ".txt")
    text = caption.read_text(encoding="utf-8") if caption.exists() else None
    return MotionSequence(frames, float(fps), text)


# Synthetic clips: 4 summed sinusoids per channel.  Amplitudes and frequencies
# are a fixed property of the generator; only phases depend on the seed.
SYN_COMPONENTS = 4
SYN_FREQ_RANGE = (0.004, 0.04)  # cycles per frame
SYN_AMP_RANGE = (0.2, 0.8)
_SYN_BASE_SEED = 20240601


def _synthetic_spectrum(dim: int) -> Tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(_SYN_BASE_SEED)
    amps = rng.uniform(*SYN_AMP_RANGE, size=(dim, SYN_COMPONENTS))
    freqs = rng.uniform(*SYN_FREQ_RANGE, size=(dim, SYN_COMPONENTS))
    return amps, freqs


def synthetic_delta_bound(dim: int = 263) -> np.ndarray:
    """Per-channel bound on |x[t+1] - x[t]| for synthetic clips (sum of a * 2*pi*f)."""
    amps, freqs = _synthetic_spectrum(dim)
    return (amps * 2 * np.pi * freqs).sum(axis=1)


def synthetic_motion(seed: int, T: int, dim: int = 263, fps: float = DEFAULT_FPS,
                     text: Optional[str] = None) -> MotionSequence:
    if T < 1:
        raise ValueError("T must be >= 1")
    amps, freqs = _synthetic_spectrum(dim)
    phases = np.random.default_rng(seed).uniform(0, 2 * np.pi, size=(dim, SYN_COMPONENTS))
    t = np.arange(T, dtype=np.float64)[:, None, None]
    frames = (amps * np.sin(2 * np.pi * freqs * t + phases)).sum(axis=-1)
    if text is None:
        text = f"synthetic motion {seed}"
    return MotionSequence(frames.astype(np.float32), fps, text)


def synthetic_corpus(count: int, T: int, seed: int = 0) -> List[MotionSequence]:
    return [synthetic_motion(seed * 100003 + i, T) for i in range(count)]
