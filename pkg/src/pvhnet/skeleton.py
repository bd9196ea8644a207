"""Skeleton frames and the named joint orderings used across the package."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# 17-joint ordering (Human3.6M style evaluation skeleton)
JOINTS_17 = (
    "pelvis", "r_hip", "r_knee", "r_ankle", "l_hip", "l_knee", "l_ankle",
    "spine", "thorax", "neck", "head",
    "l_shoulder", "l_elbow", "l_wrist", "r_shoulder", "r_elbow", "r_wrist",
)

# 26-joint ordering matching a 78-D latent
JOINTS_26 = (
    "pelvis", "r_hip", "r_knee", "r_ankle", "r_toe", "l_hip", "l_knee", "l_ankle", "l_toe",
    "spine", "spine1", "chest", "thorax", "neck", "head", "head_top",
    "l_clavicle", "l_shoulder", "l_elbow", "l_wrist", "l_hand",
    "r_clavicle", "r_shoulder", "r_elbow", "r_wrist", "r_hand",
)

JOINT_MAPS = {"h36m17": JOINTS_17, "joints26": JOINTS_26}


def joint_names(count: int) -> tuple[str, ...]:
    for names in JOINT_MAPS.values():
        if len(names) == count:
            return names
    return tuple(f"joint{i}" for i in range(count))


def joint_map_name(count: int) -> str:
    for key, names in JOINT_MAPS.items():
        if len(names) == count:
            return key
    return f"generic{count}"


@dataclass
class SkeletonFrame:
    """``J`` joint positions in world millimetres."""

    joints: np.ndarray
    names: tuple[str, ...] = field(default=())

    def __post_init__(self):
        self.joints = np.asarray(self.joints, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(self.joints)):
            raise ValueError("skeleton joints must be finite")
        if not self.names:
            self.names = joint_names(len(self.joints))
        if len(self.names) != len(self.joints):
            raise ValueError(f"{len(self.names)} joint names for {len(self.joints)} joints")

    @property
    def joint_count(self) -> int:
        return len(self.joints)

    def flat(self) -> np.ndarray:
        return self.joints.reshape(-1)


@dataclass
class SkeletonStream:
    """Time-ordered skeleton frames with strictly increasing frame indices."""

    frames: list[SkeletonFrame] = field(default_factory=list)
    indices: list[int] = field(default_factory=list)
    timestamps: list[float] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.frames = list(self.frames)
        if not self.indices:
            self.indices = list(range(len(self.frames)))
        if not self.timestamps:
            self.timestamps = [float(i) for i in self.indices]
        self.indices = [int(i) for i in self.indices]
        self.timestamps = [float(t) for t in self.timestamps]
        if not (len(self.frames) == len(self.indices) == len(self.timestamps)):
            raise ValueError("frames, indices and timestamps must have equal length")
        if any(b <= a for a, b in zip(self.indices, self.indices[1:])):
            raise ValueError("frame indices must be strictly increasing")
        if len({f.joint_count for f in self.frames}) > 1:
            raise ValueError("joint count must be constant within a stream")

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def joint_count(self) -> int | None:
        return self.frames[0].joint_count if self.frames else self.meta.get("joint_count")

    def array(self) -> np.ndarray:
        """``(T, 3J)`` flattened joint vectors."""
        if not self.frames:
            return np.zeros((0, 3 * (self.joint_count or 0)))
        return np.stack([f.flat() for f in self.frames])
