"""Deterministic synthetic multi-view capture.

An articulated capsule body is posed by sinusoidal joint trajectories, rendered
into antialiased soft mattes on a ring of cameras, and fused into native and
coarse PVHs. Every frame is a pure function of ``(specs, seed, frame index)``.

Units are millimetres, world ``+z`` is up and the body faces ``+x`` at rest.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from pvhnet.errors import CycleDetected, ShapeMismatch
from pvhnet.geometry import (
    CameraIntrinsics,
    CameraPose,
    CameraView,
    FusionMode,
    SoftMatte,
    VoxelGrid,
    box_downsample,
    build_pvh,
    tricubic_upsample,
)
from pvhnet.skeleton import JOINTS_17, JOINTS_26, SkeletonFrame
from pvhnet.training import TrainingTriplet

# (name, parent name, rest offset from parent, capsule radius of the bone ending here)
_HUMANOID_17 = (
    ("pelvis", None, (0, 0, 0), 110),
    ("r_hip", "pelvis", (0, -100, -20), 85),
    ("r_knee", "r_hip", (0, 0, -430), 70),
    ("r_ankle", "r_knee", (0, 0, -420), 55),
    ("l_hip", "pelvis", (0, 100, -20), 85),
    ("l_knee", "l_hip", (0, 0, -430), 70),
    ("l_ankle", "l_knee", (0, 0, -420), 55),
    ("spine", "pelvis", (0, 0, 230), 115),
    ("thorax", "spine", (0, 0, 250), 125),
    ("neck", "thorax", (0, 0, 150), 50),
    ("head", "neck", (0, 0, 120), 95),
    ("l_shoulder", "thorax", (0, 170, 20), 60),
    ("l_elbow", "l_shoulder", (0, 0, -280), 45),
    ("l_wrist", "l_elbow", (0, 0, -250), 40),
    ("r_shoulder", "thorax", (0, -170, 20), 60),
    ("r_elbow", "r_shoulder", (0, 0, -280), 45),
    ("r_wrist", "r_elbow", (0, 0, -250), 40),
)

_HUMANOID_26 = (
    ("pelvis", None, (0, 0, 0), 110),
    ("r_hip", "pelvis", (0, -100, -20), 85),
    ("r_knee", "r_hip", (0, 0, -430), 70),
    ("r_ankle", "r_knee", (0, 0, -420), 55),
    ("r_toe", "r_ankle", (140, 0, -50), 40),
    ("l_hip", "pelvis", (0, 100, -20), 85),
    ("l_knee", "l_hip", (0, 0, -430), 70),
    ("l_ankle", "l_knee", (0, 0, -420), 55),
    ("l_toe", "l_ankle", (140, 0, -50), 40),
    ("spine", "pelvis", (0, 0, 120), 110),
    ("spine1", "spine", (0, 0, 120), 115),
    ("chest", "spine1", (0, 0, 120), 120),
    ("thorax", "chest", (0, 0, 120), 125),
    ("neck", "thorax", (0, 0, 150), 50),
    ("head", "neck", (0, 0, 100), 90),
    ("head_top", "head", (0, 0, 90), 85),
    ("l_clavicle", "thorax", (0, 60, 10), 55),
    ("l_shoulder", "l_clavicle", (0, 110, 10), 55),
    ("l_elbow", "l_shoulder", (0, 0, -280), 45),
    ("l_wrist", "l_elbow", (0, 0, -250), 40),
    ("l_hand", "l_wrist", (0, 0, -90), 35),
    ("r_clavicle", "thorax", (0, -60, 10), 55),
    ("r_shoulder", "r_clavicle", (0, -110, 10), 55),
    ("r_elbow", "r_shoulder", (0, 0, -280), 45),
    ("r_wrist", "r_elbow", (0, 0, -250), 40),
    ("r_hand", "r_wrist", (0, 0, -90), 35),
)

DEFAULT_ROOT_HEIGHT = 950.0
DEFAULT_CAPTURE_HALF = 1000.0
JOINT_LIMIT = math.pi


def _tree_order(parents) -> list[int]:
    """Topological order from the root; raises CycleDetected for loops or forests."""
    n = len(parents)
    roots = [j for j, p in enumerate(parents) if p < 0]
    if roots != [0]:
        raise CycleDetected(f"skeleton must have exactly one root at index 0, found roots {roots}")
    children = [[] for _ in range(n)]
    for j, p in enumerate(parents):
        if p >= n:
            raise CycleDetected(f"joint {j} has parent {p} outside 0..{n - 1}")
        if p >= 0:
            children[p].append(j)
    order, stack = [], [0]
    while stack:
        j = stack.pop()
        order.append(j)
        stack.extend(reversed(children[j]))
    if len(order) != n:
        missing = sorted(set(range(n)) - set(order))
        raise CycleDetected(f"joints {missing} are not reachable from the root (cycle in parents)")
    return order


@dataclass
class BodyModel:
    """Capsule skeleton: joint ``j`` hangs off ``parents[j]`` at ``offsets[j]`` (parent frame).

    ``radii[j]`` is the radius of the capsule from the parent joint to ``j``; the
    root's radius is used for a sphere at the root.
    """

    parents: tuple[int, ...]
    offsets: np.ndarray
    radii: np.ndarray
    names: tuple[str, ...] = ()

    def __post_init__(self):
        self.parents = tuple(int(p) for p in self.parents)
        self.offsets = np.asarray(self.offsets, dtype=np.float64).reshape(-1, 3)
        self.radii = np.asarray(self.radii, dtype=np.float64).reshape(-1)
        n = len(self.parents)
        if len(self.offsets) != n or len(self.radii) != n:
            raise ShapeMismatch(f"{n} parents, {len(self.offsets)} offsets, {len(self.radii)} radii")
        if not np.all(self.radii > 0):
            raise ValueError("capsule radii must be positive")
        self.names = tuple(self.names) or tuple(f"joint{i}" for i in range(n))
        self.order = _tree_order(self.parents)

    @property
    def joint_count(self) -> int:
        return len(self.parents)

    @classmethod
    def humanoid(cls, joint_count: int = 17) -> "BodyModel":
        table = {17: _HUMANOID_17, 26: _HUMANOID_26}.get(joint_count)
        if table is None:
            raise ValueError(f"humanoid bodies exist for 17 or 26 joints, not {joint_count}")
        names = [row[0] for row in table]
        assert tuple(names) == (JOINTS_17 if joint_count == 17 else JOINTS_26)
        parents = [-1 if row[1] is None else names.index(row[1]) for row in table]
        return cls(parents, [row[2] for row in table], [row[3] for row in table], names)

    def rest_joints(self) -> np.ndarray:
        pos = np.zeros((self.joint_count, 3))
        for j in self.order[1:]:
            pos[j] = pos[self.parents[j]] + self.offsets[j]
        return pos

    def height(self) -> float:
        """Standing height of the rest pose including capsule radii."""
        z = self.rest_joints()[:, 2]
        return float((z + self.radii).max() - (z - self.radii).min())

    def to_dict(self) -> dict:
        return {"parents": list(self.parents), "offsets": self.offsets.tolist(),
                "radii": self.radii.tolist(), "names": list(self.names)}

    @classmethod
    def from_dict(cls, d: dict) -> "BodyModel":
        return cls(d["parents"], d["offsets"], d["radii"], tuple(d.get("names", ())))


def euler_matrix(angles) -> np.ndarray:
    """Rotation ``Rx(a) @ Ry(b) @ Rz(c)`` for ``angles = (a, b, c)``."""
    a, b, c = angles
    ca, sa, cb, sb, cc, sc = math.cos(a), math.sin(a), math.cos(b), math.sin(b), math.cos(c), math.sin(c)
    rx = np.array([[1, 0, 0], [0, ca, -sa], [0, sa, ca]])
    ry = np.array([[cb, 0, sb], [0, 1, 0], [-sb, 0, cb]])
    rz = np.array([[cc, -sc, 0], [sc, cc, 0], [0, 0, 1]])
    return rx @ ry @ rz


def forward_kinematics(body: BodyModel, pose, root_rotation=None, root_translation=None) -> SkeletonFrame:
    """World joint positions for per-joint local Euler angles ``pose`` (J, 3).

    The local rotation of joint ``j`` acts on all of its descendants, so a pure
    rotation at a leaf moves nothing.
    """
    pose = np.asarray(pose, dtype=np.float64)
    if pose.shape != (body.joint_count, 3):
        raise ShapeMismatch(f"pose must be ({body.joint_count}, 3), got {pose.shape}")
    root_r = np.eye(3) if root_rotation is None else np.asarray(root_rotation, dtype=np.float64)
    root_t = np.zeros(3) if root_translation is None else np.asarray(root_translation, dtype=np.float64)
    pos = np.zeros((body.joint_count, 3))
    rot = np.zeros((body.joint_count, 3, 3))
    for j in body.order:
        p = body.parents[j]
        if p < 0:
            pos[j] = root_t + root_r @ body.offsets[j]
            rot[j] = root_r @ euler_matrix(pose[j])
        else:
            pos[j] = pos[p] + rot[p] @ body.offsets[j]
            rot[j] = rot[p] @ euler_matrix(pose[j])
    return SkeletonFrame(pos, body.names)


def body_capsules(body: BodyModel, frame: SkeletonFrame) -> list[tuple[np.ndarray, np.ndarray, float]]:
    """``(a, b, radius)`` segments for a posed body; the root becomes a sphere."""
    caps = []
    for j in body.order:
        p = body.parents[j]
        a = frame.joints[j] if p < 0 else frame.joints[p]
        caps.append((a, frame.joints[j], float(body.radii[j])))
    return caps


def _pixel_rect(a_cam, b_cam, r, f, ox, oy, w, h):
    """Conservative pixel bounds of a capsule given in camera coordinates."""
    lo = np.minimum(a_cam, b_cam) - r
    hi = np.maximum(a_cam, b_cam) + r
    if hi[2] <= 0:
        return None
    if lo[2] <= 1e-9:
        return 0, w - 1, 0, h - 1
    corners = np.array([[x, y, z] for x in (lo[0], hi[0]) for y in (lo[1], hi[1]) for z in (lo[2], hi[2])])
    u = f * corners[:, 0] / corners[:, 2] + ox
    v = f * corners[:, 1] / corners[:, 2] + oy
    x0, x1 = max(0, math.floor(u.min())), min(w - 1, math.ceil(u.max()))
    y0, y1 = max(0, math.floor(v.min())), min(h - 1, math.ceil(v.max()))
    if x0 > x1 or y0 > y1:
        return None
    return x0, x1, y0, y1


def _ray_hits(dirs, a, b, r):
    """Boolean hits of unit rays from the origin against capsule ``(a, b, r)``."""
    v = b - a
    cc = float(v @ v)
    bb = dirs @ v
    d = -(dirs @ a)
    e = -float(v @ a)
    if cc > 1e-12:
        denom = cc - bb * bb
        s = np.where(denom > 1e-12, (e - d * bb) / np.where(denom > 1e-12, denom, 1.0), 0.0)
        s = np.clip(s, 0.0, 1.0)
    else:
        s = np.zeros_like(bb)
    t = s * bb - d
    behind = t < 0
    if np.any(behind):
        # closest point of the segment to the ray origin
        s0 = np.clip(e / cc, 0.0, 1.0) if cc > 1e-12 else 0.0
        s = np.where(behind, s0, s)
        t = np.maximum(t, 0.0)
    closest = dirs * t[:, None] - (a + s[:, None] * v)
    return np.einsum("ij,ij->i", closest, closest) <= r * r


def render_matte(capsules, intrinsics: CameraIntrinsics, pose: CameraPose, supersample: int = 4) -> SoftMatte:
    """Per-pixel coverage of the union of capsules from ``supersample``² rays per pixel."""
    w, h = intrinsics.image_size
    f = intrinsics.focal_length
    ox, oy = intrinsics.principal_point
    s = int(supersample)
    sub = (np.arange(s) + 0.5) / s - 0.5
    cover = np.zeros((h * s, w * s), dtype=bool)
    rt = pose.rotation.T
    for a, b, r in capsules:
        a_cam = rt @ (np.asarray(a, dtype=np.float64) - pose.translation)
        b_cam = rt @ (np.asarray(b, dtype=np.float64) - pose.translation)
        rect = _pixel_rect(a_cam, b_cam, r, f, ox, oy, w, h)
        if rect is None:
            continue
        x0, x1, y0, y1 = rect
        u = (np.arange(x0, x1 + 1)[:, None] + sub[None, :]).reshape(-1)
        v = (np.arange(y0, y1 + 1)[:, None] + sub[None, :]).reshape(-1)
        uu, vv = np.meshgrid((u - ox) / f, (v - oy) / f)
        dirs = np.stack([uu.ravel(), vv.ravel(), np.ones(uu.size)], axis=1)
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        hit = _ray_hits(dirs, a_cam, b_cam, r).reshape(uu.shape)
        cover[y0 * s:(y1 + 1) * s, x0 * s:(x1 + 1) * s] |= hit
    return SoftMatte(cover.reshape(h, s, w, s).mean(axis=(1, 3)))


@dataclass
class MotionSpec:
    """Per-joint ``bias + amplitude * sin(2 pi frequency t + phase)`` angles plus a root path.

    Arrays are (J, 3) in radians / hertz. The root walks a circle of
    ``root_radius`` around ``root_center`` with period ``root_period`` seconds
    while yawing at ``yaw_rate`` rad/s. ``jitter`` adds seeded per-frame noise
    (radians, standard deviation) to every angle.
    """

    amplitude: np.ndarray
    frequency: np.ndarray
    phase: np.ndarray
    bias: np.ndarray
    frame_count: int = 200
    frame_rate: float = 25.0
    root_center: tuple[float, float, float] = (0.0, 0.0, DEFAULT_ROOT_HEIGHT)
    root_radius: float = 150.0
    root_period: float = 11.0
    yaw_rate: float = 2.0 * math.pi / 8.0
    jitter: float = 0.05

    def __post_init__(self):
        for name in ("amplitude", "frequency", "phase", "bias"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64).reshape(-1, 3))
        shapes = {a.shape for a in (self.amplitude, self.frequency, self.phase, self.bias)}
        if len(shapes) != 1:
            raise ShapeMismatch(f"motion arrays disagree in shape: {sorted(shapes)}")
        if self.frame_count < 1:
            raise ValueError(f"frame_count must be at least 1, got {self.frame_count}")
        if not self.frame_rate > 0:
            raise ValueError("frame_rate must be positive")
        if np.any(np.abs(self.bias) + np.abs(self.amplitude) > JOINT_LIMIT):
            raise ValueError(f"joint angle range exceeds the limit of {JOINT_LIMIT:.4f} rad")
        self.root_center = tuple(float(v) for v in self.root_center)

    @property
    def joint_count(self) -> int:
        return len(self.amplitude)

    @classmethod
    def still(cls, joint_count: int, frame_count: int = 1, **kw) -> "MotionSpec":
        z = np.zeros((joint_count, 3))
        kw = {"root_radius": 0.0, "yaw_rate": 0.0, "jitter": 0.0, **kw}
        return cls(z, z, z, z, frame_count=frame_count, **kw)

    @classmethod
    def default(cls, body: BodyModel, frame_count: int = 200, **kw) -> "MotionSpec":
        """Walking-in-place gait with independent arm, torso and head movement."""
        n = body.joint_count
        amp, freq, phase, bias = (np.zeros((n, 3)) for _ in range(4))
        idx = {name: i for i, name in enumerate(body.names)}

        def set_(name, axis, a, f, ph=0.0, b=0.0):
            if name in idx:
                j = idx[name]
                amp[j, axis], freq[j, axis], phase[j, axis], bias[j, axis] = a, f, ph, b

        gait = 0.55
        set_("r_hip", 1, 0.55, gait, 0.0)
        set_("l_hip", 1, 0.55, gait, math.pi)
        set_("r_knee", 1, 0.45, gait, 0.5 * math.pi, 0.5)
        set_("l_knee", 1, 0.45, gait, 1.5 * math.pi, 0.5)
        set_("r_hip", 0, 0.15, 0.19, 0.3, -0.05)
        set_("l_hip", 0, 0.15, 0.19, 2.1, 0.05)
        set_("spine", 1, 0.25, 0.17, 0.0, 0.1)
        set_("spine", 0, 0.15, 0.13, 1.0)
        set_("thorax", 2, 0.35, 0.21, 0.4)
        set_("neck", 2, 0.4, 0.29, 1.3)
        set_("neck", 1, 0.2, 0.23, 0.2)
        set_("l_shoulder", 0, 0.5, 0.23, 0.0, 0.55)
        set_("r_shoulder", 0, 0.5, 0.31, 1.7, -0.55)
        set_("l_shoulder", 1, 0.7, gait, 0.0)
        set_("r_shoulder", 1, 0.7, gait, math.pi)
        set_("l_elbow", 1, 0.6, 0.37, 0.9, -0.8)
        set_("r_elbow", 1, 0.6, 0.41, 2.6, -0.8)
        return cls(amp, freq, phase, bias, frame_count=frame_count, **kw)

    def pose_at(self, frame: int, seed: int):
        """``(pose, root_rotation, root_translation, timestamp)`` for one frame."""
        t = frame / self.frame_rate
        pose = self.bias + self.amplitude * np.sin(2.0 * math.pi * self.frequency * t + self.phase)
        if self.jitter:
            rng = np.random.default_rng([seed, frame])
            pose = pose + rng.normal(0.0, self.jitter, pose.shape) * (self.amplitude != 0)
        yaw = self.yaw_rate * t
        c, s = math.cos(yaw), math.sin(yaw)
        root_r = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        orbit = 2.0 * math.pi * t / self.root_period if self.root_period else 0.0
        root_t = np.array(self.root_center) + self.root_radius * np.array([math.cos(orbit), math.sin(orbit), 0.0])
        return pose, root_r, root_t, t

    def to_dict(self) -> dict:
        return {"amplitude": self.amplitude.tolist(), "frequency": self.frequency.tolist(),
                "phase": self.phase.tolist(), "bias": self.bias.tolist(),
                "frame_count": self.frame_count, "frame_rate": self.frame_rate,
                "root_center": list(self.root_center), "root_radius": self.root_radius,
                "root_period": self.root_period, "yaw_rate": self.yaw_rate, "jitter": self.jitter}

    @classmethod
    def from_dict(cls, d: dict) -> "MotionSpec":
        return cls(**d)


@dataclass
class RigSpec:
    """``camera_count`` cameras evenly spaced on a ring, all aimed at ``look_at``."""

    camera_count: int = 4
    ring_radius: float = 3500.0
    heights: tuple[float, ...] = (1200.0,)
    look_at: tuple[float, float, float] = (0.0, 0.0, DEFAULT_ROOT_HEIGHT)
    focal_length: float = 200.0
    image_size: tuple[int, int] = (128, 128)
    azimuth_offset: float = math.pi / 4.0

    def __post_init__(self):
        if self.camera_count < 1:
            raise ValueError(f"camera_count must be at least 1, got {self.camera_count}")
        self.heights = tuple(float(h) for h in np.atleast_1d(self.heights))
        self.look_at = tuple(float(v) for v in self.look_at)
        self.image_size = tuple(int(v) for v in self.image_size)

    def intrinsics(self) -> CameraIntrinsics:
        w, h = self.image_size
        return CameraIntrinsics(self.focal_length, ((w - 1) / 2.0, (h - 1) / 2.0), (w, h))

    def cameras(self) -> list[tuple[CameraIntrinsics, CameraPose]]:
        k = self.intrinsics()
        out = []
        for c in range(self.camera_count):
            az = self.azimuth_offset + 2.0 * math.pi * c / self.camera_count
            z = self.heights[c % len(self.heights)]
            pos = (self.ring_radius * math.cos(az), self.ring_radius * math.sin(az), z)
            out.append((k, CameraPose.look_at(pos, self.look_at)))
        return out

    def to_dict(self) -> dict:
        return {"camera_count": self.camera_count, "ring_radius": self.ring_radius,
                "heights": list(self.heights), "look_at": list(self.look_at),
                "focal_length": self.focal_length, "image_size": list(self.image_size),
                "azimuth_offset": self.azimuth_offset}

    @classmethod
    def from_dict(cls, d: dict) -> "RigSpec":
        return cls(**d)


def default_bbox(center=(0.0, 0.0, DEFAULT_ROOT_HEIGHT), half: float = DEFAULT_CAPTURE_HALF):
    c = np.asarray(center, dtype=np.float64)
    return c - half, c + half


@dataclass
class CaptureFrame:
    index: int
    timestamp: float
    skeleton: SkeletonFrame
    coarse: VoxelGrid
    triplet: TrainingTriplet
    mattes: list[SoftMatte] | None = None


@dataclass
class SyntheticDataset:
    frames: list[CaptureFrame]
    cameras: list[tuple[CameraIntrinsics, CameraPose]]
    bbox: tuple[np.ndarray, np.ndarray]
    coarse_resolution: int
    scale: int
    seed: int
    body_height: float
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def triplets(self) -> list[TrainingTriplet]:
        return [f.triplet for f in self.frames]

    @property
    def skeletons(self) -> list[SkeletonFrame]:
        return [f.skeleton for f in self.frames]


def generate_frame(body, motion, cameras, index, coarse_res, scale, seed, bbox,
                   mode=FusionMode.PRODUCT, keep_mattes=False, supersample=4) -> CaptureFrame:
    pose, root_r, root_t, stamp = motion.pose_at(index, seed)
    skeleton = forward_kinematics(body, pose, root_r, root_t)
    caps = body_capsules(body, skeleton)
    mattes = [render_matte(caps, k, p, supersample) for k, p in cameras]
    views = [CameraView(k, p, m) for (k, p), m in zip(cameras, mattes)]
    target = build_pvh(views, bbox, coarse_res * scale, mode)
    coarse = box_downsample(target, scale)
    inp = tricubic_upsample(coarse, scale)
    return CaptureFrame(index, stamp, skeleton, coarse, TrainingTriplet(inp, target, skeleton),
                        mattes if keep_mattes else None)


def generate_dataset(body: BodyModel, motion: MotionSpec, rig: RigSpec, coarse_res: int = 32,
                     scale: int = 1, seed: int = 0, bbox=None, mode=FusionMode.PRODUCT,
                     keep_mattes: bool = False, supersample: int = 4) -> SyntheticDataset:
    """Render, fuse and downsample ``motion.frame_count`` frames.

    Targets are native ``(coarse_res * scale)^3`` PVHs; coarse grids are their
    box averages and triplet inputs are the tricubic upsampling of those.
    """
    if motion.joint_count != body.joint_count:
        raise ShapeMismatch(f"motion has {motion.joint_count} joints, body has {body.joint_count}")
    bbox = default_bbox() if bbox is None else tuple(np.asarray(b, dtype=np.float64) for b in bbox)
    cameras = rig.cameras()
    frames = [generate_frame(body, motion, cameras, i, coarse_res, scale, seed, bbox, mode,
                             keep_mattes, supersample)
              for i in range(motion.frame_count)]
    meta = {"seed": seed, "coarse_resolution": coarse_res, "scale": scale, "fusion": mode.value,
            "supersample": supersample}
    return SyntheticDataset(frames, cameras, bbox, coarse_res, scale, seed, body.height(), meta)
