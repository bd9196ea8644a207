"""Probabilistic visual hulls and voxel-grid resampling.

World coordinates are millimetres with +z vertical. Cameras use the pinhole
model with an OpenCV-style frame (x right, y down, z forward); a pose stores
the camera-to-world rotation ``R`` and the camera centre ``T``, so a world
point ``X`` lands at ``R^T (X - T)`` in the camera frame.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from pvhnet import kernels
from pvhnet.errors import BehindCamera, EmptyViewList, ShapeMismatch, UnsupportedFactor
from pvhnet.skeleton import SkeletonFrame

SUPPORTED_FACTORS = (1, 2, 4)


class FusionMode(enum.Enum):
    """How per-view matte evidence combines into one occupancy value.

    ``PRODUCT`` multiplies the per-view probabilities. ``INVERSE_LOGISTIC`` applies
    ``prod 1 / (1 + exp(p))``, which *decreases* as matte evidence increases;
    it exists only so results computed with that formula can be reproduced.
    """

    PRODUCT = "product"
    INVERSE_LOGISTIC = "inverse_logistic"

    @property
    def kernel_code(self) -> int:
        return kernels.MODE_PRODUCT if self is FusionMode.PRODUCT else kernels.MODE_INVERSE_LOGISTIC


@dataclass(frozen=True)
class CameraIntrinsics:
    focal_length: float
    principal_point: tuple[float, float]
    image_size: tuple[int, int]  # (width, height)

    def __post_init__(self):
        object.__setattr__(self, "principal_point", tuple(float(v) for v in self.principal_point))
        object.__setattr__(self, "image_size", tuple(int(v) for v in self.image_size))
        if not self.focal_length > 0:
            raise ValueError(f"focal_length must be positive, got {self.focal_length}")
        w, h = self.image_size
        ox, oy = self.principal_point
        if w < 1 or h < 1:
            raise ValueError(f"image_size must be positive, got {self.image_size}")
        if not (0 <= ox < w and 0 <= oy < h):
            raise ValueError(f"principal point {self.principal_point} outside image {self.image_size}")

    @property
    def matrix(self) -> np.ndarray:
        f = self.focal_length
        ox, oy = self.principal_point
        return np.array([[f, 0.0, ox], [0.0, f, oy], [0.0, 0.0, 1.0]])


@dataclass(frozen=True)
class CameraPose:
    rotation: np.ndarray     # camera-to-world, 3x3
    translation: np.ndarray  # camera centre in world units

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if np.abs(r.T @ r - np.eye(3)).max() > 1e-9:
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(r) - 1.0) > 1e-9:
            raise ValueError("rotation determinant must be +1")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def look_at(cls, position, target, up=(0.0, 0.0, 1.0)) -> "CameraPose":
        position = np.asarray(position, dtype=np.float64)
        forward = np.asarray(target, dtype=np.float64) - position
        forward /= np.linalg.norm(forward)
        right = np.cross(forward, np.asarray(up, dtype=np.float64))
        if np.linalg.norm(right) < 1e-12:
            raise ValueError("up vector parallel to viewing direction")
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)
        rot = np.stack([right, down, forward], axis=1)
        # re-orthonormalise to keep the 1e-9 invariant after float round-off
        u, _, vt = np.linalg.svd(rot)
        return cls(u @ vt, position)

    @property
    def extrinsic(self) -> np.ndarray:
        """World-to-camera ``[R^T | -R^T T]`` as a 3x4 matrix."""
        rt = self.rotation.T
        return np.hstack([rt, (-rt @ self.translation)[:, None]])


@dataclass(frozen=True)
class SoftMatte:
    values: np.ndarray  # (height, width) in [0, 1]

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2:
            raise ValueError("matte must be two dimensional")
        if v.size and (v.min() < 0.0 or v.max() > 1.0):
            raise ValueError("matte values must lie in [0, 1]")
        object.__setattr__(self, "values", v)

    @property
    def size(self) -> tuple[int, int]:
        h, w = self.values.shape
        return w, h


@dataclass(frozen=True)
class CameraView:
    intrinsics: CameraIntrinsics
    pose: CameraPose
    matte: SoftMatte

    def __post_init__(self):
        if self.matte.size != self.intrinsics.image_size:
            raise ShapeMismatch(
                f"matte size {self.matte.size} != image size {self.intrinsics.image_size}")

    @property
    def projection(self) -> np.ndarray:
        return self.intrinsics.matrix @ self.pose.extrinsic


@dataclass
class VoxelGrid:
    """Occupancy field indexed ``values[ix, iy, iz]`` over an axis-aligned box."""

    values: np.ndarray
    bbox_min: np.ndarray
    bbox_max: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.ndim != 3 or min(self.values.shape) < 1:
            raise ValueError(f"voxel grid must be 3D and non-empty, got {self.values.shape}")
        self.bbox_min = np.asarray(self.bbox_min, dtype=np.float64).reshape(3)
        self.bbox_max = np.asarray(self.bbox_max, dtype=np.float64).reshape(3)
        if not np.all(self.bbox_min < self.bbox_max):
            raise ValueError("bbox_min must be below bbox_max componentwise")

    @property
    def resolution(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.values.shape)

    @property
    def voxel_size(self) -> np.ndarray:
        return (self.bbox_max - self.bbox_min) / np.asarray(self.resolution)

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.bbox_min + self.bbox_max)

    def axis_centers(self, axis: int) -> np.ndarray:
        n = self.resolution[axis]
        return self.bbox_min[axis] + (np.arange(n) + 0.5) * self.voxel_size[axis]

    def centers(self) -> np.ndarray:
        """Voxel centres, shape ``(N, 3)``, in ``values.ravel()`` order."""
        xs, ys, zs = (self.axis_centers(a) for a in range(3))
        grid = np.stack(np.meshgrid(xs, ys, zs, indexing="ij"), axis=-1)
        return grid.reshape(-1, 3)

    def world_to_index(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points) - self.bbox_min) / self.voxel_size - 0.5

    def with_values(self, values: np.ndarray) -> "VoxelGrid":
        return VoxelGrid(values, self.bbox_min.copy(), self.bbox_max.copy())


def project_voxel(center, view: CameraView) -> tuple[float, float, float]:
    """Pinhole projection of a world point; returns ``(x, y, depth)``.

    Raises
    ------
    BehindCamera
        If the point is not strictly in front of the camera.
    """
    center = np.asarray(center, dtype=np.float64)
    if not np.all(np.isfinite(center)):
        raise ValueError("voxel centre must be finite")
    ax, ay, alpha = view.projection @ np.append(center, 1.0)
    if alpha <= 0:
        raise BehindCamera(f"point {center.tolist()} has camera depth {alpha:.6g}")
    return float(ax / alpha), float(ay / alpha), float(alpha)


def sample_matte(matte: SoftMatte, x: float, y: float) -> float:
    """Bilinear matte lookup with pixel centres on integer coordinates.

    Coordinates outside the pixel footprint ``[-0.5, size - 0.5)`` read as 0.
    """
    w, h = matte.size
    return float(kernels._pykernels.bilinear_sample(matte.values, w, h, x, y))


def fuse_occupancy(per_view, mode: FusionMode = FusionMode.PRODUCT) -> float:
    p = np.asarray(per_view, dtype=np.float64).reshape(-1)
    if p.size == 0:
        raise EmptyViewList("occupancy fusion needs at least one view")
    if mode is FusionMode.PRODUCT:
        out = np.prod(p)
    else:
        out = np.prod(1.0 / (1.0 + np.exp(p)))
    return float(np.clip(out, 0.0, 1.0))


def _as_resolution(resolution) -> tuple[int, int, int]:
    if np.isscalar(resolution):
        resolution = (resolution,) * 3
    res = tuple(int(r) for r in resolution)
    if len(res) != 3 or min(res) < 1:
        raise ValueError(f"resolution must be three positive integers, got {resolution}")
    return res


def pack_views(views):
    """Stack projections and zero-padded mattes for the occupancy kernel."""
    proj = np.ascontiguousarray(np.stack([v.projection for v in views]), dtype=np.float64)
    hmax = max(v.matte.values.shape[0] for v in views)
    wmax = max(v.matte.values.shape[1] for v in views)
    mattes = np.zeros((len(views), hmax, wmax))
    sizes = np.zeros((len(views), 2), dtype=np.int64)
    for i, v in enumerate(views):
        h, w = v.matte.values.shape
        mattes[i, :h, :w] = v.matte.values
        sizes[i] = (w, h)
    return proj, mattes, sizes


def build_pvh(views, bbox, resolution, mode: FusionMode = FusionMode.PRODUCT) -> VoxelGrid:
    """Probabilistic visual hull over ``bbox = (bbox_min, bbox_max)``.

    Every voxel centre is projected into each view and the bilinear matte
    value taken as that view's evidence; views that see the voxel behind the
    camera or outside the frame contribute 0.
    """
    views = list(views)
    if not views:
        raise EmptyViewList("build_pvh needs at least one camera view")
    res = _as_resolution(resolution)
    template = VoxelGrid(np.zeros(res), bbox[0], bbox[1])
    proj, mattes, sizes = pack_views(views)
    centers = np.ascontiguousarray(template.centers())
    occ = kernels.pvh_occupancy(centers, proj, mattes, sizes, mode.kernel_code)
    return template.with_values(occ.reshape(res))


def _check_factor(factor) -> int:
    if int(factor) != factor or int(factor) not in SUPPORTED_FACTORS:
        raise UnsupportedFactor(f"factor must be one of {{1, 2, 4}}, got {factor}")
    return int(factor)


def _cubic_weights(t: np.ndarray) -> np.ndarray:
    """Four-point Lagrange weights for nodes -1, 0, 1, 2 at offset ``t``."""
    return np.stack([
        -t * (t - 1.0) * (t - 2.0) / 6.0,
        (t + 1.0) * (t - 1.0) * (t - 2.0) / 2.0,
        -(t + 1.0) * t * (t - 2.0) / 2.0,
        (t + 1.0) * t * (t - 1.0) / 6.0,
    ], axis=-1)


def _upsample_axis(values: np.ndarray, axis: int, factor: int) -> np.ndarray:
    n = values.shape[axis]
    u = (np.arange(n * factor) + 0.5) / factor - 0.5
    base = np.floor(u).astype(np.int64)
    w = _cubic_weights(u - base)
    out = 0.0
    for k in range(4):
        idx = np.clip(base + k - 1, 0, n - 1)
        shape = [1] * values.ndim
        shape[axis] = -1
        out = out + np.take(values, idx, axis=axis) * w[:, k].reshape(shape)
    return out


def upsample_cubic(values: np.ndarray, factor: int) -> np.ndarray:
    """Separable tricubic upsampling without clamping (edge-replicated stencil)."""
    out = np.asarray(values, dtype=np.float64)
    for axis in range(3):
        out = _upsample_axis(out, axis, factor)
    return out


def tricubic_upsample(grid: VoxelGrid, factor: int) -> VoxelGrid:
    """Upsample by 1, 2 or 4 with a local cubic kernel; output clamped to [0, 1].

    The kernel interpolates the four nearest samples per axis with a cubic
    polynomial, so any per-axis polynomial of degree three or less is
    reproduced exactly away from the grid edges.
    """
    factor = _check_factor(factor)
    if factor == 1:
        return grid.with_values(grid.values.copy())
    up = upsample_cubic(grid.values, factor)
    return grid.with_values(np.clip(up, 0.0, 1.0).astype(grid.values.dtype, copy=False))


def box_downsample(grid: VoxelGrid, factor: int) -> VoxelGrid:
    """Average non-overlapping ``factor^3`` blocks."""
    factor = int(factor)
    if factor < 1 or any(n % factor for n in grid.resolution):
        raise UnsupportedFactor(f"resolution {grid.resolution} not divisible by {factor}")
    if factor == 1:
        return grid.with_values(grid.values.copy())
    nx, ny, nz = (n // factor for n in grid.resolution)
    v = grid.values.reshape(nx, factor, ny, factor, nz, factor).mean(axis=(1, 3, 5))
    return grid.with_values(v)


def _rotation_z(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def rotate_volume(grid: VoxelGrid, angle: float) -> VoxelGrid:
    """Rotate the occupancy field about the vertical axis through the bbox centre.

    Trilinear resampling; samples falling outside the grid read as 0.
    """
    if not np.isfinite(angle):
        raise ValueError("angle must be finite")
    if angle == 0.0:
        return grid.with_values(grid.values.copy())
    centre = grid.center
    pts = grid.centers()
    # pull back each output centre through the inverse rotation
    src = (pts - centre) @ _rotation_z(angle) + centre
    coords = grid.world_to_index(src).T
    out = ndimage.map_coordinates(grid.values.astype(np.float64), coords, order=1,
                                  mode="grid-constant", cval=0.0, prefilter=False)
    out = np.clip(out.reshape(grid.resolution), 0.0, 1.0)
    return grid.with_values(out.astype(grid.values.dtype, copy=False))


def rotate_skeleton(frame: SkeletonFrame, angle: float, center) -> SkeletonFrame:
    center = np.asarray(center, dtype=np.float64).reshape(3)
    joints = (frame.joints - center) @ _rotation_z(angle).T + center
    return SkeletonFrame(joints, frame.names)
