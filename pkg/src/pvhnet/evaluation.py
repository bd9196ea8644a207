"""Pose and volume error measures with their baselines."""

from __future__ import annotations

import json
from collections.abc import Mapping
from dataclasses import asdict, dataclass

import numpy as np

from pvhnet.errors import BadSubset, LengthMismatch, ShapeMismatch

DISPLAY_SCALE = 1e3  # voxel MSE is shown in units of 10^-3


@dataclass
class PoseErrorReport:
    per_frame: list[float]         # mean joint error of each frame, mm
    per_joint: list[float]         # mean over frames for each subset entry, mm
    mean: float                    # pooled over all (frame, joint) pairs, mm
    subset: list[tuple[int, int]]  # (estimated index, truth index)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["subset"] = [list(p) for p in self.subset]
        d["units"] = "mm"
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def summary(self) -> str:
        return f"mean per-joint error {self.mean:.1f} mm over {len(self.per_frame)} frames"


@dataclass
class VolumeErrorReport:
    output_mse: list[float]
    input_mse: list[float]
    output_mean: float
    input_mean: float

    @property
    def output_display(self) -> float:
        return self.output_mean * DISPLAY_SCALE

    @property
    def input_display(self) -> float:
        return self.input_mean * DISPLAY_SCALE

    def to_dict(self) -> dict:
        d = asdict(self)
        d["output_mean_e-3"] = self.output_display
        d["input_mean_e-3"] = self.input_display
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def summary(self) -> str:
        return (f"voxel MSE x1e-3: output {self.output_display:.3f}, "
                f"tricubic input {self.input_display:.3f}")


def _joints(frame) -> np.ndarray:
    return np.asarray(getattr(frame, "joints", frame), dtype=np.float64).reshape(-1, 3)


def _resolve_subset(subset, j_est: int, j_true: int) -> list[tuple[int, int]]:
    if subset is None:
        if j_est != j_true:
            raise BadSubset(f"streams have {j_est} and {j_true} joints; an explicit subset map is needed")
        pairs = [(j, j) for j in range(j_est)]
    elif isinstance(subset, Mapping):
        pairs = [(int(k), int(v)) for k, v in subset.items()]
    else:
        pairs = [(int(p), int(p)) if np.ndim(p) == 0 else (int(p[0]), int(p[1])) for p in subset]
    if not pairs:
        raise BadSubset("joint subset is empty")
    for e, t in pairs:
        if not (0 <= e < j_est and 0 <= t < j_true):
            raise BadSubset(f"subset pair ({e}, {t}) out of range for {j_est} estimated / {j_true} truth joints")
    return pairs


def per_joint_error(estimated, truth, subset=None) -> PoseErrorReport:
    """Euclidean joint error per frame, averaged over the subset joints.

    ``subset`` is ``None`` (all joints, equal counts), a list of indices valid
    in both streams, a list of ``(estimated, truth)`` pairs or a mapping from
    estimated to truth index. No alignment is applied.
    """
    estimated, truth = list(estimated), list(truth)
    if len(estimated) != len(truth):
        raise LengthMismatch(f"{len(estimated)} estimated frames vs {len(truth)} truth frames")
    if not estimated:
        return PoseErrorReport([], [], 0.0, [])
    est = np.stack([_joints(f) for f in estimated])
    tru = np.stack([_joints(f) for f in truth])
    pairs = _resolve_subset(subset, est.shape[1], tru.shape[1])
    e_idx = [e for e, _ in pairs]
    t_idx = [t for _, t in pairs]
    dist = np.linalg.norm(est[:, e_idx] - tru[:, t_idx], axis=2)
    return PoseErrorReport(dist.mean(axis=1).tolist(), dist.mean(axis=0).tolist(), float(dist.mean()), pairs)


def _values(grid) -> np.ndarray:
    return np.asarray(getattr(grid, "values", grid), dtype=np.float64)


def voxel_mse_report(outputs, inputs, truths) -> VolumeErrorReport:
    """Per-frame MSE against the native volume for model outputs and tricubic inputs."""
    outputs, inputs, truths = list(outputs), list(inputs), list(truths)
    if not (len(outputs) == len(inputs) == len(truths)):
        raise LengthMismatch(f"{len(outputs)} outputs, {len(inputs)} inputs, {len(truths)} truths")
    out_mse, in_mse = [], []
    for k, (o, i, t) in enumerate(zip(outputs, inputs, truths)):
        o, i, t = _values(o), _values(i), _values(t)
        if o.shape != t.shape or i.shape != t.shape:
            raise ShapeMismatch(f"frame {k}: output {o.shape}, input {i.shape}, truth {t.shape}")
        out_mse.append(float(np.mean((o - t) ** 2)))
        in_mse.append(float(np.mean((i - t) ** 2)))
    mean = lambda v: float(np.mean(v)) if v else 0.0
    return VolumeErrorReport(out_mse, in_mse, mean(out_mse), mean(in_mse))
