"""Dual-loss training, encoder pretraining and inference for :class:`AutoEncoder`."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from pvhnet import autodiff as ad
from pvhnet.errors import DivergedLoss, EmptyDataset, ShapeMismatch, UnsupportedFactor, WrongInputResolution
from pvhnet.geometry import VoxelGrid, rotate_skeleton, rotate_volume, tricubic_upsample
from pvhnet.network import AutoEncoder
from pvhnet.optim import AdadeltaState, adadelta_step
from pvhnet.skeleton import SkeletonFrame

log = logging.getLogger(__name__)


@dataclass
class TrainingTriplet:
    input_volume: VoxelGrid
    target_volume: VoxelGrid
    target_joints: SkeletonFrame

    def __post_init__(self):
        a, b = self.input_volume, self.target_volume
        if a.resolution != b.resolution:
            raise ShapeMismatch(f"input {a.resolution} and target {b.resolution} resolutions differ")
        if not (np.allclose(a.bbox_min, b.bbox_min) and np.allclose(a.bbox_max, b.bbox_max)):
            raise ShapeMismatch("input and target volumes must share a bounding box")


def normalize_joints(joints: np.ndarray, grid: VoxelGrid) -> np.ndarray:
    """World millimetres to the bbox frame, ``[-1, 1]`` per axis."""
    half = 0.5 * (grid.bbox_max - grid.bbox_min)
    return ((np.asarray(joints).reshape(-1, 3) - grid.center) / half).reshape(-1)


def denormalize_joints(latent: np.ndarray, grid: VoxelGrid) -> np.ndarray:
    half = 0.5 * (grid.bbox_max - grid.bbox_min)
    return np.asarray(latent, dtype=np.float64).reshape(-1, 3) * half + grid.center


def dual_loss(latent, output_volume, target_joints, target_volume, lam: float = 1e-3) -> ad.Tensor:
    """Volume MSE plus ``lam`` times the joint MSE (mean over the ``3J`` coordinates).

    With ``lam == 0`` the joint term is dropped so targets cannot reach a gradient.
    """
    loss = ad.mse(output_volume, target_volume)
    if lam:
        loss = ad.add(loss, ad.scale(ad.mse(latent, target_joints), lam))
    return loss


def _stack(triplets, model: AutoEncoder):
    res = model.config.input_resolution
    dtype = model.config.np_dtype
    for t in triplets:
        if t.input_volume.resolution != (res,) * 3:
            raise WrongInputResolution(
                f"triplet volumes are {t.input_volume.resolution}, network expects {res}^3")
        if t.target_joints.joint_count != model.config.joint_count:
            raise ShapeMismatch(f"triplet has {t.target_joints.joint_count} joints, "
                                f"network expects {model.config.joint_count}")
    x = np.stack([t.input_volume.values for t in triplets]).astype(dtype)[..., None]
    y = np.stack([t.target_volume.values for t in triplets]).astype(dtype)[..., None]
    j = np.stack([normalize_joints(t.target_joints.joints, t.input_volume) for t in triplets])
    return x, y, j.astype(dtype)


def _augment(triplets, idx, rng):
    """Uniform random vertical-axis rotation applied to volumes and joints alike."""
    xs, ys, js = [], [], []
    for i in idx:
        t = triplets[i]
        angle = rng.uniform(0.0, 2.0 * math.pi)
        xs.append(rotate_volume(t.input_volume, angle).values)
        ys.append(rotate_volume(t.target_volume, angle).values)
        frame = rotate_skeleton(t.target_joints, angle, t.input_volume.center)
        js.append(normalize_joints(frame.joints, t.input_volume))
    return np.stack(xs)[..., None], np.stack(ys)[..., None], np.stack(js)


def _batches(n: int, batch_size: int, rng):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def _check_finite(value: float, epoch: int, step: int) -> None:
    if not math.isfinite(value):
        raise DivergedLoss(f"non-finite loss {value} at epoch {epoch + 1}, batch {step + 1}")


def _new_state(model: AutoEncoder) -> AdadeltaState:
    return AdadeltaState(rho=model.config.rho, epsilon=model.config.epsilon)


def pretrain_encoder(model: AutoEncoder, triplets, epochs: int, seed: int = 0,
                     state: AdadeltaState | None = None, augmentation: bool = False):
    """Fit encoder and latent layers to the joint targets alone.

    Decoder parameters are never touched. Returns ``(model, history)`` with the
    mean per-epoch joint MSE.
    """
    triplets = list(triplets)
    if not triplets:
        raise EmptyDataset("pretraining needs at least one triplet")
    x_all, _, j_all = _stack(triplets, model)
    params = model.parameters("encoder")
    state = state or _new_state(model)
    rng = np.random.default_rng(seed)
    history = []
    dtype = model.config.np_dtype
    for epoch in range(epochs):
        total = 0.0
        for step, idx in enumerate(_batches(len(triplets), model.config.batch_size, rng)):
            if augmentation:
                x, _, j = _augment(triplets, idx, rng)
                x, j = x.astype(dtype), j.astype(dtype)
            else:
                x, j = x_all[idx], j_all[idx]
            with ad.Tape() as tape:
                latent, _ = model.encode(ad.Tensor(x))
                loss = ad.mse(latent, j)
            value = loss.item()
            _check_finite(value, epoch, step)
            grads = ad.backward(tape, loss, params)
            adadelta_step(params, grads, state)
            total += value * len(idx)
        history.append(total / len(triplets))
        log.info("pretrain epoch %d joint mse %.6g", epoch + 1, history[-1])
    return model, history


def train(model: AutoEncoder, triplets, epochs: int, augmentation: bool = True, seed: int = 0,
          state: AdadeltaState | None = None, callback=None):
    """Adadelta on the dual loss with seeded per-epoch shuffling.

    Returns ``(model, history)`` where ``history[e]`` is the mean dual loss of
    epoch ``e``. ``callback(epoch, loss)`` is invoked after every epoch.
    """
    triplets = list(triplets)
    if not triplets:
        raise EmptyDataset("training needs at least one triplet")
    x_all, y_all, j_all = _stack(triplets, model)
    params = model.parameters()
    state = state or _new_state(model)
    rng = np.random.default_rng(seed)
    lam = model.config.lam
    dtype = model.config.np_dtype
    history = []
    for epoch in range(epochs):
        total = 0.0
        for step, idx in enumerate(_batches(len(triplets), model.config.batch_size, rng)):
            if augmentation:
                x, y, j = (a.astype(dtype) for a in _augment(triplets, idx, rng))
            else:
                x, y, j = x_all[idx], y_all[idx], j_all[idx]
            with ad.Tape() as tape:
                latent, volume = model.forward(ad.Tensor(x))
                loss = dual_loss(latent, volume, j, y, lam)
            value = loss.item()
            _check_finite(value, epoch, step)
            grads = ad.backward(tape, loss, params)
            adadelta_step(params, grads, state)
            total += value * len(idx)
        history.append(total / len(triplets))
        log.info("train epoch %d dual loss %.6g", epoch + 1, history[-1])
        if callback is not None:
            callback(epoch, history[-1])
    return model, history


def predict(model: AutoEncoder, volumes: np.ndarray, batch_size: int | None = None):
    """Forward pass without a tape over ``(M, S, S, S)`` inputs."""
    batch_size = batch_size or model.config.batch_size
    lat, vol = [], []
    for start in range(0, len(volumes), batch_size):
        x = np.asarray(volumes[start:start + batch_size], dtype=model.config.np_dtype)[..., None]
        latent, volume = model.forward(ad.Tensor(x))
        lat.append(latent.data)
        vol.append(volume.data[..., 0])
    return np.concatenate(lat), np.concatenate(vol)


def infer(model: AutoEncoder, coarse: VoxelGrid, scale: int | None = None):
    """Coarse PVH to ``(SkeletonFrame, VoxelGrid)`` at the network resolution."""
    cfg = model.config
    if scale is not None and scale != cfg.scale:
        raise UnsupportedFactor(f"model was built for scale {cfg.scale}, asked for {scale}")
    if coarse.resolution != (cfg.coarse_resolution,) * 3:
        raise WrongInputResolution(
            f"coarse grid must be {cfg.coarse_resolution}^3, got {coarse.resolution}")
    factor = cfg.input_resolution // cfg.coarse_resolution
    up = tricubic_upsample(coarse, factor)
    latent, volume = predict(model, up.values[None], 1)
    joints = denormalize_joints(latent[0], up)
    out = up.with_values(np.clip(volume[0].astype(np.float64), 0.0, 1.0))
    return SkeletonFrame(joints), out
