import math

import numpy as np
import pytest

from pvhnet.errors import DivergedLoss, EmptyDataset, ShapeMismatch, UnsupportedFactor, WrongInputResolution
from pvhnet.geometry import VoxelGrid, rotate_skeleton, rotate_volume
from pvhnet.network import build_network
from pvhnet.skeleton import SkeletonFrame
from pvhnet.training import (TrainingTriplet, _augment, denormalize_joints, infer, normalize_joints,
                             predict, pretrain_encoder, train)
from test_network import miniature

BMIN, BMAX = np.array([-400.0, -400.0, 0.0]), np.array([400.0, 400.0, 800.0])


def _blob(point, res=8):
    grid = VoxelGrid(np.zeros((res,) * 3), BMIN, BMAX)
    d = np.linalg.norm(grid.centers() - point, axis=1).reshape((res,) * 3)
    return grid.with_values(np.exp(-(d / 120.0) ** 2))


def _triplets(count=12, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(count):
        joints = rng.uniform(BMIN + 150, BMAX - 150, size=(2, 3))
        target = _blob(joints[0])
        noisy = target.with_values(np.clip(target.values + rng.normal(0, 0.05, target.values.shape), 0, 1))
        out.append(TrainingTriplet(noisy, target, SkeletonFrame(joints)))
    return out


def test_normalize_round_trip_and_range():
    grid = VoxelGrid(np.zeros((2, 2, 2)), BMIN, BMAX)
    j = np.array([[-400.0, 400.0, 400.0], [0.0, 0.0, 800.0]])
    n = normalize_joints(j, grid)
    assert n.tolist() == [-1.0, 1.0, 0.0, 0.0, 0.0, 1.0]
    assert np.allclose(denormalize_joints(n, grid), j, atol=1e-12)


def test_triplet_validation():
    a = VoxelGrid(np.zeros((4, 4, 4)), BMIN, BMAX)
    with pytest.raises(ShapeMismatch):
        TrainingTriplet(a, VoxelGrid(np.zeros((8, 8, 8)), BMIN, BMAX), SkeletonFrame(np.zeros((2, 3))))
    with pytest.raises(ShapeMismatch):
        TrainingTriplet(a, VoxelGrid(np.zeros((4, 4, 4)), BMIN, BMAX + 1), SkeletonFrame(np.zeros((2, 3))))


def test_pretraining_leaves_decoder_untouched():
    model = build_network(miniature())
    before = model.checksum("decoder")
    enc_before = model.checksum("encoder")
    pretrain_encoder(model, _triplets(), 2)
    assert model.checksum("decoder") == before
    assert model.checksum("encoder") != enc_before


def test_pretraining_decreases_over_windows():
    model = build_network(miniature(batch_size=4))
    _, history = pretrain_encoder(model, _triplets(16), 20, seed=3)
    windows = [np.mean(history[i:i + 5]) for i in range(0, 20, 5)]
    assert all(b < a for a, b in zip(windows, windows[1:]))


def test_zero_epochs_is_identity():
    model = build_network(miniature())
    before = model.checksum()
    _, history = train(model, _triplets(), 0)
    assert history == [] and model.checksum() == before
    _, history = pretrain_encoder(model, _triplets(), 0)
    assert history == [] and model.checksum() == before


def test_training_is_deterministic():
    runs = []
    for _ in range(2):
        model = build_network(miniature(batch_size=4))
        _, history = train(model, _triplets(), 2, augmentation=True, seed=5)
        runs.append((model.checksum(), history))
    assert runs[0] == runs[1]


def test_training_reduces_dual_loss():
    model = build_network(miniature(batch_size=4, lam=0.1))
    _, history = train(model, _triplets(16), 15, augmentation=False, seed=1)
    assert history[-1] < 0.5 * history[0]


def test_callback_receives_each_epoch():
    seen = []
    train(build_network(miniature()), _triplets(4), 3, callback=lambda e, l: seen.append((e, l)))
    assert [e for e, _ in seen] == [0, 1, 2]


def test_empty_and_diverging_inputs():
    model = build_network(miniature())
    with pytest.raises(EmptyDataset):
        train(model, [], 1)
    with pytest.raises(EmptyDataset):
        pretrain_encoder(model, [], 1)
    bad = _triplets(2)
    bad[0].target_volume.values[0, 0, 0] = np.nan
    with pytest.raises(DivergedLoss):
        train(model, bad, 1, augmentation=False)


def test_resolution_and_joint_count_checks():
    model = build_network(miniature())
    grid = VoxelGrid(np.zeros((4, 4, 4)), BMIN, BMAX)
    t = TrainingTriplet(grid, grid, SkeletonFrame(np.zeros((2, 3))))
    with pytest.raises(WrongInputResolution):
        train(model, [t], 1)
    t = _triplets(1)[0]
    t = TrainingTriplet(t.input_volume, t.target_volume, SkeletonFrame(np.zeros((3, 3))))
    with pytest.raises(ShapeMismatch):
        train(model, [t], 1)


def test_augmentation_rotates_volume_and_joints_together():
    joints = np.array([[250.0, -50.0, 400.0], [0.0, 0.0, 400.0]])
    target = _blob(joints[0], res=16)
    t = TrainingTriplet(target, target, SkeletonFrame(joints))
    rng = np.random.default_rng(11)
    x, y, j = _augment([t], [0], rng)
    angle = np.random.default_rng(11).uniform(0.0, 2.0 * math.pi)
    assert np.array_equal(y[0, ..., 0], rotate_volume(target, angle).values)
    moved = rotate_skeleton(t.target_joints, angle, target.center).joints
    assert np.allclose(denormalize_joints(j[0], target), moved, atol=1e-9)
    # the blob peak follows the rotated joint
    peak = target.centers()[np.argmax(y[0, ..., 0])]
    assert np.linalg.norm(peak - moved[0]) < 0.9 * target.voxel_size[0]


def test_predict_and_infer():
    model = build_network(miniature())
    trip = _triplets(3)
    lat, vol = predict(model, np.stack([t.input_volume.values for t in trip]), batch_size=2)
    assert lat.shape == (3, 6) and vol.shape == (3, 8, 8, 8)
    skel, out = infer(model, trip[0].input_volume)
    assert skel.joint_count == 2 and out.resolution == (8, 8, 8)
    assert out.values.min() >= 0.0 and out.values.max() <= 1.0
    assert np.allclose(skel.joints, denormalize_joints(lat[0], trip[0].input_volume))
    with pytest.raises(UnsupportedFactor):
        infer(model, trip[0].input_volume, scale=2)
    with pytest.raises(WrongInputResolution):
        infer(model, VoxelGrid(np.zeros((4, 4, 4)), BMIN, BMAX))
