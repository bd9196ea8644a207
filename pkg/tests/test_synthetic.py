import math

import numpy as np
import pytest

import oracles
from pvhnet.errors import CycleDetected, ShapeMismatch
from pvhnet.geometry import CameraIntrinsics, CameraPose
from pvhnet.synthetic import (BodyModel, MotionSpec, RigSpec, body_capsules, default_bbox, euler_matrix,
                              forward_kinematics, generate_dataset, render_matte)


def _two_bone():
    return BodyModel([-1, 0, 1], [[0, 0, 0], [100.0, 0, 0], [100.0, 0, 0]], [10.0, 10.0, 10.0])


def test_rest_pose_is_offset_sum():
    body = BodyModel.humanoid(17)
    frame = forward_kinematics(body, np.zeros((17, 3)))
    assert np.allclose(frame.joints, body.rest_joints(), atol=1e-12)
    assert frame.names == body.names


def test_root_translation_moves_everything():
    body = BodyModel.humanoid(26)
    t = np.array([10.0, -20.0, 30.0])
    frame = forward_kinematics(body, np.zeros((26, 3)), root_translation=t)
    assert np.allclose(frame.joints, body.rest_joints() + t, atol=1e-12)


def test_elbow_bend_of_ninety_degrees():
    pose = np.zeros((3, 3))
    pose[1, 2] = math.pi / 2  # rotate about z at the elbow
    frame = forward_kinematics(_two_bone(), pose)
    assert np.allclose(frame.joints, [[0, 0, 0], [100, 0, 0], [100, 100, 0]], atol=1e-12)


def test_leaf_rotation_moves_nothing():
    pose = np.zeros((3, 3))
    pose[2] = [0.3, -1.0, 2.0]
    assert np.allclose(forward_kinematics(_two_bone(), pose).joints, _two_bone().rest_joints(), atol=1e-12)


def test_bone_lengths_preserved_under_motion():
    body = BodyModel.humanoid(17)
    motion = MotionSpec.default(body, 20)
    rest = body.rest_joints()
    lengths = [np.linalg.norm(rest[j] - rest[p]) for j, p in enumerate(body.parents) if p >= 0]
    for i in (0, 7, 19):
        pose, r, t, _ = motion.pose_at(i, seed=3)
        j = forward_kinematics(body, pose, r, t).joints
        moved = [np.linalg.norm(j[k] - j[p]) for k, p in enumerate(body.parents) if p >= 0]
        assert np.allclose(moved, lengths, atol=1e-9)


def test_euler_order():
    a, b, c = 0.2, -0.4, 0.9
    rx = euler_matrix((a, 0, 0))
    ry = euler_matrix((0, b, 0))
    rz = euler_matrix((0, 0, c))
    assert np.allclose(euler_matrix((a, b, c)), rx @ ry @ rz, atol=1e-15)


def test_cycle_and_shape_errors():
    with pytest.raises(CycleDetected):
        BodyModel([-1, 2, 1], np.zeros((3, 3)), np.ones(3))
    with pytest.raises(ShapeMismatch):
        BodyModel([-1, 0], np.zeros((3, 3)), np.ones(3))
    with pytest.raises(ShapeMismatch):
        forward_kinematics(_two_bone(), np.zeros((2, 3)))
    with pytest.raises(ValueError):
        BodyModel.humanoid(20)


def test_body_dictionary_round_trip():
    body = BodyModel.humanoid(26)
    again = BodyModel.from_dict(body.to_dict())
    assert again.parents == body.parents and np.array_equal(again.offsets, body.offsets)


def test_humanoid_height_is_human():
    assert 1600 < BodyModel.humanoid(17).height() < 1900
    assert BodyModel.humanoid(26).joint_count == 26


def _camera(size=(40, 30), f=50.0):
    k = CameraIntrinsics(f, ((size[0] - 1) / 2, (size[1] - 1) / 2), size)
    return k, CameraPose(np.eye(3), np.zeros(3))


def test_sphere_disc_radius_and_centre():
    k, pose = _camera((64, 64), 200.0)
    centre, radius = np.array([0.0, 0.0, 2000.0]), 100.0
    matte = render_matte([(centre, centre, radius)], k, pose).values
    area = matte.sum()
    expected = k.focal_length * radius / math.sqrt(centre[2] ** 2 - radius ** 2)
    assert abs(math.sqrt(area / math.pi) - expected) < 1.0
    ys, xs = np.nonzero(matte)
    cy = (matte[ys, xs] * ys).sum() / area
    cx = (matte[ys, xs] * xs).sum() / area
    assert abs(cx - 31.5) < 0.1 and abs(cy - 31.5) < 0.1


def test_sphere_matches_ray_oracle():
    k, pose = _camera((24, 20), 40.0)
    centre, radius = np.array([60.0, -30.0, 900.0]), 150.0
    ours = render_matte([(centre, centre, radius)], k, pose).values
    ref = oracles.sphere_matte(40.0, k.principal_point, (24, 20), np.eye(3), np.zeros(3), centre, radius)
    assert np.abs(ours - ref).max() <= 1.0 / 16 + 1e-12


def test_matte_range_and_empty_outside_frustum():
    body = BodyModel.humanoid(17)
    caps = body_capsules(body, forward_kinematics(body, np.zeros((17, 3)), root_translation=(0, 0, 3000)))
    k, pose = _camera()
    matte = render_matte(caps, k, pose).values
    assert matte.min() >= 0 and matte.max() <= 1 and matte.max() > 0
    behind = body_capsules(body, forward_kinematics(body, np.zeros((17, 3)), root_translation=(0, 0, -3000)))
    assert not render_matte(behind, k, pose).values.any()
    aside = body_capsules(body, forward_kinematics(body, np.zeros((17, 3)), root_translation=(9000, 0, 500)))
    assert not render_matte(aside, k, pose).values.any()


def test_motion_validation_and_round_trip():
    z = np.zeros((3, 3))
    with pytest.raises(ValueError):
        MotionSpec(z + 2.0, z, z, z + 2.0)
    with pytest.raises(ValueError):
        MotionSpec(z, z, z, z, frame_count=0)
    with pytest.raises(ShapeMismatch):
        MotionSpec(z, np.zeros((2, 3)), z, z)
    m = MotionSpec.default(BodyModel.humanoid(17), 10)
    again = MotionSpec.from_dict(m.to_dict())
    for i in (0, 5):
        a, b = m.pose_at(i, 1), again.pose_at(i, 1)
        assert all(np.array_equal(x, y) for x, y in zip(a, b))
    assert not np.array_equal(m.pose_at(3, 1)[0], m.pose_at(3, 2)[0])


def test_rig_geometry():
    rig = RigSpec()
    cams = rig.cameras()
    assert len(cams) == 4
    for k, pose in cams:
        assert math.hypot(pose.translation[0], pose.translation[1]) == pytest.approx(3500.0)
        # optical axis points at the look-at target
        axis = pose.rotation[:, 2]
        to_target = np.array(rig.look_at) - pose.translation
        assert np.allclose(axis, to_target / np.linalg.norm(to_target), atol=1e-12)
    assert RigSpec.from_dict(rig.to_dict()) == rig


@pytest.fixture(scope="module")
def small_dataset():
    body = BodyModel.humanoid(17)
    motion = MotionSpec.default(body, 4)
    rig = RigSpec(image_size=(64, 64), focal_length=100.0)
    return generate_dataset(body, motion, rig, coarse_res=8, scale=2, seed=4, keep_mattes=True, supersample=2)


def test_dataset_contents(small_dataset):
    ds = small_dataset
    assert len(ds) == 4 and len(ds.triplets) == 4
    t = ds.triplets[0]
    assert t.input_volume.resolution == t.target_volume.resolution == (16, 16, 16)
    assert ds.frames[0].coarse.resolution == (8, 8, 8)
    assert np.abs(t.input_volume.values - t.target_volume.values).mean() > 0
    assert t.target_volume.values.max() > 0.5
    lo, hi = ds.bbox
    for s in ds.skeletons:
        assert np.all(s.joints > lo) and np.all(s.joints < hi)
    assert len(ds.frames[0].mattes) == 4


def test_dataset_is_bitwise_deterministic(small_dataset):
    body = BodyModel.humanoid(17)
    again = generate_dataset(body, MotionSpec.default(body, 4), RigSpec(image_size=(64, 64), focal_length=100.0),
                             coarse_res=8, scale=2, seed=4, supersample=2)
    for a, b in zip(small_dataset.triplets, again.triplets):
        assert a.target_volume.values.tobytes() == b.target_volume.values.tobytes()
        assert a.target_joints.joints.tobytes() == b.target_joints.joints.tobytes()


def test_scale_one_input_equals_coarse():
    body = BodyModel.humanoid(17)
    ds = generate_dataset(body, MotionSpec.still(17, 1), RigSpec(image_size=(48, 48), focal_length=75.0),
                          coarse_res=8, scale=1, supersample=1)
    f = ds.frames[0]
    assert np.array_equal(f.triplet.input_volume.values, f.coarse.values)
    assert np.array_equal(f.triplet.target_volume.values, f.coarse.values)


def test_default_bbox_contains_the_body():
    lo, hi = default_bbox()
    body = BodyModel.humanoid(17)
    motion = MotionSpec.default(body, 200)
    for i in range(0, 200, 13):
        pose, r, t, _ = motion.pose_at(i, 0)
        j = forward_kinematics(body, pose, r, t).joints
        assert np.all(j - 100 > lo) and np.all(j + 100 < hi)
