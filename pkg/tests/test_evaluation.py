import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from pvhnet import autodiff as ad
from pvhnet.errors import BadSubset, LengthMismatch, ShapeMismatch
from pvhnet.evaluation import per_joint_error, voxel_mse_report
from pvhnet.geometry import VoxelGrid
from pvhnet.skeleton import SkeletonFrame


def _frames(arr):
    return [SkeletonFrame(a) for a in arr]


def test_identical_streams_give_zero():
    j = np.random.default_rng(0).normal(size=(3, 17, 3))
    r = per_joint_error(_frames(j), _frames(j))
    assert r.mean == 0 and r.per_frame == [0.0] * 3 and r.per_joint == [0.0] * 17


def test_pythagorean_displacement():
    truth = np.zeros((1, 17, 3))
    est = truth.copy()
    est[0, 6] = [3.0, 4.0, 0.0]
    r = per_joint_error(_frames(est), _frames(truth))
    assert r.per_frame[0] == pytest.approx(5 / 17, abs=1e-12)
    assert r.per_joint[6] == 5.0 and r.mean == pytest.approx(0.2941, abs=1e-4)


def test_report_json_in_millimetres():
    j = np.zeros((2, 17, 3))
    doc = json.loads(per_joint_error(_frames(j + 62.5 / np.sqrt(3)), _frames(j)).to_json())
    assert doc["units"] == "mm" and doc["mean"] == pytest.approx(62.5)
    assert "62.5 mm" in per_joint_error(_frames(j + 62.5 / np.sqrt(3)), _frames(j)).summary()


def test_subset_forms():
    rng = np.random.default_rng(1)
    est, truth = rng.normal(size=(2, 26, 3)), rng.normal(size=(2, 17, 3))
    pairs = [(i, i) for i in range(17)]
    a = per_joint_error(_frames(est), _frames(truth), pairs)
    b = per_joint_error(_frames(est), _frames(truth), {i: i for i in range(17)})
    c = per_joint_error(_frames(est), _frames(truth), list(range(17)))
    assert a.mean == b.mean == c.mean
    ref = np.linalg.norm(est[:, :17] - truth, axis=2).mean()
    assert a.mean == pytest.approx(ref, abs=1e-12)


def test_errors():
    j = np.zeros((2, 17, 3))
    with pytest.raises(LengthMismatch):
        per_joint_error(_frames(j), _frames(j[:1]))
    with pytest.raises(BadSubset):
        per_joint_error(_frames(j), _frames(np.zeros((2, 26, 3))))
    with pytest.raises(BadSubset):
        per_joint_error(_frames(j), _frames(j), [(0, 17)])
    with pytest.raises(BadSubset):
        per_joint_error(_frames(j), _frames(j), [])
    assert per_joint_error([], []).per_frame == []


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (3, 5, 3), elements=st.floats(-1e3, 1e3)),
       arrays(np.float64, (3, 5, 3), elements=st.floats(-1e3, 1e3)),
       arrays(np.float64, (3,), elements=st.floats(-1e4, 1e4)))
def test_rigid_translation_invariance_and_pooling(est, truth, shift):
    a = per_joint_error(_frames(est), _frames(truth))
    b = per_joint_error(_frames(est + shift), _frames(truth + shift))
    assert b.mean == pytest.approx(a.mean, rel=1e-9, abs=1e-6)
    assert a.mean == pytest.approx(np.mean(a.per_frame), rel=1e-12, abs=1e-12)
    assert min(a.per_frame) >= 0


def _grid(values):
    return VoxelGrid(values, (0, 0, 0), (1, 1, 1))


def test_volume_examples():
    t = np.random.default_rng(2).random((4, 4, 4))
    r = voxel_mse_report([_grid(t)], [_grid(t + 0.01)], [_grid(t)])
    assert r.output_mean == 0.0
    assert r.input_mean == pytest.approx(1e-4, rel=1e-9)
    assert r.input_display == pytest.approx(0.1, rel=1e-9)
    assert json.loads(r.to_json())["input_mean_e-3"] == pytest.approx(0.1)


def test_volume_mse_matches_autodiff():
    rng = np.random.default_rng(3)
    o, i, t = (rng.random((5, 6, 7)) for _ in range(3))
    r = voxel_mse_report([o], [i], [t])
    assert abs(r.output_mse[0] - ad.mse(o, t).item()) < 1e-12


def test_volume_errors():
    a = np.zeros((2, 2, 2))
    with pytest.raises(LengthMismatch):
        voxel_mse_report([a], [a, a], [a])
    with pytest.raises(ShapeMismatch):
        voxel_mse_report([a], [np.zeros((2, 2, 3))], [a])
