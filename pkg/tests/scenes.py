"""Small synthetic scenes shared by several test modules."""

from __future__ import annotations

import math

import numpy as np

from pvhnet.geometry import CameraIntrinsics, CameraPose, CameraView, SoftMatte
from pvhnet.synthetic import render_matte

SPHERE_CENTRE = np.array([30.0, -20.0, 10.0])
SPHERE_RADIUS = 450.0
BBOX = (np.array([-600.0, -600.0, -600.0]), np.array([600.0, 600.0, 600.0]))


def ring_cameras(count=4, radius=2500.0, height=400.0, focal=90.0, size=(64, 48)):
    k = CameraIntrinsics(focal, ((size[0] - 1) / 2.0, (size[1] - 1) / 2.0), size)
    cams = []
    for c in range(count):
        az = 0.3 + 2.0 * math.pi * c / count
        pos = (radius * math.cos(az), radius * math.sin(az), height)
        cams.append((k, CameraPose.look_at(pos, (0.0, 0.0, 0.0))))
    return cams


def sphere_views(count=4):
    views = []
    for k, pose in ring_cameras(count):
        matte = render_matte([(SPHERE_CENTRE, SPHERE_CENTRE, SPHERE_RADIUS)], k, pose)
        views.append(CameraView(k, pose, matte))
    return views


def oracle_cameras(views):
    return [(v.intrinsics.focal_length, v.intrinsics.principal_point, v.pose.rotation, v.pose.translation)
            for v in views]


def constant_views(value, count=3, size=(16, 12)):
    views = []
    for k, pose in ring_cameras(count, size=size):
        views.append(CameraView(k, pose, SoftMatte(np.full((size[1], size[0]), value))))
    return views
