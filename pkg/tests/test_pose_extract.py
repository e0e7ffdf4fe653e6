"""Focal estimation and pose recovery.  Ground truth comes from rendering
scenes at known intrinsics and applying known transforms."""

import numpy as np
import pytest

from conftest import random_rigid
from ffsfm.accumulate import AccumulateOptions, accumulate
from ffsfm.backend import OracleBackend, synth_scene
from ffsfm.errors import InsufficientPoints, NoPositiveDepth
from ffsfm.geometry import ConfidenceMap, Intrinsics, Pointmap, apply, rotation_angle_deg
from ffsfm.pose_extract import (
    PnPConfig,
    _select_pixels,
    estimate_focal,
    extract_all,
    extract_pose,
)
from ffsfm.scene_graph import SceneGraph


def _camera_frame_map(focal=400.0, size=64, seed=0):
    scene = synth_scene(n=2, height=size, width=size, seed=seed, focal=focal, invalid_fraction=0.0)
    return apply(scene.poses[0].inverse(), scene.pointmaps[0])


def test_estimate_focal_exact():
    pm = _camera_frame_map(focal=400.0)
    assert abs(estimate_focal(pm) - 400.0) / 400.0 < 1e-3


def test_estimate_focal_with_gross_outliers(rng):
    pm = _camera_frame_map(focal=400.0)
    pts = pm.points.copy()
    h, w = pts.shape[:2]
    out = rng.uniform(size=(h, w)) < 0.10
    pts[out] = rng.uniform(-5.0, 5.0, (int(out.sum()), 3)) + np.array([0.0, 0.0, 3.0])
    f = estimate_focal(Pointmap(pts, pm.valid))
    assert abs(f - 400.0) / 400.0 < 0.01


def test_estimate_focal_error_cases():
    pm = _camera_frame_map()
    behind = Pointmap(pm.points * np.array([1.0, 1.0, -1.0]), pm.valid)
    with pytest.raises(NoPositiveDepth):
        estimate_focal(behind)
    few = np.zeros((16, 16), dtype=bool)
    few[0, :5] = True
    with pytest.raises(InsufficientPoints):
        estimate_focal(Pointmap(pm.points[:16, :16], np.ones((16, 16), bool)), few)


def test_estimate_focal_quarter_turn_invariance():
    # with the principal point at S/2 the full pixel lattice is not
    # rotation-invariant (half-pixel offset), but the sub-lattice without
    # row/column 0 is: rotating points and grid together on it is an exact
    # symmetry of the objective
    size = 48
    pm = _camera_frame_map(focal=220.0, size=size)
    mask = np.zeros((size, size), dtype=bool)
    mask[1:, 1:] = True
    f0 = estimate_focal(Pointmap(pm.points, mask))

    rotated = np.zeros_like(pm.points)
    for v_new in range(1, size):
        for u_new in range(1, size):
            old = pm.points[size - u_new, v_new]
            rotated[v_new, u_new] = [-old[1], old[0], old[2]]
    f90 = estimate_focal(Pointmap(rotated, mask))
    assert abs(f90 - f0) / f0 < 1e-9


def _scene_in_frame(transform, focal=60.0, size=48, seed=4):
    scene = synth_scene(n=2, height=size, width=size, seed=seed, focal=focal, invalid_fraction=0.0)
    local = apply(scene.poses[0].inverse(), scene.pointmaps[0])
    k = Intrinsics(focal, focal, size / 2.0, size / 2.0)
    return apply(transform, local), k


def test_extract_pose_exact_recovers_transform(rng):
    planted = random_rigid(rng)  # pointmap in an arbitrary global frame
    pm, k = _scene_in_frame(planted)
    conf = ConfidenceMap(np.full(pm.points.shape[:2], 8.0))
    pose, ok, count = extract_pose(pm, conf, k, PnPConfig(seed=3))
    assert ok and count > 2000
    # camera-to-world pose must equal the planted frame transform
    assert rotation_angle_deg(pose.rotation @ planted.rotation.T) < np.degrees(1e-6)
    assert np.linalg.norm(pose.translation - planted.translation) < 1e-6


def test_extract_pose_confidence_threshold_shields_corruption(rng):
    planted = random_rigid(rng)
    pm, k = _scene_in_frame(planted)
    pts = pm.points.copy()
    conf = np.full(pts.shape[:2], 8.0)
    h, w = pts.shape[:2]
    bad = rng.uniform(size=(h, w)) < 0.4
    pts[bad] += 20.0 * rng.standard_normal((int(bad.sum()), 3))
    conf[bad] = 1.0  # below the threshold of 3
    pose, ok, _ = extract_pose(Pointmap(pts, pm.valid), ConfidenceMap(conf), k, PnPConfig(seed=3))
    assert ok
    assert rotation_angle_deg(pose.rotation @ planted.rotation.T) < np.degrees(1e-6)


def test_extract_pose_quantile_fallback(rng):
    planted = random_rigid(rng)
    pm, k = _scene_in_frame(planted)
    conf = ConfidenceMap(np.full(pm.points.shape[:2], 2.0))  # all below threshold 3
    pose, ok, _ = extract_pose(pm, conf, k, PnPConfig(seed=5))
    assert ok
    assert rotation_angle_deg(pose.rotation @ planted.rotation.T) < np.degrees(1e-6)


def test_extract_pose_determinism(rng):
    planted = random_rigid(rng)
    pm, k = _scene_in_frame(planted)
    pts = pm.points + 0.01 * rng.standard_normal(pm.points.shape)
    noisy = Pointmap(pts, pm.valid)
    conf = ConfidenceMap(np.full(pm.points.shape[:2], 8.0))
    a = extract_pose(noisy, conf, k, PnPConfig(seed=11))
    b = extract_pose(noisy, conf, k, PnPConfig(seed=11))
    np.testing.assert_array_equal(a[0].rotation, b[0].rotation)
    np.testing.assert_array_equal(a[0].translation, b[0].translation)
    assert a[2] == b[2]


def test_selection_monotone_in_threshold(rng):
    conf = rng.uniform(1.0, 11.0, (20, 20))
    valid = rng.uniform(size=(20, 20)) > 0.1
    previous = None
    for thr in (3.0, 5.0, 7.0):
        sel = _select_pixels(conf, valid, PnPConfig(conf_threshold=thr))
        if previous is not None:
            assert not (sel & ~previous).any()  # shrinking set
        previous = sel


def _pipeline_recon(noise=0.0, n=6, seed=2):
    scene = synth_scene(n=n, seed=seed)
    backend = OracleBackend(scene, noise=noise)
    graph = SceneGraph(n, 0, tuple((0, i) for i in range(1, n)))
    return scene, accumulate(graph, backend, AccumulateOptions())


def test_extract_all_exact_full_registration():
    scene, recon = _pipeline_recon()
    result = extract_all(recon, PnPConfig(seed=1))
    assert result.registration_rate == 100.0
    for f in result.focals:
        assert abs(f - scene.intrinsics[0].fx) / scene.intrinsics[0].fx < 1e-3


def test_extract_all_forced_failure_rate():
    scene, recon = _pipeline_recon()
    n = scene.n_images
    rng = np.random.default_rng(3)
    pts = recon.pointmaps[2].points.copy()
    pts[recon.pointmaps[2].valid] = 100.0 * rng.standard_normal((int(recon.pointmaps[2].valid.sum()), 3))
    recon.pointmaps[2] = Pointmap(pts, recon.pointmaps[2].valid)
    recon.local_pointmaps[2] = None
    recon.confidences[2] = ConfidenceMap(np.ones(scene.image_shape))
    result = extract_all(recon, PnPConfig(seed=1))
    assert not result.registered[2]
    assert result.registration_rate == pytest.approx(100.0 * (n - 1) / n)


def test_extract_all_skips_unregistered_nodes():
    scene, recon = _pipeline_recon()
    recon.registered[4] = False
    result = extract_all(recon, PnPConfig(seed=1))
    assert result.poses[4] is None and not result.registered[4]
