"""File format round trips and corruption handling.  Payloads are float32
on disk; round trips are checked bit for bit on float32-representable
data."""

import struct

import numpy as np
import pytest

from conftest import random_rigid
from ffsfm.errors import FormatError
from ffsfm.geometry import ConfidenceMap, Pointmap, RigidTransform
from ffsfm.io_formats import (
    load_config,
    load_embeddings,
    load_graph,
    load_ply,
    load_pointmap,
    load_poses,
    save_config,
    save_embeddings,
    save_graph,
    save_ply,
    save_pointmap,
    save_poses,
)
from ffsfm.scene_graph import SceneGraph


def _f32_pointmap(rng, h=6, w=9):
    pts = rng.standard_normal((h, w, 3)).astype(np.float32).astype(np.float64)
    valid = rng.uniform(size=(h, w)) > 0.2
    return Pointmap(pts, valid)


def test_pointmap_roundtrip_bit_exact(tmp_path, rng):
    pm = _f32_pointmap(rng)
    conf = ConfidenceMap(rng.uniform(1.0, 9.0, (6, 9)).astype(np.float32).astype(np.float64))
    path = tmp_path / "map.lpmf"
    save_pointmap(path, pm, conf)
    back, back_conf = load_pointmap(path)
    np.testing.assert_array_equal(back.points, pm.points)
    np.testing.assert_array_equal(back.valid, pm.valid)
    np.testing.assert_array_equal(back_conf.values, conf.values)
    # writing the reload reproduces identical bytes
    save_pointmap(tmp_path / "again.lpmf", back, back_conf)
    assert (tmp_path / "again.lpmf").read_bytes() == path.read_bytes()


def test_pointmap_without_confidence(tmp_path, rng):
    pm = _f32_pointmap(rng)
    save_pointmap(tmp_path / "m.lpmf", pm)
    back, conf = load_pointmap(tmp_path / "m.lpmf")
    assert conf is None
    np.testing.assert_array_equal(back.points, pm.points)


def test_pointmap_format_errors(tmp_path, rng):
    pm = _f32_pointmap(rng)
    path = tmp_path / "m.lpmf"
    save_pointmap(path, pm)
    blob = path.read_bytes()
    path.write_bytes(blob[:-7])
    with pytest.raises(FormatError):
        load_pointmap(path)
    path.write_bytes(b"XXXX" + blob[4:])
    with pytest.raises(FormatError):
        load_pointmap(path)
    bad_version = blob[:4] + struct.pack("<I", 9) + blob[8:]
    path.write_bytes(bad_version)
    with pytest.raises(FormatError):
        load_pointmap(path)


def test_pointmap_nan_inside_mask_rejected(tmp_path):
    pts = np.zeros((2, 2, 3), dtype=np.float64)
    valid = np.ones((2, 2), dtype=bool)
    path = tmp_path / "m.lpmf"
    save_pointmap(path, Pointmap(pts, valid))
    blob = bytearray(path.read_bytes())
    # poke a NaN into the first float32 point component
    blob[20:24] = struct.pack("<f", float("nan"))
    path.write_bytes(bytes(blob))
    with pytest.raises(FormatError):
        load_pointmap(path)


def test_embeddings_roundtrip(tmp_path, rng):
    emb = rng.standard_normal((5, 7)).astype(np.float32).astype(np.float64)
    path = tmp_path / "e.lemb"
    save_embeddings(path, emb)
    np.testing.assert_array_equal(load_embeddings(path), emb)
    path.write_bytes(path.read_bytes()[:10])
    with pytest.raises(FormatError):
        load_embeddings(path)


def test_poses_roundtrip(tmp_path, rng):
    poses = {i: (random_rigid(rng), 60.0 + i) for i in (0, 2, 5)}
    path = tmp_path / "poses.txt"
    save_poses(path, poses)
    back = load_poses(path)
    assert sorted(back) == [0, 2, 5]
    for i, (pose, focal) in poses.items():
        got, f = back[i]
        assert f == focal
        assert np.linalg.norm(got.rotation - pose.rotation) < 1e-12
        np.testing.assert_allclose(got.translation, pose.translation, atol=1e-12)


def test_poses_reject_bad_quaternion(tmp_path):
    path = tmp_path / "poses.txt"
    path.write_text("0 2.0 0 0 0 1 2 3 60\n")
    with pytest.raises(FormatError):
        load_poses(path)
    path.write_text("0 1 0 0 0 1 2 3\n")  # eight fields
    with pytest.raises(FormatError):
        load_poses(path)


def test_graph_roundtrip(tmp_path):
    graph = SceneGraph(4, 2, ((2, 0), (2, 3), (0, 1)))
    path = tmp_path / "graph.txt"
    save_graph(path, graph, costs=[0.25, 0.5, 0.125])
    root, edges, costs = load_graph(path)
    assert root == 2
    assert edges == [(2, 0), (2, 3), (0, 1)]
    assert costs == [0.25, 0.5, 0.125]
    path.write_text("edge 0 1 0.5\n")
    with pytest.raises(FormatError):
        load_graph(path)


def test_ply_roundtrip(tmp_path, rng):
    pts = rng.standard_normal((50, 3)).astype(np.float32).astype(np.float64)
    conf = rng.uniform(1.0, 5.0, 50).astype(np.float32).astype(np.float64)
    path = tmp_path / "cloud.ply"
    save_ply(path, pts, conf)
    back_pts, back_conf = load_ply(path)
    np.testing.assert_array_equal(back_pts, pts)
    np.testing.assert_array_equal(back_conf, conf)
    path.write_bytes(b"not a ply")
    with pytest.raises(FormatError):
        load_ply(path)


def test_config_roundtrip(tmp_path):
    path = tmp_path / "run.cfg"
    save_config(path, {"n": 8, "noise": 0.005, "traj": "orbit"})
    cfg = load_config(path)
    assert cfg["n"] == "8"
    assert float(cfg["noise"]) == 0.005
    assert cfg["traj"] == "orbit"
