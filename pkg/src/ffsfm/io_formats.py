"""Binary and text file formats used by the pipeline.

LPMF (pointmap) layout, all little-endian:

    magic  "LPMF" (4 bytes)
    u32    version (1)
    u32    H
    u32    W
    u32    flags: bit0 = has confidence, bit1 = has mask
    f32    H*W*3 points, row-major
    [f32   H*W confidences]   when bit0
    [u8    H*W validity mask] when bit1

NaN point values are allowed only where the mask is 0.  An edge decode is
stored as one LPMF of height 2H: the first image's grids stacked on top of
the second image's.

LEMB (embeddings): magic "LEMB", u32 version (1), u32 n, u32 d, then
n*d f32 row-major.

Poses are text, one line per image: ``id qw qx qy qz tx ty tz f``
(camera-to-world, unit Hamilton quaternion, shared focal in pixels).
Graphs are text: ``root <r>`` then ``edge <parent> <child> <cost>`` lines
in BFS order.  Configs are flat ``key value`` lines.  Point clouds are
binary little-endian PLY with x/y/z/confidence float properties.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import FormatError
from .geometry import ConfidenceMap, Pointmap, RigidTransform

LPMF_MAGIC = b"LPMF"
LEMB_MAGIC = b"LEMB"
_HEADER = struct.Struct("<4sIIII")
_FLAG_CONF = 1
_FLAG_MASK = 2


def save_pointmap(path, pm: Pointmap, conf: ConfidenceMap = None) -> None:
    h, w = pm.height, pm.width
    flags = _FLAG_MASK | (_FLAG_CONF if conf is not None else 0)
    blob = [_HEADER.pack(LPMF_MAGIC, 1, h, w, flags)]
    blob.append(pm.points.astype("<f4").tobytes())
    if conf is not None:
        if conf.values.shape != (h, w):
            raise FormatError("confidence shape does not match pointmap")
        blob.append(conf.values.astype("<f4").tobytes())
    blob.append(pm.valid.astype(np.uint8).tobytes())
    Path(path).write_bytes(b"".join(blob))


def load_pointmap(path):
    """Returns (Pointmap, ConfidenceMap or None)."""
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, version, h, w, flags = _HEADER.unpack_from(data)
    if magic != LPMF_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != 1:
        raise FormatError(f"{path}: unsupported version {version}")
    if h < 1 or w < 1:
        raise FormatError(f"{path}: bad grid size {h}x{w}")
    expected = _HEADER.size + h * w * 3 * 4
    if flags & _FLAG_CONF:
        expected += h * w * 4
    if flags & _FLAG_MASK:
        expected += h * w
    if len(data) != expected:
        raise FormatError(f"{path}: size {len(data)} does not match header ({expected})")

    off = _HEADER.size
    pts = np.frombuffer(data, dtype="<f4", count=h * w * 3, offset=off).reshape(h, w, 3)
    off += h * w * 12
    conf = None
    if flags & _FLAG_CONF:
        conf_vals = np.frombuffer(data, dtype="<f4", count=h * w, offset=off).reshape(h, w)
        off += h * w * 4
        conf = ConfidenceMap(conf_vals.astype(np.float64))
    if flags & _FLAG_MASK:
        mask = np.frombuffer(data, dtype=np.uint8, count=h * w, offset=off).reshape(h, w).astype(bool)
    else:
        mask = np.ones((h, w), dtype=bool)
    pts64 = pts.astype(np.float64)
    if not np.isfinite(pts64[mask]).all():
        raise FormatError(f"{path}: NaN points inside the valid mask")
    return Pointmap(pts64, mask), conf


def save_edge_decode(path, dec) -> None:
    """Edge decode as a single stacked LPMF (first image on top)."""
    pts = np.concatenate([dec.x_ii.points, dec.x_ji.points], axis=0)
    mask = np.concatenate([dec.x_ii.valid, dec.x_ji.valid], axis=0)
    conf = np.concatenate([dec.c_ii.values, dec.c_ji.values], axis=0)
    save_pointmap(path, Pointmap(pts, mask), ConfidenceMap(conf))


def load_edge_decode(path):
    from .backend import EdgeDecode

    pm, conf = load_pointmap(path)
    if conf is None:
        raise FormatError(f"{path}: edge decode requires confidences")
    if pm.height % 2 != 0:
        raise FormatError(f"{path}: stacked edge decode must have even height")
    h = pm.height // 2
    return EdgeDecode(
        Pointmap(pm.points[:h], pm.valid[:h]),
        Pointmap(pm.points[h:], pm.valid[h:]),
        ConfidenceMap(conf.values[:h]),
        ConfidenceMap(conf.values[h:]),
    )


def save_embeddings(path, embeddings: np.ndarray) -> None:
    emb = np.asarray(embeddings, dtype=np.float64)
    if emb.ndim != 2 or emb.shape[0] < 1 or emb.shape[1] < 1:
        raise FormatError("embeddings must be a non-empty (n, d) array")
    n, d = emb.shape
    Path(path).write_bytes(
        struct.pack("<4sIII", LEMB_MAGIC, 1, n, d) + emb.astype("<f4").tobytes()
    )


def load_embeddings(path) -> np.ndarray:
    data = Path(path).read_bytes()
    head = struct.Struct("<4sIII")
    if len(data) < head.size:
        raise FormatError(f"{path}: truncated header")
    magic, version, n, d = head.unpack_from(data)
    if magic != LEMB_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != 1:
        raise FormatError(f"{path}: unsupported version {version}")
    if n < 1 or d < 1:
        raise FormatError(f"{path}: bad embedding shape {n}x{d}")
    if len(data) != head.size + n * d * 4:
        raise FormatError(f"{path}: size does not match header")
    return np.frombuffer(data, dtype="<f4", offset=head.size).reshape(n, d).astype(np.float64)


def _quat_from_rotation(rot: np.ndarray) -> np.ndarray:
    q = Rotation.from_matrix(rot).as_quat()  # (x, y, z, w)
    q = np.array([q[3], q[0], q[1], q[2]])
    if q[0] < 0:
        q = -q
    return q


def _rotation_from_quat(q: np.ndarray) -> np.ndarray:
    return Rotation.from_quat([q[1], q[2], q[3], q[0]]).as_matrix()


def save_poses(path, poses: dict) -> None:
    """``poses`` maps image id -> (RigidTransform camera-to-world, focal)."""
    lines = []
    for idx in sorted(poses):
        pose, focal = poses[idx]
        q = _quat_from_rotation(pose.rotation)
        t = pose.translation
        lines.append(
            f"{idx} " + " ".join(f"{v:.17g}" for v in (*q, *t, focal))
        )
    Path(path).write_text("\n".join(lines) + "\n")


def load_poses(path) -> dict:
    """Returns image id -> (RigidTransform, focal)."""
    out = {}
    for ln, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 9:
            raise FormatError(f"{path}:{ln}: expected 9 fields, got {len(parts)}")
        try:
            idx = int(parts[0])
            vals = [float(v) for v in parts[1:]]
        except ValueError as exc:
            raise FormatError(f"{path}:{ln}: {exc}") from None
        q = np.array(vals[:4])
        if abs(np.linalg.norm(q) - 1.0) > 1e-6:
            raise FormatError(f"{path}:{ln}: quaternion is not unit-norm")
        out[idx] = (RigidTransform(_rotation_from_quat(q), np.array(vals[4:7])), vals[7])
    return out


def save_graph(path, graph, costs=None) -> None:
    lines = [f"root {graph.root}"]
    for e, (p, c) in enumerate(graph.edges):
        cost = 0.0 if costs is None else costs[e]
        lines.append(f"edge {p} {c} {cost:.17g}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_graph(path):
    """Returns (root, edges list, costs list)."""
    root = None
    edges = []
    costs = []
    for ln, line in enumerate(Path(path).read_text().splitlines(), start=1):
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "root" and len(parts) == 2:
            root = int(parts[1])
        elif parts[0] == "edge" and len(parts) == 4:
            edges.append((int(parts[1]), int(parts[2])))
            costs.append(float(parts[3]))
        else:
            raise FormatError(f"{path}:{ln}: unrecognized line {line!r}")
    if root is None:
        raise FormatError(f"{path}: missing root line")
    return root, edges, costs


def save_config(path, items: dict) -> None:
    lines = []
    for key in sorted(items):
        value = items[key]
        if isinstance(value, float):
            value = f"{value:.17g}"
        lines.append(f"{key} {value}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_config(path) -> dict:
    out = {}
    for ln, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split(None, 1)
        if len(parts) != 2:
            raise FormatError(f"{path}:{ln}: expected 'key value'")
        out[parts[0]] = parts[1]
    return out


def save_ply(path, points: np.ndarray, confidences: np.ndarray) -> None:
    pts = np.asarray(points, dtype="<f4").reshape(-1, 3)
    conf = np.asarray(confidences, dtype="<f4").reshape(-1, 1)
    if len(pts) != len(conf):
        raise FormatError("point and confidence counts differ")
    header = (
        "ply\n"
        "format binary_little_endian 1.0\n"
        f"element vertex {len(pts)}\n"
        "property float x\n"
        "property float y\n"
        "property float z\n"
        "property float confidence\n"
        "end_header\n"
    )
    Path(path).write_bytes(header.encode("ascii") + np.concatenate([pts, conf], axis=1).tobytes())


def load_ply(path):
    """Reads clouds written by save_ply; returns (points, confidences)."""
    data = Path(path).read_bytes()
    marker = b"end_header\n"
    pos = data.find(marker)
    if not data.startswith(b"ply\n") or pos < 0:
        raise FormatError(f"{path}: not a PLY file")
    header = data[:pos].decode("ascii", errors="replace").splitlines()
    if "format binary_little_endian 1.0" not in header:
        raise FormatError(f"{path}: expected binary little-endian PLY")
    count = None
    props = []
    for line in header:
        if line.startswith("element vertex"):
            count = int(line.split()[2])
        elif line.startswith("property"):
            props.append(line.split()[2])
    if count is None or props != ["x", "y", "z", "confidence"]:
        raise FormatError(f"{path}: unsupported PLY layout")
    body = data[pos + len(marker):]
    if len(body) != count * 16:
        raise FormatError(f"{path}: payload size mismatch")
    arr = np.frombuffer(body, dtype="<f4").reshape(count, 4).astype(np.float64)
    return arr[:, :3], arr[:, 3]
