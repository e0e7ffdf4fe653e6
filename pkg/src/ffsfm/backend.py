"""Synthetic ground-truth scenes and pairwise pointmap decode backends.

The decode contract: ``decode(i, j)`` returns the pointmaps of images i
and j, both expressed in the camera frame of image i, together with
per-pixel confidences.  Here the neural decoder is replaced by an oracle
that transforms ground-truth world pointmaps into frame i and perturbs
them with seeded Gaussian noise; confidences are synthesized so that
lower-noise pixels score higher, which keeps confidence weighting
observable in tests.

Random streams are namespaced as ``[seed, tag, ...]`` so that every image
mask and every edge decode is independently reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol

import numpy as np

from .errors import MissingEdge
from .geometry import ConfidenceMap, Intrinsics, Pointmap, RigidTransform, apply, pixel_centers

TRAJECTORIES = ("orbit", "forward", "wander")
DEFAULT_KAPPA = 10.0

_STREAM_MASK = 1
_STREAM_DECODE = 2


@dataclass(frozen=True)
class GroundTruthScene:
    """Per-image world-frame pointmaps with poses and intrinsics.

    ``scene_scale`` is the RMS distance of the camera centers from their
    centroid (1.0 when the cameras are coincident) and is the unit for all
    noise magnitudes.
    """

    poses: list          # camera-to-world RigidTransform per image
    pointmaps: list      # world-frame Pointmap per image
    intrinsics: list
    scene_scale: float
    seed: int

    @property
    def n_images(self) -> int:
        return len(self.poses)

    @property
    def image_shape(self) -> tuple:
        return self.pointmaps[0].points.shape[:2]


@dataclass(frozen=True)
class EdgeDecode:
    """Output of one pairwise decode: both maps live in the first image's frame."""

    x_ii: Pointmap
    x_ji: Pointmap
    c_ii: ConfidenceMap
    c_ji: ConfidenceMap

    def __post_init__(self):
        shape = self.x_ii.points.shape[:2]
        for grid in (self.x_ji.points[..., 0], self.c_ii.values, self.c_ji.values):
            if grid.shape[:2] != shape:
                raise ValueError("edge decode grids must share one image shape")


class DecoderBackend(Protocol):
    """Anything that can serve pairwise decodes for a fixed image set."""

    @property
    def n_images(self) -> int: ...

    @property
    def image_shape(self) -> tuple: ...

    def decode(self, i: int, j: int) -> EdgeDecode: ...


def _look_rotation(forward: np.ndarray, up_hint=(0.0, 0.0, 1.0)) -> np.ndarray:
    """Camera-to-world rotation with +z along ``forward`` (x right, y down)."""
    z = forward / np.linalg.norm(forward)
    up = np.asarray(up_hint, dtype=np.float64)
    x = np.cross(z, up)
    if np.linalg.norm(x) < 1e-9:
        x = np.cross(z, np.array([0.0, 1.0, 0.0]))
    x = x / np.linalg.norm(x)
    y = np.cross(z, x)
    return np.stack([x, y, z], axis=1)


def _orbit_poses(n: int, radius: float) -> list:
    poses = []
    for i in range(n):
        ang = 2.0 * np.pi * i / n
        pos = radius * np.array([np.cos(ang), np.sin(ang), 0.0])
        if radius < 1e-12:
            fwd = np.array([1.0, 0.0, 0.0])
        else:
            fwd = -pos / np.linalg.norm(pos)
        poses.append(RigidTransform(_look_rotation(fwd), pos))
    return poses


def _forward_poses(n: int, step: float) -> list:
    # gentle lateral/vertical sway keeps the centers off a single line
    def center(i):
        return np.array([step * i, 0.8 * np.sin(0.13 * i), 0.15 * np.sin(0.07 * i + 1.0)])

    poses = []
    for i in range(n):
        fwd = center(i + 1) - center(i - 1)
        poses.append(RigidTransform(_look_rotation(fwd), center(i)))
    return poses


def _wander_poses(n: int, step: float, rng) -> list:
    yaw = 0.0
    pos = np.zeros(3)
    poses = []
    for _ in range(n):
        fwd = np.array([np.cos(yaw), np.sin(yaw), 0.0])
        poses.append(RigidTransform(_look_rotation(fwd), pos.copy()))
        yaw += 0.12 * rng.standard_normal()
        pos = pos + step * np.array([np.cos(yaw), np.sin(yaw), 0.12 * rng.standard_normal()])
    return poses


def _direction_field(rng, n_waves: int = 6):
    """Smooth random scalar field over unit directions, range about [-1, 1]."""
    freqs = rng.normal(scale=2.0, size=(n_waves, 3))
    phases = rng.uniform(0.0, 2.0 * np.pi, size=n_waves)
    amps = rng.uniform(0.5, 1.0, size=n_waves)
    amps = amps / amps.sum()

    def field(dirs: np.ndarray) -> np.ndarray:
        acc = np.zeros(dirs.shape[:-1])
        for k in range(n_waves):
            acc = acc + amps[k] * np.sin(dirs @ freqs[k] + phases[k])
        return acc

    return field


def _smooth_mask(height: int, width: int, invalid_fraction: float, rng) -> np.ndarray:
    """Validity mask with a smooth invalid region of the requested fraction."""
    if invalid_fraction <= 0.0:
        return np.ones((height, width), dtype=bool)
    uv = pixel_centers(height, width)
    u = uv[..., 0] / width
    v = uv[..., 1] / height
    f = np.zeros((height, width))
    for _ in range(4):
        wu, wv = rng.uniform(2.0, 9.0, size=2)
        ph = rng.uniform(0.0, 2.0 * np.pi)
        f = f + rng.uniform(0.5, 1.0) * np.sin(wu * u + wv * v + ph)
    cut = np.quantile(f, 1.0 - invalid_fraction)
    return f <= cut


def synth_scene(
    traj: str = "orbit",
    n: int = 8,
    height: int = 48,
    width: int = 64,
    seed: int = 0,
    focal: float = None,
    invalid_fraction: float = 0.05,
    orbit_radius: float = 2.0,
    forward_step: float = 0.4,
    relief: float = 0.35,
) -> GroundTruthScene:
    """Generate a deterministic synthetic scene.

    Per-pixel depths come from a smooth seeded field over world ray
    directions, so identical poses render identical pointmaps and every
    point reprojects exactly onto its own pixel center.
    """
    if traj not in TRAJECTORIES:
        raise ValueError(f"trajectory must be one of {TRAJECTORIES}, got {traj!r}")
    if n < 2:
        raise ValueError("need at least 2 images")
    if height < 16 or width < 16:
        raise ValueError("image size must be at least 16x16")
    if not 0.0 <= invalid_fraction <= 0.2:
        raise ValueError("invalid_fraction must be in [0, 0.2]")
    if not 0.0 < relief < 0.85:
        raise ValueError("relief must be in (0, 0.85)")

    rng = np.random.default_rng([seed, 0])
    if traj == "orbit":
        poses = _orbit_poses(n, orbit_radius)
        base_depth = max(orbit_radius, 1.0)
    elif traj == "forward":
        poses = _forward_poses(n, forward_step)
        base_depth = 6.0
    else:
        poses = _wander_poses(n, forward_step, rng)
        base_depth = 5.0

    if focal is None:
        focal = 0.9 * width
    intr = Intrinsics(float(focal), float(focal), width / 2.0, height / 2.0)
    field = _direction_field(rng)

    uv = pixel_centers(height, width)
    dirs_cam = np.concatenate(
        [(uv[..., :1] - intr.cx) / intr.fx, (uv[..., 1:] - intr.cy) / intr.fy, np.ones((height, width, 1))],
        axis=-1,
    )
    pointmaps = []
    for i, pose in enumerate(poses):
        dirs_world = dirs_cam @ pose.rotation.T
        unit = dirs_world / np.linalg.norm(dirs_world, axis=-1, keepdims=True)
        depth = base_depth * (1.0 + relief * field(unit))
        depth = np.maximum(depth, 0.15 * base_depth)
        cam_pts = dirs_cam * depth[..., None]
        world = pose.transform(cam_pts.reshape(-1, 3)).reshape(height, width, 3)
        mask = _smooth_mask(height, width, invalid_fraction, np.random.default_rng([seed, _STREAM_MASK, i]))
        pointmaps.append(Pointmap(world, mask))

    centers = np.stack([p.translation for p in poses])
    rms = float(np.sqrt(((centers - centers.mean(axis=0)) ** 2).sum(axis=1).mean()))
    scale = rms if rms > 1e-9 else 1.0
    return GroundTruthScene(poses, pointmaps, [intr] * n, scale, seed)


def _warp_field(rng, height: int, width: int, sigma: float) -> np.ndarray:
    """Smooth random displacement field with per-coordinate std sigma.

    Mimics the spatially correlated component of regression errors; unlike
    iid noise it does not average away under point-set alignment.
    """
    uv = pixel_centers(height, width)
    u = uv[..., 0] / width
    v = uv[..., 1] / height
    n_waves = 3
    field = np.zeros((height, width, 3))
    for _ in range(n_waves):
        freq = rng.uniform(0.5, 2.5, size=2)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        coef = rng.normal(scale=sigma * np.sqrt(2.0 / n_waves), size=3)
        field += np.sin(2.0 * np.pi * (freq[0] * u + freq[1] * v) + phase)[..., None] * coef
    return field


def _covisibility(scene: GroundTruthScene, i: int, j: int) -> float:
    """Symmetric fraction of valid points seen by the other camera."""
    fracs = []
    for a, b in ((i, j), (j, i)):
        pts = scene.pointmaps[a].valid_points()
        if len(pts) == 0:
            fracs.append(0.0)
            continue
        cam = scene.poses[b].inverse().transform(pts)
        front = cam[:, 2] > 0
        count = 0
        if front.any():
            uv = scene.intrinsics[b].project(cam[front])
            h, w = scene.pointmaps[b].points.shape[:2]
            count = int(
                ((uv[:, 0] >= -0.5) & (uv[:, 0] <= w - 0.5) & (uv[:, 1] >= -0.5) & (uv[:, 1] <= h - 0.5)).sum()
            )
        fracs.append(count / len(pts))
    return 0.5 * (fracs[0] + fracs[1])


def oracle_decode(
    scene: GroundTruthScene,
    i: int,
    j: int,
    noise: float = 0.0,
    kappa: float = DEFAULT_KAPPA,
    warp: float = 0.0,
    scale_jitter: float = 0.0,
) -> EdgeDecode:
    """Decode the edge (i, j) from ground truth plus seeded noise.

    Three error knobs, all deterministic in (scene seed, i, j):

    * ``noise``: iid Gaussian per coordinate, std as a fraction of the
      scene scale.
    * ``warp``: smooth correlated error field of the same unit.  Its
      magnitude grows as the pair's co-visibility shrinks, and hard pairs
      occasionally decode catastrophically; the confidence model sees the
      inflated scale, so failures stay detectable.
    * ``scale_jitter``: std of a per-edge log-scale factor applied to both
      maps, modelling the scale ambiguity of pairwise predictions.  It is
      coherent within the edge and invisible to the confidences.

    Confidences are 1 + kappa * exp(-|eps|^2 / (2 sigma_ref^2)) with
    sigma_ref the nominal (non-failed) noise level; kappa = 0 yields the
    constant floor confidence 1.
    """
    if i == j:
        raise ValueError("an edge needs two distinct images")
    w2c = scene.poses[i].inverse()
    sigma = noise * scene.scene_scale
    sigma_warp = warp * scene.scene_scale
    rng = np.random.default_rng([scene.seed, _STREAM_DECODE, i, j])
    if sigma_warp > 0:
        covis = _covisibility(scene, i, j)
        sigma_warp *= 0.15 + 0.85 * (1.0 - covis)
    # confidences are normalized by the nominal noise level, so a
    # catastrophic decode scores near the floor everywhere
    sigma_ref_sq = sigma ** 2 + sigma_warp ** 2
    if sigma_warp > 0:
        # only genuinely low-overlap pairs risk a catastrophic decode
        fail_prob = max(0.0, 0.8 * (0.45 - covis))
        if rng.uniform() < fail_prob:
            sigma_warp *= 6.0
    pair_scale = float(np.exp(rng.normal(0.0, scale_jitter))) if scale_jitter > 0 else 1.0

    def perturb(pm: Pointmap):
        local = apply(w2c, pm)
        pts = pair_scale * local.points
        eps = sigma * rng.standard_normal(local.points.shape)
        if sigma_warp > 0:
            eps = eps + _warp_field(rng, pm.height, pm.width, sigma_warp)
        pts = pts + eps
        sq = (eps ** 2).sum(axis=-1)
        conf = 1.0 + kappa * np.exp(-sq / (2.0 * sigma_ref_sq + 1e-300))
        return Pointmap(pts, pm.valid.copy()), ConfidenceMap(conf)

    x_ii, c_ii = perturb(scene.pointmaps[i])
    x_ji, c_ji = perturb(scene.pointmaps[j])
    return EdgeDecode(x_ii, x_ji, c_ii, c_ji)


class OracleBackend:
    """DecoderBackend serving oracle decodes of a synthetic scene."""

    def __init__(
        self,
        scene: GroundTruthScene,
        noise: float = 0.0,
        kappa: float = DEFAULT_KAPPA,
        warp: float = 0.0,
        scale_jitter: float = 0.0,
    ):
        self.scene = scene
        self.noise = float(noise)
        self.kappa = float(kappa)
        self.warp = float(warp)
        self.scale_jitter = float(scale_jitter)

    @property
    def n_images(self) -> int:
        return self.scene.n_images

    @property
    def image_shape(self) -> tuple:
        return self.scene.image_shape

    def decode(self, i: int, j: int) -> EdgeDecode:
        return oracle_decode(self.scene, i, j, self.noise, self.kappa, self.warp, self.scale_jitter)


class FileBackend:
    """DecoderBackend reading stored decodes from ``edge_<i>_<j>.lpmf`` files."""

    def __init__(self, directory):
        from . import io_formats
        from pathlib import Path

        self._load = io_formats.load_edge_decode
        self.directory = Path(directory)
        self._files = {}
        for path in sorted(self.directory.glob("edge_*_*.lpmf")):
            parts = path.stem.split("_")
            if len(parts) == 3 and parts[1].isdigit() and parts[2].isdigit():
                self._files[(int(parts[1]), int(parts[2]))] = path
        if not self._files:
            raise MissingEdge(f"no edge files found in {self.directory}")
        self._n = 1 + max(max(i, j) for i, j in self._files)
        first = self._load(next(iter(sorted(self._files.values()))))
        self._shape = first.x_ii.points.shape[:2]

    @property
    def n_images(self) -> int:
        return self._n

    @property
    def image_shape(self) -> tuple:
        return self._shape

    def decode(self, i: int, j: int) -> EdgeDecode:
        if (i, j) not in self._files:
            raise MissingEdge(f"edge ({i}, {j}) not present in {self.directory}")
        return self._load(self._files[(i, j)])
