"""End-to-end orchestration shared by the CLI and the test suite.

A scene directory holds ground truth (``scene.cfg``, ``gt_poses.txt``,
``gt_pointmap_NNNN.lpmf``, ``embeddings.lemb``); edge decodes are produced
on demand by the oracle backend using the stored seed and noise level.  A
reconstruction directory holds ``run_config.txt``, ``graph.txt``,
``poses.txt``, per-image ``pointmap_NNNN.lpmf``, ``scene.ply``, a
deterministic ``report.txt`` and wall-time ``timings.txt`` (timings are
the one non-reproducible output, so they live in their own file).
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import io_formats
from .accumulate import AccumulateOptions, Reconstruction, accumulate
from .backend import GroundTruthScene, OracleBackend, synth_scene
from .errors import FormatError
from .geometry import Intrinsics, Pointmap
from .latent_align import AlignWeights, latent_align_forward
from .metrics import PoseSet
from .pose_extract import ExtractionResult, PnPConfig, extract_all
from .scene_graph import SceneGraph, build_mst, build_spt, compute_similarity, overlap_similarity, root_path_costs, select_root

GRAPH_KINDS = ("spt", "mst", "oracle")
_PROBE_TOKENS = 16
_PROBE_DIM = 32
_PROBE_HEADS = 4


def save_scene(directory, scene: GroundTruthScene, noise: float, kappa: float, traj: str, invalid_fraction: float, warp: float = 0.0, scale_jitter: float = 0.0) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    h, w = scene.image_shape
    io_formats.save_config(
        directory / "scene.cfg",
        {
            "kind": "scene",
            "n": scene.n_images,
            "height": h,
            "width": w,
            "traj": traj,
            "noise": float(noise),
            "warp": float(warp),
            "scale_jitter": float(scale_jitter),
            "kappa": float(kappa),
            "invalid_fraction": float(invalid_fraction),
            "seed": scene.seed,
            "scale": scene.scene_scale,
        },
    )
    io_formats.save_poses(
        directory / "gt_poses.txt",
        {i: (scene.poses[i], scene.intrinsics[i].fx) for i in range(scene.n_images)},
    )
    for i in range(scene.n_images):
        io_formats.save_pointmap(directory / f"gt_pointmap_{i:04d}.lpmf", scene.pointmaps[i])
    # retrieval embeddings: rows of the ground-truth overlap similarity
    overlap = overlap_similarity(scene)
    io_formats.save_embeddings(directory / "embeddings.lemb", overlap.values)
    pts = np.concatenate([pm.valid_points() for pm in scene.pointmaps])
    io_formats.save_ply(directory / "gt_cloud.ply", pts, np.ones(len(pts)))


def load_scene(directory):
    """Rebuild a GroundTruthScene and its oracle settings from disk.

    Returns (scene, OracleSettings, embeddings).
    """
    directory = Path(directory)
    cfg = io_formats.load_config(directory / "scene.cfg")
    if cfg.get("kind") != "scene":
        raise FormatError(f"{directory}: not a scene directory")
    n = int(cfg["n"])
    poses_raw = io_formats.load_poses(directory / "gt_poses.txt")
    if sorted(poses_raw) != list(range(n)):
        raise FormatError(f"{directory}: gt_poses.txt ids do not cover 0..{n - 1}")
    poses = []
    intrinsics = []
    pointmaps = []
    h, w = int(cfg["height"]), int(cfg["width"])
    for i in range(n):
        pose, focal = poses_raw[i]
        poses.append(pose)
        intrinsics.append(Intrinsics(focal, focal, w / 2.0, h / 2.0))
        pm, _ = io_formats.load_pointmap(directory / f"gt_pointmap_{i:04d}.lpmf")
        if pm.points.shape[:2] != (h, w):
            raise FormatError(f"{directory}: pointmap {i} has unexpected shape")
        pointmaps.append(pm)
    scene = GroundTruthScene(poses, pointmaps, intrinsics, float(cfg["scale"]), int(cfg["seed"]))
    embeddings = io_formats.load_embeddings(directory / "embeddings.lemb")
    settings = OracleSettings(
        noise=float(cfg["noise"]),
        kappa=float(cfg["kappa"]),
        warp=float(cfg.get("warp", "0")),
        scale_jitter=float(cfg.get("scale_jitter", "0")),
    )
    return scene, settings, embeddings


def build_graph(scene, embeddings, kind: str, shift: float = 1.0):
    """Similarity matrix + spanning tree of the requested kind."""
    if kind not in GRAPH_KINDS:
        raise ValueError(f"graph kind must be one of {GRAPH_KINDS}")
    if kind == "oracle":
        sim = overlap_similarity(scene)
    else:
        sim = compute_similarity(embeddings)
    if kind == "mst":
        graph = build_mst(sim, shift)
    else:
        graph = build_spt(sim, select_root(sim), shift)
    return sim, graph


@dataclass(frozen=True)
class OracleSettings:
    noise: float = 0.0
    kappa: float = 10.0
    warp: float = 0.0
    scale_jitter: float = 0.0


@dataclass
class RunResult:
    scene: GroundTruthScene
    sim: object
    graph: SceneGraph
    recon: Reconstruction
    extraction: ExtractionResult
    timings: dict = field(default_factory=dict)

    def pose_set(self) -> PoseSet:
        return PoseSet(
            tuple(
                self.extraction.poses[i] if self.extraction.registered[i] else None
                for i in range(self.scene.n_images)
            )
        )

    def gt_pose_set(self) -> PoseSet:
        return PoseSet(tuple(self.scene.poses))


def run_reconstruction(
    scene: GroundTruthScene,
    embeddings=None,
    noise: float = 0.0,
    kappa: float = 10.0,
    warp: float = 0.0,
    scale_jitter: float = 0.0,
    graph_kind: str = "spt",
    opts: AccumulateOptions = AccumulateOptions(),
    pnp: PnPConfig = PnPConfig(),
    align_layers: int = 4,
) -> RunResult:
    """Graph construction, alignment probe, accumulation, pose extraction."""
    timings = {}
    t0 = time.perf_counter()
    if embeddings is None:
        embeddings = overlap_similarity(scene).values
    timings["image_encoding"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    if align_layers > 0:
        weights = AlignWeights.create(scene.seed, dim=_PROBE_DIM, heads=_PROBE_HEADS, n_levels=align_layers)
        rng = np.random.default_rng([scene.seed, 6])
        grids = [rng.standard_normal((_PROBE_TOKENS, _PROBE_DIM)) for _ in range(scene.n_images)]
        latent_align_forward(grids, weights)
    timings["latent_alignment"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    sim, graph = build_graph(scene, embeddings, graph_kind)
    timings["graph_construction"] = time.perf_counter() - t0

    backend = OracleBackend(scene, noise=noise, kappa=kappa, warp=warp, scale_jitter=scale_jitter)
    stage = {}
    recon = accumulate(graph, backend, opts, timers=stage)
    timings["pointmap_decoding"] = stage.get("decode", 0.0)
    timings["global_accumulation"] = stage.get("register", 0.0)

    t0 = time.perf_counter()
    extraction = extract_all(recon, pnp)
    timings["pose_extraction"] = time.perf_counter() - t0
    timings["total"] = sum(v for k, v in timings.items() if k != "total")
    return RunResult(scene, sim, graph, recon, extraction, timings)


def save_run(directory, result: RunResult, flags: dict) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    io_formats.save_config(directory / "run_config.txt", flags)
    costs = root_path_costs(result.graph, result.sim)
    edge_costs = [costs[c] - costs[p] for p, c in result.graph.edges]
    io_formats.save_graph(directory / "graph.txt", result.graph, edge_costs)
    poses = {
        i: (result.extraction.poses[i], result.extraction.focals[i])
        for i in range(result.scene.n_images)
        if result.extraction.registered[i]
    }
    io_formats.save_poses(directory / "poses.txt", poses)
    for i in range(result.scene.n_images):
        if result.recon.registered[i]:
            io_formats.save_pointmap(
                directory / f"pointmap_{i:04d}.lpmf", result.recon.pointmaps[i], result.recon.confidences[i]
            )
    pts, conf = result.recon.merged_cloud()
    io_formats.save_ply(directory / "scene.ply", pts, conf)

    depth = result.graph.depths()
    report = {
        "n_images": result.scene.n_images,
        "root": result.graph.root,
        "graph_edges": len(result.graph.edges),
        "graph_depth": int(depth.max()),
        "registered": sum(result.extraction.registered),
        "registration_rate": result.extraction.registration_rate,
        "accumulate_registered": sum(result.recon.registered),
        "notes": "; ".join(result.recon.notes) if result.recon.notes else "none",
    }
    io_formats.save_config(directory / "report.txt", report)
    io_formats.save_config(directory / "timings.txt", {k: f"{v:.6f}" for k, v in result.timings.items()})


def load_run_reconstruction(directory, scene: GroundTruthScene):
    """Reload a saved reconstruction's global pointmaps for loss evaluation."""
    directory = Path(directory)
    root, edges, _ = io_formats.load_graph(directory / "graph.txt")
    graph = SceneGraph(scene.n_images, root, tuple(edges))
    pointmaps = []
    confidences = []
    registered = []
    for i in range(scene.n_images):
        path = directory / f"pointmap_{i:04d}.lpmf"
        if path.exists():
            pm, conf = io_formats.load_pointmap(path)
            if conf is None:
                raise FormatError(f"{path}: reconstruction pointmaps need confidences")
            pointmaps.append(pm)
            confidences.append(conf)
            registered.append(True)
        else:
            h, w = scene.image_shape
            pointmaps.append(Pointmap(np.zeros((h, w, 3)), np.zeros((h, w), dtype=bool)))
            confidences.append(None)
            registered.append(False)
    recon = Reconstruction(pointmaps, confidences, registered, root, [None] * scene.n_images)
    return graph, recon
