"""Optimization-free global reconstruction by tree traversal.

Edges of the scene graph are consumed in BFS order.  The first edge pins
the global frame to its parent camera; every later edge (k, l) registers
the child by aligning the parent's already-global pointmap onto the
parent's freshly decoded local map with confidence-weighted Procrustes,
then carrying the child's map through the inverse.  Confidences of a node
are merged by element-wise geometric mean every time the node serves as a
parent, and the merged log-confidence is what weights the registration.

Decodes are fetched in submission chunks (default 32) but consumed
strictly in BFS order, so chunked and unchunked runs are bit-identical.
Nodes whose registration is degenerate are marked unregistered and their
subtree is skipped; this is reported, not fatal.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateInput, ShapeMismatch
from .geometry import ConfidenceMap, Pointmap, RigidTransform, apply, weighted_procrustes


@dataclass(frozen=True)
class AccumulateOptions:
    symmetrize: bool = True          # fuse each edge with its reverse decode
    mode: str = "rigid"              # Procrustes mode; "similarity" allows per-hop scale
    chunk_size: int = 32


@dataclass
class Reconstruction:
    """Per-image global pointmaps with merged confidences.

    ``frame_transforms[i]`` is the transform that carried image i's decode
    into the global frame (identity for the nodes of the first edge).
    ``local_pointmaps[i]``, when present, is the image's pointmap in its
    own camera frame (available for every node when edges are
    symmetrized, root only otherwise); pose extraction anchors the focal
    estimate there, where it is independent of any pose.
    """

    pointmaps: list
    confidences: list
    registered: list
    root: int
    frame_transforms: list
    local_pointmaps: list = None
    notes: list = field(default_factory=list)

    def __post_init__(self):
        if self.local_pointmaps is None:
            self.local_pointmaps = [None] * len(self.pointmaps)

    @property
    def n_images(self) -> int:
        return len(self.pointmaps)

    @property
    def registration_rate(self) -> float:
        return 100.0 * sum(self.registered) / self.n_images

    def merged_cloud(self):
        """(M, 3) points and (M,) confidences over all registered images."""
        pts = []
        conf = []
        for i in range(self.n_images):
            if not self.registered[i]:
                continue
            mask = self.pointmaps[i].valid
            pts.append(self.pointmaps[i].points[mask])
            conf.append(self.confidences[i].values[mask])
        if not pts:
            return np.zeros((0, 3)), np.zeros(0)
        return np.concatenate(pts), np.concatenate(conf)


def merge_confidence(existing: ConfidenceMap, incoming: ConfidenceMap) -> ConfidenceMap:
    """Element-wise geometric mean of two confidence maps."""
    if existing.values.shape != incoming.values.shape:
        raise ShapeMismatch("confidence maps differ in shape")
    return ConfidenceMap(np.sqrt(existing.values * incoming.values))


def _log_conf(values: np.ndarray) -> np.ndarray:
    # confidences are >= 1, but guard rounding right at the floor
    return np.log(np.maximum(values, 1.0))


def symmetric_fuse(fwd, bwd):
    """Fuse an edge decode with its reverse decode.

    The reverse decode (frame j) is aligned into the forward frame i with
    one confidence-weighted Procrustes fit over both images' shared
    pointmaps, then blended per pixel with weight
    G = log C_fwd / (log C_fwd + log C_bwd) (0.5 where both logs vanish).
    Fused confidences are geometric means.
    """
    from .backend import EdgeDecode

    # correspondences: image i (bwd x_ji -> fwd x_ii), image j (bwd x_ii -> fwd x_ji)
    mask_i = fwd.x_ii.valid & bwd.x_ji.valid
    mask_j = fwd.x_ji.valid & bwd.x_ii.valid
    src = np.concatenate([bwd.x_ji.points[mask_i], bwd.x_ii.points[mask_j]])
    dst = np.concatenate([fwd.x_ii.points[mask_i], fwd.x_ji.points[mask_j]])
    w = np.concatenate(
        [
            0.5 * (_log_conf(fwd.c_ii.values[mask_i]) + _log_conf(bwd.c_ji.values[mask_i])),
            0.5 * (_log_conf(fwd.c_ji.values[mask_j]) + _log_conf(bwd.c_ii.values[mask_j])),
        ]
    )
    to_fwd = weighted_procrustes(src, dst, w, mode="rigid")

    def blend(f_pm, f_conf, b_pm, b_conf):
        aligned = apply(to_fwd, b_pm)
        lf = _log_conf(f_conf.values)
        lb = _log_conf(b_conf.values)
        denom = lf + lb
        g = np.where(denom > 0, lf / np.where(denom > 0, denom, 1.0), 0.5)
        fused_pts = g[..., None] * f_pm.points + (1.0 - g[..., None]) * aligned.points
        mask = f_pm.valid & aligned.valid
        fused_pts[~mask] = f_pm.points[~mask]
        return Pointmap(fused_pts, mask), ConfidenceMap(np.sqrt(f_conf.values * b_conf.values))

    x_ii, c_ii = blend(fwd.x_ii, fwd.c_ii, bwd.x_ji, bwd.c_ji)
    x_ji, c_ji = blend(fwd.x_ji, fwd.c_ji, bwd.x_ii, bwd.c_ii)
    return EdgeDecode(x_ii, x_ji, c_ii, c_ji)


def accumulate(graph, backend, opts: AccumulateOptions = AccumulateOptions(), timers: dict = None):
    """Traverse the scene graph and build a global reconstruction.

    ``timers``, when given, receives accumulated wall seconds under the
    keys "decode" and "register".
    """
    n = graph.n
    if backend.n_images != n:
        raise ValueError(f"backend serves {backend.n_images} images, graph has {n}")
    recon = Reconstruction(
        pointmaps=[None] * n,
        confidences=[None] * n,
        registered=[False] * n,
        root=graph.root,
        frame_transforms=[None] * n,
    )

    def tick(key, t0):
        if timers is not None:
            timers[key] = timers.get(key, 0.0) + (time.perf_counter() - t0)

    edges = list(graph.edges)
    first_edge = True
    pos = 0
    while pos < len(edges):
        chunk = edges[pos:pos + opts.chunk_size]
        pos += len(chunk)

        t0 = time.perf_counter()
        cache = {}
        for k, l in chunk:
            cache[(k, l)] = backend.decode(k, l)
            if opts.symmetrize:
                cache[(l, k)] = backend.decode(l, k)
        tick("decode", t0)

        t0 = time.perf_counter()
        for k, l in chunk:
            dec = cache[(k, l)]
            if opts.symmetrize:
                try:
                    dec = symmetric_fuse(dec, cache[(l, k)])
                except DegenerateInput:
                    recon.notes.append(f"edge ({k}, {l}): symmetric fusion degenerate, using forward decode")
            if first_edge:
                # parent camera frame becomes the global frame
                first_edge = False
                recon.pointmaps[k] = dec.x_ii
                recon.confidences[k] = dec.c_ii
                recon.registered[k] = True
                recon.frame_transforms[k] = RigidTransform.identity()
                recon.local_pointmaps[k] = dec.x_ii
                recon.pointmaps[l] = dec.x_ji
                recon.confidences[l] = dec.c_ji
                recon.registered[l] = True
                recon.frame_transforms[l] = RigidTransform.identity()
                if opts.symmetrize:
                    recon.local_pointmaps[l] = cache[(l, k)].x_ii
                continue
            if not recon.registered[k]:
                recon.notes.append(f"edge ({k}, {l}): parent unregistered, skipping child {l}")
                continue
            merged = merge_confidence(recon.confidences[k], dec.c_ii)
            recon.confidences[k] = merged
            joint = recon.pointmaps[k].valid & dec.x_ii.valid
            try:
                p_k = weighted_procrustes(
                    recon.pointmaps[k].points[joint],
                    dec.x_ii.points[joint],
                    _log_conf(merged.values[joint]),
                    mode=opts.mode,
                )
            except DegenerateInput as exc:
                recon.notes.append(f"edge ({k}, {l}): registration degenerate ({exc}), node {l} unregistered")
                continue
            to_global = p_k.inverse()
            recon.pointmaps[l] = apply(to_global, dec.x_ji)
            recon.confidences[l] = dec.c_ji
            recon.registered[l] = True
            recon.frame_transforms[l] = to_global
            if opts.symmetrize:
                recon.local_pointmaps[l] = cache[(l, k)].x_ii
        tick("register", t0)

    return recon
