"""Supervision objectives over pairwise and globally accumulated pointmaps.

The per-pixel regression term is C_p * ||X_p - Xbar_p|| minus a confidence
regularizer, summed over valid pixels.  Two regularizer variants exist:

* ``linear``: subtract alpha * C_p (the default for loss reporting);
* ``log``: subtract alpha * log(C_p), bounded below in C, the sane choice
  for any gradient-descent use.

The pairwise term supervises each edge decode in the frame of its first
camera; the global term first aligns the accumulated reconstruction to
ground truth with one unweighted Procrustes fit and then scores each image
in the ground-truth frame.  Analytic gradients with respect to pointmaps
and confidences are available; alignment and accumulation transforms are
treated as constants.
"""

from __future__ import annotations

from dataclasses import dataclass, field
import json

import numpy as np

from .errors import MissingEdge, ShapeMismatch
from .geometry import apply, weighted_procrustes

_ZERO_NORM = 1e-300


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 0.2
    lam: float = 0.1                  # weight of the global term
    min_valid_pixels: int = 100       # images below this are skipped globally
    regularizer: str = "linear"       # "linear" or "log"
    align_mode: str = "rigid"         # Procrustes mode for the global alignment

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")
        if self.lam < 0:
            raise ValueError("lambda must be nonnegative")
        if self.regularizer not in ("linear", "log"):
            raise ValueError("regularizer must be 'linear' or 'log'")


@dataclass
class LossReport:
    pair_loss: float
    global_loss: float
    lam: float
    total: float
    per_edge: list = field(default_factory=list)    # ((i, j), value)
    per_image: list = field(default_factory=list)   # (image, value or None when skipped)

    def to_json(self) -> str:
        return json.dumps(
            {
                "pair_loss": self.pair_loss,
                "global_loss": self.global_loss,
                "lambda": self.lam,
                "total": self.total,
                "per_edge": [[list(edge), value] for edge, value in self.per_edge],
                "per_image": [[image, value] for image, value in self.per_image],
            },
            sort_keys=True,
        )


def conf_loss(gt, pred, conf, valid, alpha: float, regularizer: str = "linear"):
    """Confidence-weighted regression over one (H, W, 3) grid pair.

    Returns (loss, d_loss/d_pred, d_loss/d_conf); gradients are zero
    outside the valid mask and at exactly coincident points.
    """
    gt = np.asarray(gt, dtype=np.float64)
    pred = np.asarray(pred, dtype=np.float64)
    conf = np.asarray(conf, dtype=np.float64)
    valid = np.asarray(valid, dtype=bool)
    if gt.shape != pred.shape or gt.shape[:2] != conf.shape or conf.shape != valid.shape:
        raise ShapeMismatch("gt/pred/conf/valid shapes disagree")
    if regularizer not in ("linear", "log"):
        raise ValueError("regularizer must be 'linear' or 'log'")

    diff = pred[valid] - gt[valid]
    norm = np.linalg.norm(diff, axis=-1)
    c = conf[valid]
    if regularizer == "linear":
        loss = float((c * norm - alpha * c).sum())
        d_c = norm - alpha
    else:
        loss = float((c * norm - alpha * np.log(c)).sum())
        d_c = norm - alpha / c

    grad_pred = np.zeros_like(pred)
    grad_conf = np.zeros_like(conf)
    d_x = c[:, None] * diff / np.maximum(norm, _ZERO_NORM)[:, None]
    d_x[norm == 0.0] = 0.0
    grad_pred[valid] = d_x
    grad_conf[valid] = d_c
    return loss, grad_pred, grad_conf


def pairwise_loss(scene, decodes, graph, cfg: LossConfig):
    """Sum of per-edge regression terms in each edge's first-camera frame.

    ``decodes`` maps (i, j) edge tuples to EdgeDecode objects; every graph
    edge must be present.  Returns (total, per_edge list).
    """
    total = 0.0
    per_edge = []
    for i, j in graph.edges:
        if (i, j) not in decodes:
            raise MissingEdge(f"no decode for edge ({i}, {j})")
        dec = decodes[(i, j)]
        w2c = scene.poses[i].inverse()
        gt_i = apply(w2c, scene.pointmaps[i])
        gt_j = apply(w2c, scene.pointmaps[j])
        mask_i = gt_i.valid & dec.x_ii.valid
        mask_j = gt_j.valid & dec.x_ji.valid
        value = (
            conf_loss(gt_i.points, dec.x_ii.points, dec.c_ii.values, mask_i, cfg.alpha, cfg.regularizer)[0]
            + conf_loss(gt_j.points, dec.x_ji.points, dec.c_ji.values, mask_j, cfg.alpha, cfg.regularizer)[0]
        )
        per_edge.append(((i, j), value))
        total += value
    return total, per_edge


def global_alignment(scene, recon, cfg: LossConfig):
    """Unweighted Procrustes transform taking the reconstruction onto GT.

    Fit over the union of valid pixels of all registered images.
    """
    src = []
    dst = []
    for i in range(scene.n_images):
        if not recon.registered[i]:
            continue
        mask = scene.pointmaps[i].valid & recon.pointmaps[i].valid
        src.append(recon.pointmaps[i].points[mask])
        dst.append(scene.pointmaps[i].points[mask])
    if not src:
        raise ShapeMismatch("reconstruction has no registered images")
    return weighted_procrustes(np.concatenate(src), np.concatenate(dst), mode=cfg.align_mode)


def global_loss(scene, recon, cfg: LossConfig):
    """Per-image regression against GT after one global alignment.

    Images whose usable pixel count falls below cfg.min_valid_pixels
    contribute nothing.  Returns (total, per_image list, alignment).
    """
    align = global_alignment(scene, recon, cfg)
    total = 0.0
    per_image = []
    for i in range(scene.n_images):
        if not recon.registered[i]:
            per_image.append((i, None))
            continue
        mask = scene.pointmaps[i].valid & recon.pointmaps[i].valid
        if int(mask.sum()) < cfg.min_valid_pixels:
            per_image.append((i, None))
            continue
        aligned = apply(align, recon.pointmaps[i])
        value = conf_loss(
            scene.pointmaps[i].points, aligned.points, recon.confidences[i].values, mask,
            cfg.alpha, cfg.regularizer,
        )[0]
        per_image.append((i, value))
        total += value
    return total, per_image, align


def total_loss(pair: float, glob: float, lam: float) -> float:
    if lam < 0:
        raise ValueError("lambda must be nonnegative")
    return pair + lam * glob


def evaluate_losses(scene, backend, graph, recon, cfg: LossConfig) -> LossReport:
    """Pairwise + global supervision of a finished reconstruction."""
    decodes = {edge: backend.decode(*edge) for edge in graph.edges}
    pair, per_edge = pairwise_loss(scene, decodes, graph, cfg)
    glob, per_image, _ = global_loss(scene, recon, cfg)
    return LossReport(pair, glob, cfg.lam, total_loss(pair, glob, cfg.lam), per_edge, per_image)
