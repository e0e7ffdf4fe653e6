"""Multi-view pose and reconstruction metrics.

Relative errors are computed over all unordered pairs of registered
images: the rotation error is the angle of R_rel_pred @ R_rel_gt^T and the
translation error is the angle between the relative translation
*directions* (SfM reconstructions carry no metric scale).  Accuracy
percentages may count pairs touching an unregistered image as failures
(default) or be taken over registered pairs only.

ATE aligns predicted camera centers to ground truth with a similarity
Umeyama fit and reports the mean residual divided by the RMS spread of the
ground-truth centers.  The Chamfer distance is one-directional: ground
truth to nearest predicted point.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import EmptyCloud, InsufficientPoses
from .geometry import RigidTransform, compose, rotation_angle_deg, weighted_procrustes


@dataclass(frozen=True)
class PoseSet:
    """Optional camera-to-world pose per image index."""

    poses: tuple

    def __post_init__(self):
        object.__setattr__(self, "poses", tuple(self.poses))

    @property
    def n(self) -> int:
        return len(self.poses)

    def registered_indices(self) -> list:
        return [i for i, p in enumerate(self.poses) if p is not None]

    @classmethod
    def from_mapping(cls, mapping: dict, n: int) -> "PoseSet":
        return cls(tuple(mapping.get(i) for i in range(n)))


@dataclass(frozen=True)
class PairErrors:
    """Per-pair angular errors over the jointly registered pairs."""

    rot_deg: np.ndarray
    trans_deg: np.ndarray
    pair_total: int       # all n*(n-1)/2 pairs, registered or not
    n_images: int
    n_registered: int


def _center_scale(centers: np.ndarray) -> float:
    """RMS distance of points from their centroid."""
    if len(centers) == 0:
        return 0.0
    return float(np.sqrt(((centers - centers.mean(axis=0)) ** 2).sum(axis=1).mean()))


def _direction_angle_deg(a: np.ndarray, b: np.ndarray, eps: float) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na < eps or nb < eps:
        return 0.0 if (na < eps and nb < eps) else 180.0
    ua, ub = a / na, b / nb
    return float(np.degrees(np.arctan2(np.linalg.norm(np.cross(ua, ub)), np.dot(ua, ub))))


def relative_errors(pred: PoseSet, gt: PoseSet) -> PairErrors:
    """Angular rotation/translation-direction errors for all registered pairs."""
    if pred.n != gt.n:
        raise InsufficientPoses("pose sets cover different image counts")
    n = pred.n
    common = [i for i in range(n) if pred.poses[i] is not None and gt.poses[i] is not None]
    if len(common) < 2:
        raise InsufficientPoses("need at least 2 jointly registered images")
    gt_centers = np.stack([gt.poses[i].translation for i in common])
    eps = max(1e-9 * _center_scale(gt_centers), 1e-15)

    rot_err = []
    trans_err = []
    for a_pos, i in enumerate(common):
        for j in common[a_pos + 1:]:
            rel_pred = compose(pred.poses[i].inverse(), pred.poses[j])
            rel_gt = compose(gt.poses[i].inverse(), gt.poses[j])
            rot_err.append(rotation_angle_deg(rel_pred.rotation @ rel_gt.rotation.T))
            trans_err.append(_direction_angle_deg(rel_pred.translation, rel_gt.translation, eps))
    return PairErrors(
        np.asarray(rot_err), np.asarray(trans_err), n * (n - 1) // 2, n, len(common)
    )


def rra_rta(errors: PairErrors, taus, count_unregistered: bool = True):
    """Accuracy percentages below each threshold; returns (rra, rta) dicts."""
    denom = errors.pair_total if count_unregistered else max(len(errors.rot_deg), 1)
    rra = {float(t): 100.0 * float((errors.rot_deg < t).sum()) / denom for t in taus}
    rta = {float(t): 100.0 * float((errors.trans_deg < t).sum()) / denom for t in taus}
    return rra, rta


def maa30(errors: PairErrors, count_unregistered: bool = True) -> float:
    """Mean over integer thresholds 1..30 of min(RRA@t, RTA@t)."""
    taus = range(1, 31)
    rra, rta = rra_rta(errors, taus, count_unregistered)
    return float(np.mean([min(rra[float(t)], rta[float(t)]) for t in taus]))


def ate_alignment(pred: PoseSet, gt: PoseSet):
    """Similarity alignment of predicted camera centers onto ground truth.

    Returns (ate, transform) where ate is the mean aligned-center error
    normalized by the RMS spread of the ground-truth centers.
    """
    common = [
        i for i in range(min(pred.n, gt.n))
        if pred.poses[i] is not None and gt.poses[i] is not None
    ]
    if len(common) < 3:
        raise InsufficientPoses("need at least 3 jointly registered cameras for ATE")
    pred_centers = np.stack([pred.poses[i].translation for i in common])
    gt_centers = np.stack([gt.poses[i].translation for i in common])
    align = weighted_procrustes(pred_centers, gt_centers, mode="similarity")
    residual = np.linalg.norm(align.transform(pred_centers) - gt_centers, axis=1)
    scale = _center_scale(gt_centers)
    if scale <= 0:
        scale = 1.0
    return float(residual.mean() / scale), align


def ate(pred: PoseSet, gt: PoseSet) -> float:
    return ate_alignment(pred, gt)[0]


def chamfer(pred_cloud: np.ndarray, gt_cloud: np.ndarray) -> float:
    """Mean distance from every ground-truth point to its nearest prediction."""
    pred_cloud = np.asarray(pred_cloud, dtype=np.float64)
    gt_cloud = np.asarray(gt_cloud, dtype=np.float64)
    if len(pred_cloud) == 0 or len(gt_cloud) == 0:
        raise EmptyCloud("chamfer distance needs two non-empty clouds")
    dist, _ = cKDTree(pred_cloud).query(gt_cloud, k=1)
    return float(np.mean(dist))


@dataclass
class MetricReport:
    rra: dict
    rta: dict
    maa30: float
    ate: float
    registration_rate: float
    pair_count: int
    chamfer: float = None

    def format_keyvalues(self) -> str:
        lines = [f"pairs {self.pair_count}", f"reg {self.registration_rate:.17g}"]
        for t in sorted(self.rra):
            lines.append(f"rra@{t:g} {self.rra[t]:.17g}")
        for t in sorted(self.rta):
            lines.append(f"rta@{t:g} {self.rta[t]:.17g}")
        lines.append(f"maa@30 {self.maa30:.17g}")
        lines.append(f"ate {self.ate:.17g}")
        if self.chamfer is not None:
            lines.append(f"chamfer {self.chamfer:.17g}")
        return "\n".join(lines) + "\n"

    def format_table(self) -> str:
        taus = sorted(set(self.rra) | set(self.rta))
        headers = ["metric"] + [f"@{t:g}" for t in taus]
        rows = [
            ["RRA"] + [f"{self.rra.get(t, float('nan')):.1f}" for t in taus],
            ["RTA"] + [f"{self.rta.get(t, float('nan')):.1f}" for t in taus],
        ]
        widths = [max(len(h), *(len(r[c]) for r in rows)) for c, h in enumerate(headers)]
        out = ["  ".join(h.ljust(widths[c]) for c, h in enumerate(headers))]
        for r in rows:
            out.append("  ".join(v.ljust(widths[c]) for c, v in enumerate(r)))
        out.append(f"mAA@30 {self.maa30:.1f}   ATE {self.ate:.6f}   Reg. {self.registration_rate:.1f}   pairs {self.pair_count}")
        if self.chamfer is not None:
            out.append(f"chamfer {self.chamfer:.6f}")
        return "\n".join(out) + "\n"


def evaluate(pred: PoseSet, gt: PoseSet, taus=(5.0, 15.0, 30.0), pred_cloud=None, gt_cloud=None) -> MetricReport:
    """Full metric suite; unregistered pairs count as failures.

    When clouds are given, the predicted cloud is carried into the GT
    frame with the ATE alignment before the Chamfer distance.
    """
    errors = relative_errors(pred, gt)
    rra, rta = rra_rta(errors, taus)
    try:
        ate_value, align = ate_alignment(pred, gt)
    except InsufficientPoses:
        ate_value, align = float("nan"), None
    cd = None
    if pred_cloud is not None and gt_cloud is not None:
        aligned = align.transform(pred_cloud) if align is not None else pred_cloud
        cd = chamfer(aligned, gt_cloud)
    reg = 100.0 * errors.n_registered / errors.n_images
    return MetricReport(rra, rta, maa30(errors), ate_value, reg, errors.pair_total, cd)
