"""Camera intrinsics and pose recovery from global pointmaps.

Per image the procedure is: select confident pixels (threshold with a
quantile fallback), fit an initial uncalibrated projective DLT to move the
pointmap into a provisional camera frame, estimate the focal length there
with a Weiszfeld-style robust estimator, run RANSAC-PnP with a 6-point DLT
minimal solver, then re-center with the recovered pose and repeat the
focal/PnP pass once.  The principal point is fixed at the image center and
one shared focal serves both axes.

Everything is deterministic: RANSAC draws from a generator seeded per
image from (seed, image index).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InsufficientPoints, NoPositiveDepth
from .geometry import Intrinsics, Pointmap, RigidTransform, pixel_centers

_WEISZFELD_ITERS = 10
_MIN_FOCAL_POINTS = 10
_FOCAL_POSE_ROUNDS = 5
_LO_SLACK = 3.0          # slack factor for the local-optimization support set
_LO_MAX_POINTS = 1200    # stride-subsample larger support sets in the refit


@dataclass(frozen=True)
class PnPConfig:
    conf_threshold: float = 3.0
    fallback_quantile: float = 0.90   # used when no pixel clears the threshold
    ransac_iterations: int = 512
    inlier_fraction: float = 0.01     # inlier threshold as fraction of image diagonal
    min_inliers: int = 12
    seed: int = 0

    def __post_init__(self):
        if self.conf_threshold < 1:
            raise ValueError("confidence threshold must be >= 1")
        if not 0.0 < self.fallback_quantile < 1.0:
            raise ValueError("fallback quantile must be in (0, 1)")


@dataclass
class ExtractionResult:
    poses: list           # camera-to-world RigidTransform or None per image
    focals: list          # float or None per image
    registered: list
    inlier_counts: list

    @property
    def registration_rate(self) -> float:
        return 100.0 * sum(self.registered) / len(self.registered)


def estimate_focal(pm: Pointmap, valid=None) -> float:
    """Robust shared focal length from a camera-frame pointmap.

    Iteratively reweighted least squares on f minimizing
    sum_p w_p ||(u_p - cx, v_p - cy) - f * (x_p/z_p, y_p/z_p)||
    with w_p = 1 / max(residual_p, eps), initialized at the median ratio.
    """
    mask = pm.valid if valid is None else (pm.valid & np.asarray(valid, dtype=bool))
    pts = pm.points[mask]
    uv = pixel_centers(pm.height, pm.width)[mask]
    front = pts[:, 2] > 0
    if not front.any():
        raise NoPositiveDepth("no selected point has positive depth")
    if int(front.sum()) < _MIN_FOCAL_POINTS:
        raise InsufficientPoints(f"need >= {_MIN_FOCAL_POINTS} points with positive depth")
    pts = pts[front]
    uv = uv[front]

    cx, cy = pm.width / 2.0, pm.height / 2.0
    q = uv - np.array([cx, cy])
    d = pts[:, :2] / pts[:, 2:3]
    qn = np.linalg.norm(q, axis=1)
    dn = np.linalg.norm(d, axis=1)
    usable = dn > 1e-9
    f = float(np.median(qn[usable] / dn[usable])) if usable.any() else 1.0
    if f <= 0:
        f = 1.0
    for _ in range(_WEISZFELD_ITERS):
        resid = np.linalg.norm(q - f * d, axis=1)
        w = 1.0 / np.maximum(resid, 1e-8)
        f = float((w * (q * d).sum(axis=1)).sum() / (w * (d * d).sum(axis=1)).sum())
    return f


def _dlt_projection(pts3d: np.ndarray, pts2d: np.ndarray) -> np.ndarray:
    """Homogeneous DLT for a 3x4 projection, x ~ P X; needs >= 6 points.

    Points are Hartley-normalized (zero centroid, unit RMS) before the fit.
    """
    m = len(pts3d)
    c3 = pts3d.mean(axis=0)
    s3 = np.sqrt(((pts3d - c3) ** 2).sum(axis=1).mean())
    c2 = pts2d.mean(axis=0)
    s2 = np.sqrt(((pts2d - c2) ** 2).sum(axis=1).mean())
    if s3 < 1e-12 or s2 < 1e-12:
        raise np.linalg.LinAlgError("degenerate point configuration")
    xn = (pts3d - c3) / s3
    un = (pts2d - c2) / s2

    xh = np.concatenate([xn, np.ones((m, 1))], axis=1)
    a = np.zeros((2 * m, 12))
    a[0::2, 0:4] = xh
    a[0::2, 8:12] = -un[:, 0:1] * xh
    a[1::2, 4:8] = xh
    a[1::2, 8:12] = -un[:, 1:2] * xh
    _, _, vt = np.linalg.svd(a, full_matrices=False)
    p_norm = vt[-1].reshape(3, 4)

    t2_inv = np.array([[s2, 0.0, c2[0]], [0.0, s2, c2[1]], [0.0, 0.0, 1.0]])
    t3 = np.eye(4) / s3
    t3[:3, 3] = -c3 / s3
    t3[3, 3] = 1.0
    return t2_inv @ p_norm @ t3


def _pose_from_projection(p: np.ndarray, pts3d: np.ndarray):
    """Nearest world-to-camera (R, t) from a calibrated projection estimate.

    The DLT solution is known only up to sign and scale.  The sign is fixed
    first from the projective depths (exact even for a perfect fit), then
    the linear block is polar-projected onto the nearest proper rotation.
    """
    homog = np.concatenate([pts3d, np.ones((len(pts3d), 1))], axis=1)
    depth_signs = homog @ p[2]
    if (depth_signs > 0).sum() < (depth_signs < 0).sum():
        p = -p
    m3 = p[:, :3]
    u, s, vt = np.linalg.svd(m3)
    mean_s = s.mean()
    if mean_s <= 0 or not np.isfinite(mean_s):
        return None
    rot = u @ np.diag([1.0, 1.0, np.linalg.det(u @ vt)]) @ vt
    if np.linalg.det(rot) < 0:
        return None
    return rot, p[:, 3] / mean_s


def _reprojection_errors(pts3d, pts2d, rot, t, k: Intrinsics):
    cam = pts3d @ rot.T + t
    front = cam[:, 2] > 1e-12
    err = np.full(len(pts3d), np.inf)
    if front.any():
        uv = k.project(cam[front])
        err[front] = np.linalg.norm(uv - pts2d[front], axis=1)
    return err


def _select_pixels(conf_values: np.ndarray, valid: np.ndarray, cfg: PnPConfig) -> np.ndarray:
    sel = valid & (conf_values > cfg.conf_threshold)
    if not sel.any() and valid.any():
        cut = np.quantile(conf_values[valid], cfg.fallback_quantile)
        sel = valid & (conf_values >= cut)
    return sel


def ransac_pnp(pts3d: np.ndarray, pts2d: np.ndarray, k: Intrinsics, cfg: PnPConfig, seed) -> tuple:
    """RANSAC over 6-point DLT solves; returns (rot, t, inlier_mask) or None.

    Adaptive iteration count at 0.999 confidence, capped by the config.
    The final pose is refit on all inliers and the mask recomputed.
    """
    m = len(pts3d)
    if m < 6:
        return None
    kinv = np.linalg.inv(k.matrix())
    ones = np.ones((m, 1))
    norm2d = (np.concatenate([pts2d, ones], axis=1) @ kinv.T)[:, :2]
    diag = float(np.hypot(2 * k.cx, 2 * k.cy))
    thr = cfg.inlier_fraction * diag

    rng = np.random.default_rng(seed)
    refit = _SupportRefitter(pts3d, pts2d, norm2d, k, thr)
    best = None  # (count, rot, t, err)
    limit = cfg.ransac_iterations
    it = 0
    while it < limit:
        it += 1
        idx = rng.choice(m, size=6, replace=False)
        try:
            p = _dlt_projection(pts3d[idx], norm2d[idx])
        except np.linalg.LinAlgError:
            continue
        pose = _pose_from_projection(p, pts3d[idx])
        if pose is None:
            continue
        err = _reprojection_errors(pts3d, pts2d, pose[0], pose[1], k)
        cand = (int((err < thr).sum()), pose[0], pose[1], err)
        best_count = best[0] if best else 0
        # local optimization: a minimal-sample pose is noisy, so refit
        # promising hypotheses on their slack consensus set
        promising = cand[0] > best_count or int((err < _LO_SLACK * thr).sum()) > max(2 * best_count, 12)
        if promising:
            refined = refit.once(err)
            if refined is not None and refined[0] > cand[0]:
                cand = refined
        if cand[0] > best_count:
            best = cand
            limit = max(_adaptive_limit(cand[0] / m, cfg.ransac_iterations), it)
    if best is None or best[0] < 6:
        return None
    # final polish from the winner's slack support
    refined = refit.once(best[3])
    if refined is not None and refined[0] >= best[0]:
        best = refined
    return best[1], best[2], best[3] < thr


class _SupportRefitter:
    """DLT refits over slack consensus sets, scored at the tight threshold.

    Fitting on the tight inlier subset alone is unstable on shallow
    surfaces (the subset is noise-biased), so support is always gathered
    at a slack multiple of the threshold.
    """

    def __init__(self, pts3d, pts2d, norm2d, k, thr):
        self.pts3d = pts3d
        self.pts2d = pts2d
        self.norm2d = norm2d
        self.k = k
        self.thr = thr

    def once(self, err):
        support = err < _LO_SLACK * self.thr
        if int(support.sum()) < 6:
            return None
        sub = np.nonzero(support)[0]
        if len(sub) > _LO_MAX_POINTS:
            sub = sub[:: int(np.ceil(len(sub) / _LO_MAX_POINTS))]
        try:
            p = _dlt_projection(self.pts3d[sub], self.norm2d[sub])
        except np.linalg.LinAlgError:
            return None
        pose = _pose_from_projection(p, self.pts3d[sub])
        if pose is None:
            return None
        new_err = _reprojection_errors(self.pts3d, self.pts2d, pose[0], pose[1], self.k)
        return int((new_err < self.thr).sum()), pose[0], pose[1], new_err


def refine_pose(pm: Pointmap, conf, k: Intrinsics, cfg: PnPConfig, pose_w2c: RigidTransform):
    """Guided inlier refinement of an existing pose at the configured threshold.

    Alternates inlier selection and DLT refits (no sampling); returns
    (camera-to-world pose, registered, inlier count) or None when the pose
    gathers no usable support.
    """
    conf_values = conf.values if hasattr(conf, "values") else np.asarray(conf, dtype=np.float64)
    sel = _select_pixels(conf_values, pm.valid, cfg)
    if int(sel.sum()) < 6:
        return None
    pts3d = pm.points[sel]
    pts2d = pixel_centers(pm.height, pm.width)[sel]
    kinv = np.linalg.inv(k.matrix())
    norm2d = (np.concatenate([pts2d, np.ones((len(pts2d), 1))], axis=1) @ kinv.T)[:, :2]
    thr = cfg.inlier_fraction * float(np.hypot(2 * k.cx, 2 * k.cy))

    refit = _SupportRefitter(pts3d, pts2d, norm2d, k, thr)
    err = _reprojection_errors(pts3d, pts2d, pose_w2c.rotation, pose_w2c.translation, k)
    best = (int((err < thr).sum()), pose_w2c.rotation, pose_w2c.translation, err)
    current = best
    for _ in range(3):
        refined = refit.once(current[3])
        if refined is None:
            break
        current = refined
        if current[0] > best[0]:
            best = current
    count = best[0]
    if count < 1:
        return None
    w2c = RigidTransform(best[1], best[2])
    return w2c.inverse(), count >= cfg.min_inliers, count


def extract_pose(pm: Pointmap, conf, k: Intrinsics, cfg: PnPConfig, seed=None):
    """Recover a camera-to-world pose from one global pointmap.

    Returns (pose, registered, inlier_count); failure is signalled by
    registered=False with an identity pose, never an exception.
    """
    conf_values = conf.values if hasattr(conf, "values") else np.asarray(conf, dtype=np.float64)
    sel = _select_pixels(conf_values, pm.valid, cfg)
    if not sel.any():
        return RigidTransform.identity(), False, 0
    pts3d = pm.points[sel]
    pts2d = pixel_centers(pm.height, pm.width)[sel]
    result = ransac_pnp(pts3d, pts2d, k, cfg, cfg.seed if seed is None else seed)
    if result is None:
        return RigidTransform.identity(), False, 0
    rot, t, inliers = result
    count = int(inliers.sum())
    w2c = RigidTransform(rot, t)
    return w2c.inverse(), count >= cfg.min_inliers, count


def _rq3(m: np.ndarray):
    """RQ decomposition of a 3x3 matrix via reversed QR."""
    rev = np.flipud(np.fliplr(m)).T
    q, r = np.linalg.qr(rev)
    rq_r = np.flipud(np.fliplr(r.T))
    rq_q = np.flipud(np.fliplr(q.T))
    signs = np.sign(np.diag(rq_r))
    signs[signs == 0] = 1.0
    return rq_r * signs[None, :], rq_q * signs[:, None]


def _projective_errors(pts3d, pts2d, p):
    homog = np.concatenate([pts3d, np.ones((len(pts3d), 1))], axis=1)
    proj = homog @ p.T
    err = np.full(len(pts3d), np.inf)
    ok = np.abs(proj[:, 2]) > 1e-12
    err[ok] = np.linalg.norm(proj[ok, :2] / proj[ok, 2:] - pts2d[ok], axis=1)
    return err


def _ransac_projective(pts3d, pts2d, thr, iterations, rng):
    """Consensus 11-dof projective fit; returns P refit on the best inliers."""
    m = len(pts3d)
    best_count = 0
    best_mask = None
    limit = iterations
    it = 0
    while it < limit:
        it += 1
        idx = rng.choice(m, size=6, replace=False)
        try:
            p = _dlt_projection(pts3d[idx], pts2d[idx])
        except np.linalg.LinAlgError:
            continue
        mask = _projective_errors(pts3d, pts2d, p) < thr
        count = int(mask.sum())
        if count > best_count:
            best_count = count
            best_mask = mask
            limit = max(_adaptive_limit(count / m, iterations), it)
    if best_mask is None or best_count < 6:
        raise InsufficientPoints("projective RANSAC found no consensus")
    return _dlt_projection(pts3d[best_mask], pts2d[best_mask])


def _adaptive_limit(inlier_ratio: float, cap: int, confidence: float = 0.999) -> int:
    if inlier_ratio <= 0:
        return cap
    denom = np.log1p(-min(inlier_ratio ** 6, 1.0 - 1e-12))
    if denom >= 0:
        return cap
    return min(cap, int(np.ceil(np.log(1.0 - confidence) / denom)))


def initial_camera_frame(pm: Pointmap, conf, cfg: PnPConfig, seed=None):
    """Provisional world-to-camera transform from an uncalibrated DLT.

    A consensus (RANSAC) 11-dof projective fit is decomposed so the
    pointmap can be re-centered for focal estimation before any
    intrinsics are known.
    """
    conf_values = conf.values if hasattr(conf, "values") else np.asarray(conf, dtype=np.float64)
    sel = _select_pixels(conf_values, pm.valid, cfg)
    if int(sel.sum()) < 6:
        raise InsufficientPoints("need >= 6 confident pixels for the projective DLT")
    pts3d = pm.points[sel]
    pts2d = pixel_centers(pm.height, pm.width)[sel]
    diag = float(np.hypot(pm.width, pm.height))
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    p = _ransac_projective(pts3d, pts2d, cfg.inlier_fraction * diag, cfg.ransac_iterations, rng)
    kmat, rot = _rq3(p[:, :3])
    if kmat[2, 2] == 0 or not np.isfinite(kmat).all():
        raise InsufficientPoints("projective DLT is degenerate")
    t = np.linalg.solve(kmat, p[:, 3])
    if np.linalg.det(rot) < 0:
        # DLT solutions are defined up to overall sign
        rot = -rot
        t = -t
    return RigidTransform(rot, t)


def extract_all(recon, cfg: PnPConfig = PnPConfig()) -> ExtractionResult:
    """Focal + pose recovery for every registered image of a reconstruction."""
    n = recon.n_images
    result = ExtractionResult([None] * n, [None] * n, [False] * n, [0] * n)
    from dataclasses import replace

    loose = replace(cfg, inlier_fraction=3.0 * cfg.inlier_fraction)
    for i in range(n):
        if not recon.registered[i]:
            continue
        pm = recon.pointmaps[i]
        conf = recon.confidences[i]
        seed = [cfg.seed, 5, i]

        def focal_with(w2c):
            local = Pointmap(
                w2c.transform(pm.points.reshape(-1, 3)).reshape(pm.points.shape), pm.valid.copy()
            )
            return estimate_focal(local)

        try:
            local = recon.local_pointmaps[i] if recon.local_pointmaps else None
            if local is not None:
                # the own-frame decode pins the focal without needing a pose
                f = estimate_focal(local)
                if f <= 0:
                    continue
                k = Intrinsics(f, f, pm.width / 2.0, pm.height / 2.0)
                pose, ok, count = extract_pose(pm, conf, k, loose, seed)
            else:
                # no own-frame map: bootstrap a frame projectively, then
                # alternate focal and pose at a slack threshold until the
                # focal settles
                w2c0 = initial_camera_frame(pm, conf, cfg, seed)
                f = focal_with(w2c0)
                if f <= 0:
                    continue
                ok = False
                pose = None
                for _ in range(_FOCAL_POSE_ROUNDS):
                    k = Intrinsics(f, f, pm.width / 2.0, pm.height / 2.0)
                    pose, ok, count = extract_pose(pm, conf, k, loose, seed)
                    if not ok:
                        break
                    f_new = focal_with(pose.inverse())
                    if f_new <= 0:
                        break
                    settled = abs(f_new - f) <= 1e-3 * f
                    f = f_new
                    if settled:
                        break
            if ok:
                k = Intrinsics(f, f, pm.width / 2.0, pm.height / 2.0)
                refined = refine_pose(pm, conf, k, cfg, pose.inverse())
                if refined is None:
                    pose, ok, count = extract_pose(pm, conf, k, cfg, seed)
                else:
                    pose, ok, count = refined
        except (InsufficientPoints, NoPositiveDepth, np.linalg.LinAlgError):
            continue
        result.poses[i] = pose
        result.focals[i] = f
        result.registered[i] = ok
        result.inlier_counts[i] = count
    return result
