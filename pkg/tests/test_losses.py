"""Loss values and gradients.  Every analytic gradient is checked against
central finite differences computed here; loss values come from closed
forms evaluated by hand."""

import numpy as np
import pytest

from conftest import random_rigid
from ffsfm.accumulate import AccumulateOptions, accumulate
from ffsfm.backend import OracleBackend, synth_scene
from ffsfm.errors import MissingEdge, ShapeMismatch
from ffsfm.geometry import Pointmap, apply
from ffsfm.losses import LossConfig, LossReport, conf_loss, global_loss, pairwise_loss, total_loss
from ffsfm.scene_graph import SceneGraph


def test_conf_loss_zero_error_floor():
    gt = np.zeros((4, 5, 3))
    conf = np.ones((4, 5))
    valid = np.ones((4, 5), dtype=bool)
    valid[0, 0] = False
    m = int(valid.sum())
    loss, _, _ = conf_loss(gt, gt, conf, valid, alpha=0.25)
    assert loss == pytest.approx(-0.25 * m)


def test_conf_loss_single_pixel_closed_form():
    gt = np.zeros((1, 1, 3))
    pred = np.array([[[3.0, 4.0, 0.0]]])  # error norm 5
    conf = np.full((1, 1), 2.0)
    valid = np.ones((1, 1), dtype=bool)
    loss, gx, gc = conf_loss(gt, pred, conf, valid, alpha=0.5)
    assert loss == pytest.approx(2.0 * 5.0 - 0.5 * 2.0)
    assert gc[0, 0] == pytest.approx(5.0 - 0.5)
    np.testing.assert_allclose(gx[0, 0], 2.0 * np.array([3.0, 4.0, 0.0]) / 5.0)
    loss_log, _, gc_log = conf_loss(gt, pred, conf, valid, alpha=0.5, regularizer="log")
    assert loss_log == pytest.approx(2.0 * 5.0 - 0.5 * np.log(2.0))
    assert gc_log[0, 0] == pytest.approx(5.0 - 0.5 / 2.0)


def _fd_check(regularizer, rng):
    h = w = 8
    gt = rng.standard_normal((h, w, 3))
    pred = gt + rng.uniform(0.05, 0.5, (h, w, 1)) * _unit(rng, (h, w))
    conf = rng.uniform(1.0, 6.0, (h, w))
    valid = rng.uniform(size=(h, w)) > 0.2
    alpha = 0.3
    _, gx, gc = conf_loss(gt, pred, conf, valid, alpha, regularizer)
    step = 1e-5
    worst = 0.0
    for _ in range(40):
        i, j, c = rng.integers(h), rng.integers(w), rng.integers(3)
        up, dn = pred.copy(), pred.copy()
        up[i, j, c] += step
        dn[i, j, c] -= step
        fd = (conf_loss(gt, up, conf, valid, alpha, regularizer)[0]
              - conf_loss(gt, dn, conf, valid, alpha, regularizer)[0]) / (2 * step)
        denom = max(abs(fd), abs(gx[i, j, c]), 1e-8)
        worst = max(worst, abs(fd - gx[i, j, c]) / denom)
        upc, dnc = conf.copy(), conf.copy()
        upc[i, j] += step
        dnc[i, j] -= step
        fd = (conf_loss(gt, pred, upc, valid, alpha, regularizer)[0]
              - conf_loss(gt, pred, dnc, valid, alpha, regularizer)[0]) / (2 * step)
        denom = max(abs(fd), abs(gc[i, j]), 1e-8)
        worst = max(worst, abs(fd - gc[i, j]) / denom)
    return worst


def _unit(rng, shape):
    v = rng.standard_normal(shape + (3,))
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


@pytest.mark.parametrize("regularizer", ["linear", "log"])
def test_conf_loss_gradients_match_finite_differences(regularizer, rng):
    assert _fd_check(regularizer, rng) < 1e-4


def test_conf_loss_shape_and_arg_validation(rng):
    gt = np.zeros((2, 2, 3))
    with pytest.raises(ShapeMismatch):
        conf_loss(gt, np.zeros((2, 3, 3)), np.ones((2, 2)), np.ones((2, 2), bool), 0.1)
    with pytest.raises(ValueError):
        conf_loss(gt, gt, np.ones((2, 2)), np.ones((2, 2), bool), 0.1, regularizer="cubic")
    with pytest.raises(ValueError):
        LossConfig(alpha=0.0)


def _chain_setup(noise=0.0, kappa=0.0, n=3):
    scene = synth_scene(n=n, seed=17, invalid_fraction=0.05)
    backend = OracleBackend(scene, noise=noise, kappa=kappa)
    graph = SceneGraph(n, 0, tuple((i, i + 1) for i in range(n - 1)))
    decodes = {e: backend.decode(*e) for e in graph.edges}
    return scene, graph, decodes


def test_pairwise_loss_zero_noise_unit_confidence_floor():
    scene, graph, decodes = _chain_setup(kappa=0.0)
    cfg = LossConfig(alpha=0.4)
    total, per_edge = pairwise_loss(scene, decodes, graph, cfg)
    expected = 0.0
    for i, j in graph.edges:
        expected -= 0.4 * (scene.pointmaps[i].valid.sum() + scene.pointmaps[j].valid.sum())
    assert total == pytest.approx(expected)
    assert len(per_edge) == len(graph.edges)


def test_pairwise_loss_single_pixel_perturbation():
    scene, graph, decodes = _chain_setup(kappa=0.0)
    cfg = LossConfig(alpha=0.4)
    base, _ = pairwise_loss(scene, decodes, graph, cfg)
    dec = decodes[(0, 1)]
    pts = dec.x_ii.points.copy()
    row, col = np.argwhere(dec.x_ii.valid)[0]
    delta = np.array([0.03, -0.04, 0.12])
    pts[row, col] += delta
    from ffsfm.backend import EdgeDecode

    decodes2 = dict(decodes)
    decodes2[(0, 1)] = EdgeDecode(Pointmap(pts, dec.x_ii.valid), dec.x_ji, dec.c_ii, dec.c_ji)
    bumped, _ = pairwise_loss(scene, decodes2, graph, cfg)
    assert bumped - base == pytest.approx(np.linalg.norm(delta), abs=1e-9)


def test_pairwise_loss_decomposes_over_edges():
    scene, graph, decodes = _chain_setup(noise=0.01, kappa=5.0)
    cfg = LossConfig()
    total, per_edge = pairwise_loss(scene, decodes, graph, cfg)
    for edge, value in per_edge:
        # recompute each edge in isolation
        single_total, single = pairwise_loss(
            scene, {edge: decodes[edge]},
            _single_edge_graph(scene.n_images, edge), cfg,
        )
        assert single_total == pytest.approx(value)
    assert total == pytest.approx(sum(v for _, v in per_edge))


def _single_edge_graph(n, edge):
    class _G:
        edges = (edge,)

    return _G()


def test_pairwise_loss_missing_edge():
    scene, graph, decodes = _chain_setup()
    decodes.pop((0, 1))
    with pytest.raises(MissingEdge):
        pairwise_loss(scene, decodes, graph, LossConfig())


def _exact_recon(scene, gauge):
    from ffsfm.accumulate import Reconstruction
    from ffsfm.geometry import ConfidenceMap

    n = scene.n_images
    return Reconstruction(
        pointmaps=[apply(gauge, scene.pointmaps[i]) for i in range(n)],
        confidences=[ConfidenceMap(np.ones(scene.image_shape)) for _ in range(n)],
        registered=[True] * n,
        root=0,
        frame_transforms=[None] * n,
    )


def test_global_loss_removes_arbitrary_rigid_frame(rng):
    scene = synth_scene(n=3, seed=23)
    gauge = random_rigid(rng)
    recon = _exact_recon(scene, gauge)
    cfg = LossConfig(alpha=0.2)
    total, per_image, align = global_loss(scene, recon, cfg)
    count = sum(int(pm.valid.sum()) for pm in scene.pointmaps)
    assert total == pytest.approx(-0.2 * count, rel=1e-9)
    residual = np.linalg.norm(
        align.transform(recon.pointmaps[0].valid_points()) - scene.pointmaps[0].valid_points(), axis=1
    ).max()
    assert residual < 1e-9


def test_global_loss_scaled_frame_needs_similarity_mode(rng):
    scene = synth_scene(n=3, seed=29)
    gauge = random_rigid(rng, scale=2.0)
    recon = _exact_recon(scene, gauge)
    rigid_total, _, rigid_align = global_loss(scene, recon, LossConfig(align_mode="rigid"))
    sim_total, _, _ = global_loss(scene, recon, LossConfig(align_mode="similarity"))
    count = sum(int(pm.valid.sum()) for pm in scene.pointmaps)
    assert sim_total == pytest.approx(-0.2 * count, rel=1e-9)
    assert rigid_total > sim_total + 1.0  # scale mismatch leaves real residual


def test_global_loss_skips_small_images(rng):
    scene = synth_scene(n=3, seed=31)
    recon = _exact_recon(scene, random_rigid(rng))
    # shrink image 1's usable mask below the 100-pixel rule
    small = np.zeros(scene.image_shape, dtype=bool)
    small[:9, :11] = True  # 99 pixels
    recon.pointmaps[1] = Pointmap(recon.pointmaps[1].points, small)
    total, per_image, _ = global_loss(scene, recon, LossConfig(alpha=0.2))
    assert per_image[1][1] is None
    counted = sum(int((scene.pointmaps[i].valid & recon.pointmaps[i].valid).sum()) for i in (0, 2))
    assert total == pytest.approx(-0.2 * counted, rel=1e-9)


def test_total_loss_arithmetic():
    assert total_loss(10.0, -5.0, 0.0) == 10.0
    assert total_loss(10.0, -5.0, 0.1) == pytest.approx(9.5)
    assert total_loss(3.0, 3.0, 1.0) == 6.0
    with pytest.raises(ValueError):
        total_loss(1.0, 1.0, -0.5)


def test_loss_report_total_identity_and_json():
    report = LossReport(2.0, -4.0, 0.1, total_loss(2.0, -4.0, 0.1), [((0, 1), 2.0)], [(0, -4.0)])
    assert report.total == report.pair_loss + report.lam * report.global_loss
    text = report.to_json()
    assert '"pair_loss": 2.0' in text
