"""Command-line interface: synth, reconstruct, eval, probe-align.

Exit codes: 0 success, 1 usage error, 2 data/processing error.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import io_formats, pipeline
from .accumulate import AccumulateOptions
from .backend import TRAJECTORIES, synth_scene
from .errors import PipelineError
from .latent_align import complexity_probe
from .losses import LossConfig, evaluate_losses
from .metrics import PoseSet, evaluate
from .pose_extract import PnPConfig


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"error: {message}\n")
        raise SystemExit(1)


def _parse_size(text: str):
    try:
        h, w = text.lower().split("x")
        return int(h), int(w)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected HxW, got {text!r}") from None


def _build_parser() -> _Parser:
    parser = _Parser(prog="ffsfm", description="Feed-forward SfM over pairwise pointmaps")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[], help="generate a synthetic scene directory")
    p.add_argument("--n", type=int, default=8, help="number of images (>= 2)")
    p.add_argument("--size", type=_parse_size, default=(48, 64), metavar="HxW")
    p.add_argument("--traj", choices=TRAJECTORIES, default="orbit")
    p.add_argument("--noise", type=float, default=0.0, help="iid decode noise as a fraction of scene scale")
    p.add_argument("--warp", type=float, default=0.0, help="correlated decode error as a fraction of scene scale")
    p.add_argument("--scale-jitter", type=float, default=0.0, help="std of the per-edge log-scale ambiguity")
    p.add_argument("--kappa", type=float, default=10.0, help="confidence model gain")
    p.add_argument("--invalid", type=float, default=0.05, help="invalid-pixel fraction per image")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("reconstruct", help="run the pipeline on a scene directory")
    p.add_argument("--input", required=True, help="scene directory from `ffsfm synth`")
    p.add_argument("--graph", choices=pipeline.GRAPH_KINDS, default="spt")
    p.add_argument("--conf-thr", type=float, default=3.0)
    p.add_argument("--no-symmetrize", action="store_true")
    p.add_argument("--sim3", action="store_true", help="similarity instead of rigid registration")
    p.add_argument("--chunk", type=int, default=32)
    p.add_argument("--align-layers", type=int, default=4, help="latent alignment probe depth (0 disables)")
    p.add_argument("--seed", type=int, default=0, help="pose extraction RANSAC seed")
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval", help="compare predicted poses (and clouds) to ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--pred-cloud")
    p.add_argument("--gt-cloud")
    p.add_argument("--thresholds", default="5,15,30")
    p.add_argument("--out", help="write machine-readable key=value report here")
    p.add_argument("--loss", action="store_true", help="also report supervision losses (needs --scene/--recon)")
    p.add_argument("--scene", help="scene directory (for --loss)")
    p.add_argument("--recon", help="reconstruction directory (for --loss)")

    p = sub.add_parser("probe-align", help="time the alignment block across image counts")
    p.add_argument("--n-values", default="8,16,32,64,128")
    p.add_argument("--tokens", type=int, default=64)
    p.add_argument("--dim", type=int, default=32)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--levels", type=int, default=2)
    p.add_argument("--reps", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="write CSV here instead of stdout")
    return parser


def _cmd_synth(args) -> int:
    if args.n < 2:
        return _usage("--n must be at least 2")
    h, w = args.size
    scene = synth_scene(
        traj=args.traj, n=args.n, height=h, width=w, seed=args.seed, invalid_fraction=args.invalid
    )
    pipeline.save_scene(args.out, scene, args.noise, args.kappa, args.traj, args.invalid, args.warp, args.scale_jitter)
    print(f"wrote scene with {args.n} images to {args.out}")
    return 0


def _usage(message: str) -> int:
    sys.stderr.write(f"error: {message}\n")
    return 1


def _cmd_reconstruct(args) -> int:
    scene, oracle, embeddings = pipeline.load_scene(args.input)
    opts = AccumulateOptions(
        symmetrize=not args.no_symmetrize,
        mode="similarity" if args.sim3 else "rigid",
        chunk_size=args.chunk,
    )
    pnp = PnPConfig(conf_threshold=args.conf_thr, seed=args.seed)
    result = pipeline.run_reconstruction(
        scene,
        embeddings=embeddings,
        noise=oracle.noise,
        kappa=oracle.kappa,
        warp=oracle.warp,
        scale_jitter=oracle.scale_jitter,
        graph_kind=args.graph,
        opts=opts,
        pnp=pnp,
        align_layers=args.align_layers,
    )
    flags = {
        "input": str(args.input),
        "graph": args.graph,
        "conf_thr": args.conf_thr,
        "symmetrize": int(not args.no_symmetrize),
        "sim3": int(args.sim3),
        "chunk": args.chunk,
        "align_layers": args.align_layers,
        "seed": args.seed,
        "out": str(args.out),
    }
    pipeline.save_run(args.out, result, flags)
    print(
        f"reconstructed {scene.n_images} images (root {result.graph.root}, "
        f"Reg. {result.extraction.registration_rate:.1f})"
    )
    return 0


def _cmd_eval(args) -> int:
    pred_raw = io_formats.load_poses(args.pred)
    gt_raw = io_formats.load_poses(args.gt)
    if not gt_raw:
        raise PipelineError("ground-truth pose file is empty")
    n = max(gt_raw) + 1
    gt = PoseSet.from_mapping({i: pose for i, (pose, _) in gt_raw.items()}, n)
    pred = PoseSet.from_mapping({i: pose for i, (pose, _) in pred_raw.items() if i in gt_raw}, n)
    clouds = (None, None)
    if args.pred_cloud and args.gt_cloud:
        clouds = (io_formats.load_ply(args.pred_cloud)[0], io_formats.load_ply(args.gt_cloud)[0])
    taus = [float(t) for t in args.thresholds.split(",") if t]
    report = evaluate(pred, gt, taus, pred_cloud=clouds[0], gt_cloud=clouds[1])
    sys.stdout.write(report.format_table())
    if args.out:
        Path(args.out).write_text(report.format_keyvalues())
    if args.loss:
        if not (args.scene and args.recon):
            return _usage("--loss requires --scene and --recon")
        scene, oracle, _ = pipeline.load_scene(args.scene)
        from .backend import OracleBackend

        graph, recon = pipeline.load_run_reconstruction(args.recon, scene)
        backend = OracleBackend(scene, oracle.noise, oracle.kappa, oracle.warp, oracle.scale_jitter)
        loss_report = evaluate_losses(scene, backend, graph, recon, LossConfig())
        sys.stdout.write(loss_report.to_json() + "\n")
        if args.out:
            Path(args.out).with_suffix(".loss.json").write_text(loss_report.to_json() + "\n")
    return 0


def _cmd_probe(args) -> int:
    n_values = [int(v) for v in args.n_values.split(",") if v]
    rows = complexity_probe(
        n_values, tokens_per_image=args.tokens, dim=args.dim, heads=args.heads,
        n_levels=args.levels, reps=args.reps, seed=args.seed,
    )
    lines = ["N,time_ms,peak_scalars"] + [f"{r.n},{r.time_ms:.3f},{r.peak_scalars}" for r in rows]
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def main(argv=None) -> int:
    try:
        args = _build_parser().parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 1
    handlers = {
        "synth": _cmd_synth,
        "reconstruct": _cmd_reconstruct,
        "eval": _cmd_eval,
        "probe-align": _cmd_probe,
    }
    try:
        return handlers[args.command](args)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 1
    except (PipelineError, OSError, ValueError) as exc:
        sys.stderr.write(f"error: {exc}\n")
        return 2


if __name__ == "__main__":
    sys.exit(main())
