"""Command line: ``egoflow estimate | evaluate | synth | project``."""
import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import pipeline
from .dataio import (DEPTH_FACTOR, MAX_DIFF, flow_to_color, load_depth, load_image, load_intrinsics,
                     load_trajectory, read_flo, read_keyvalue, save_image)
from .egomotion import RobustConfig, irls_fit
from .errors import ConfigError, DatasetError, EgoflowError, ParseError
from .evaluation import ate_snippets, relative_errors, summarize
from .flowwarp import compute_losses, to_gray, warp_image
from .geometry import camera_motion, synthesize_motion_field
from .layers import LayerConfig, SymmetryPolicy, fit_two_layers, resolve_static_layer
from .opticalflow import FlowConfig, compute_flow
from .synth import SequenceConfig, make_sequence, write_sequence

log = logging.getLogger("egoflow")

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_DATA = 2
EXIT_DEGENERATE = 3


def _add_common(p):
    p.add_argument("--intrinsics", default=None,
                   help="preset (freiburg1/2/3, default) or key=value file (default: dataset/intrinsics.txt "
                        "if present, else 'default')")
    p.add_argument("--flow", dest="flow_source", default="computed",
                   help="'computed' or a directory of <timestamp>.flo files (default: computed)")
    p.add_argument("--layers", dest="layer_mode", choices=("single", "two-layer"), default="single")
    p.add_argument("--policy", dest="symmetry_policy", choices=("larger-support", "smaller-motion"),
                   default="larger-support", help="which layer counts as static (default: larger-support)")
    p.add_argument("--length-scale", type=float, default=1.0,
                   help="weight of rotation vs translation for --policy smaller-motion (default: 1)")
    p.add_argument("--kernel", choices=("huber", "tukey"), default="huber")
    p.add_argument("--max-iterations", type=int, default=20, help="IRLS iterations (default: 20)")
    p.add_argument("--stride", type=int, default=1, help="pixel subsampling for the fit (default: 1)")
    p.add_argument("--lambdas", type=float, nargs=3, default=(1.0, 0.1, 0.1), metavar=("OF", "MF", "OP"),
                   help="loss weights (default: 1 0.1 0.1)")
    p.add_argument("--config", help="key=value file; its settings override command-line flags")


def _build_run_config(args):
    cfg = pipeline.RunConfig(
        dataset=args.dataset, intrinsics=args.intrinsics, flow_source=args.flow_source,
        layer_mode=args.layer_mode, symmetry_policy=args.symmetry_policy, length_scale=args.length_scale,
        output=args.output, stride=args.stride, lambdas=tuple(args.lambdas), workers=args.workers,
        max_diff=args.max_diff, first=args.first, limit=args.limit, write_masks=not args.no_masks,
        robust=RobustConfig(kernel=args.kernel, max_iterations=args.max_iterations),
    )
    if args.config:
        pipeline.apply_overrides(cfg, read_keyvalue(args.config))
    return cfg


def cmd_estimate(args):
    cfg = _build_run_config(args)
    result = pipeline.run_estimate(cfg)
    print(pipeline.format_table(result.summary))
    print(f"failed pairs: {result.failed} of {len(result.records)}; trajectory: {Path(cfg.output) / 'trajectory.txt'}")
    if result.failure_ratio > 0.5:
        print(f"error: {result.failed} of {len(result.records)} pairs had degenerate geometry", file=sys.stderr)
        return EXIT_DEGENERATE
    return EXIT_OK


def cmd_evaluate(args):
    pred = load_trajectory(args.pred)
    gt = load_trajectory(args.gt)
    per_frame = relative_errors(pred, gt, args.max_diff)
    if not per_frame:
        print("error: no associated timestamps between prediction and ground truth", file=sys.stderr)
        return EXIT_DATA
    rpe = summarize(per_frame)
    report = {"rpe_per_frame": rpe.as_dict(), "pairs": [e.__dict__ for e in per_frame]}
    print(pipeline.format_table(rpe, "relative pose error (consecutive frames)"))
    per_second = relative_errors(pred, gt, args.max_diff, delta=_frames_per_second(pred))
    if per_second:
        rps = summarize(per_second)
        report["rpe_per_second"] = rps.as_dict()
        print(pipeline.format_table(rps, "relative pose error (1 s apart)"))
    try:
        ate = ate_snippets(pred, gt, args.snippet, args.max_diff)
        report["ate_snippets"] = ate.as_dict()
        print(f"ATE over {args.snippet}-frame snippets: {ate.translation.mean:.6f} +- {ate.translation.std:.6f} m "
              f"({ate.count} windows)")
    except EgoflowError as e:
        print(f"ATE not computed: {e}")
    if args.out:
        pipeline.dump_json(args.out, report)
    return EXIT_OK


def _frames_per_second(traj):
    if len(traj) < 2:
        return 1
    dt = float(np.median(np.diff(traj.timestamps)))
    return max(1, int(round(1.0 / dt)))


def cmd_synth(args):
    cfg = SequenceConfig(n_frames=args.frames, width=args.width, height=args.height,
                         two_body=args.two_body, hole_fraction=args.holes)
    seq = make_sequence(cfg, args.seed)
    try:
        write_sequence(seq, args.out)
    except OSError as e:
        print(f"error: cannot write sequence to {args.out}: {e}", file=sys.stderr)
        return EXIT_DATA
    print(f"wrote {cfg.n_frames} frames ({cfg.width}x{cfg.height}, seed {args.seed}) to {args.out}")
    return EXIT_OK


def cmd_project(args):
    K = load_intrinsics(args.intrinsics)
    i_t, _ = load_image(args.rgb1)
    i_next, _ = load_image(args.rgb2)
    rho = load_depth(args.depth, args.depth_factor)
    flow = read_flo(args.flow) if args.flow else compute_flow(i_t, i_next, FlowConfig())
    field = flow.to_motion_field(K)
    robust = RobustConfig(kernel=args.kernel)
    if args.layer_mode == "two-layer":
        lf = resolve_static_layer(fit_two_layers(rho, field, K, LayerConfig(robust=robust)),
                                  SymmetryPolicy(args.symmetry_policy))
        fit, model = lf.static_fit, lf.composite_field
    else:
        lf = None
        fit, _ = irls_fit(rho, field, K, robust)
        model = synthesize_motion_field(rho, fit.T, K)
    losses = compute_losses(i_t, i_next, flow, model, rho.valid, K, tuple(args.lambdas))
    T = fit.T.vector
    print("scene twist per interval (tau, omega): " + " ".join(f"{v:.9g}" for v in T))
    print("camera twist per interval (tau, omega): " + " ".join(f"{v:.9g}" for v in camera_motion(fit.T).vector))
    print(f"residual rms {fit.residual_rms:.6g}  support {fit.support}  condition {fit.condition_estimate:.4g}  "
          f"iterations {fit.iterations}  converged {fit.converged}")
    print(f"L_OF {losses.l_of:.6g}  L_MF {losses.l_mf:.6g}  L_OP {losses.l_op:.6g}  L_Final {losses.l_final:.6g}")
    if lf is not None:
        print(f"layers: static {lf.mask.n_static} px, dynamic {lf.mask.n_dynamic} px, "
              f"single_layer={lf.single_layer}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        save_image(out / "flow.png", flow_to_color(flow) / 255.0)
        save_image(out / "motion_field.png", flow_to_color(model.to_pixel_flow(K)) / 255.0)
        g_t, g_next = to_gray(i_t), to_gray(i_next)
        save_image(out / "diff_before.png", np.abs(g_t - g_next))
        for name, f in (("diff_flow.png", flow), ("diff_motion_field.png", model.to_pixel_flow(K))):
            warped, valid = warp_image(g_next, f)
            save_image(out / name, np.where(valid, np.abs(g_t - warped), 0.0))
        if lf is not None:
            lf.mask.save(out / "mask.png")
        pipeline.dump_json(out / "report.json", {
            "fit": fit.diagnostics(), "losses": losses.as_dict(), "intrinsics": K.as_dict(),
            "layers": None if lf is None else lf.diagnostics(),
            "inputs": {"rgb1": args.rgb1, "rgb2": args.rgb2, "depth": args.depth, "flow": args.flow or "computed"},
        })
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="egoflow", description="Continuous ego-motion from RGB-D frame pairs.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    e = sub.add_parser("estimate", help="estimate a trajectory for a TUM-format sequence")
    e.add_argument("dataset", help=f"sequence directory (relative paths also tried under ${pipeline.ENV_DATASET_ROOT})")
    e.add_argument("-o", "--output", default="out", help="output directory (default: out)")
    e.add_argument("--workers", type=int, default=1, help="frame pairs processed in parallel (default: 1)")
    e.add_argument("--max-diff", type=float, default=MAX_DIFF, help="timestamp association tolerance in s")
    e.add_argument("--first", type=int, default=0, help="index of the first associated frame")
    e.add_argument("--limit", type=int, default=None, help="number of frame pairs to process")
    e.add_argument("--no-masks", action="store_true", help="do not write layer masks")
    _add_common(e)
    e.set_defaults(func=cmd_estimate)

    v = sub.add_parser("evaluate", help="relative pose error and snippet ATE of a trajectory")
    v.add_argument("pred")
    v.add_argument("gt")
    v.add_argument("--max-diff", type=float, default=MAX_DIFF)
    v.add_argument("--snippet", type=int, default=5, help="ATE window length in frames (default: 5)")
    v.add_argument("--out", help="write the structured report (JSON) here")
    v.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("synth", help="write a synthetic TUM-format sequence with exact ground truth")
    s.add_argument("out")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--frames", type=int, default=30)
    s.add_argument("--width", type=int, default=160)
    s.add_argument("--height", type=int, default=120)
    s.add_argument("--two-body", action="store_true", help="add an independently moving panel")
    s.add_argument("--holes", type=float, default=0.0, help="fraction of pixels with missing depth")
    s.set_defaults(func=cmd_synth)

    j = sub.add_parser("project", help="fit and project the flow of a single frame pair")
    j.add_argument("rgb1")
    j.add_argument("rgb2")
    j.add_argument("depth", help="16-bit depth image of the first frame")
    j.add_argument("--intrinsics", default="default")
    j.add_argument("--flow", help=".flo file to use instead of computing flow")
    j.add_argument("--depth-factor", type=float, default=DEPTH_FACTOR)
    j.add_argument("--layers", dest="layer_mode", choices=("single", "two-layer"), default="single")
    j.add_argument("--policy", dest="symmetry_policy", choices=("larger-support", "smaller-motion"),
                   default="larger-support")
    j.add_argument("--kernel", choices=("huber", "tukey"), default="huber")
    j.add_argument("--lambdas", type=float, nargs=3, default=(1.0, 0.1, 0.1), metavar=("OF", "MF", "OP"))
    j.add_argument("--out", help="directory for flow / warp-difference images and report.json")
    j.set_defaults(func=cmd_project)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (DatasetError, ParseError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (ConfigError, EgoflowError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
