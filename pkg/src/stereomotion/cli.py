"""Command-line surface: train, eval-depth, eval-pose, gradcheck, synth, warp.

Every command is deterministic given its config and seed; CSV outputs are
byte-stable across runs on identical inputs.
"""

from __future__ import annotations

import argparse
import json
import os
import sys


def _apply_thread_env() -> None:
    threads = os.environ.get("STEREOMOTION_THREADS")
    if threads:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ.setdefault(var, threads)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stereomotion",
        description="Unsupervised stereo depth and ego-motion: train, evaluate, inspect.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="run the training loop from a JSON config")
    p_train.add_argument("--config", required=True, help="path to the run config JSON")
    p_train.add_argument("--seed", type=int, default=None, help="override the config seed")
    p_train.add_argument("--out", default=None, help="output directory override")

    p_evald = sub.add_parser("eval-depth", help="depth metrics table for a checkpoint")
    p_evald.add_argument("--checkpoint", required=True)
    p_evald.add_argument("--data", required=True, help="sequence directory with gt disparity")
    p_evald.add_argument("--cap", type=float, default=80, choices=(50, 80))
    p_evald.add_argument("--crop", default="none", choices=("none", "garg", "eigen"))
    p_evald.add_argument("--oracle", action="store_true",
                         help="feed ground truth as the prediction (pipeline check)")
    p_evald.add_argument("--out", default=None, help="write the CSV here instead of stdout")

    p_evalp = sub.add_parser("eval-pose", help="trajectory errors for a checkpoint")
    p_evalp.add_argument("--checkpoint", required=True)
    p_evalp.add_argument("--data", required=True, help="sequence directory with poses.txt")
    p_evalp.add_argument("--snippet-len", type=int, default=3, choices=(2, 3, 5))
    p_evalp.add_argument("--align-scale", action="store_true",
                         help="per-snippet scale fit before the error (for comparisons)")
    p_evalp.add_argument("--out", default=None, help="directory for ate.csv and trajectory.csv")

    p_grad = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p_grad.add_argument("--scope", default="all",
                        choices=("charbonnier", "ssim", "warp", "smoothness",
                                 "objective", "model", "all"))
    p_grad.add_argument("--inject-bug", action="store_true", help=argparse.SUPPRESS)

    p_synth = sub.add_parser("synth", help="render a synthetic stereo sequence to disk")
    group = p_synth.add_mutually_exclusive_group()
    group.add_argument("--spec", default=None, help="scene spec JSON file")
    group.add_argument("--frames", type=int, default=None, help="random scene with N frames")
    p_synth.add_argument("--seed", type=int, default=0)
    p_synth.add_argument("--width", type=int, default=48)
    p_synth.add_argument("--height", type=int, default=32)
    p_synth.add_argument("--out", required=True)

    p_warp = sub.add_parser("warp", help="run one reconstruction path on stored images")
    p_warp.add_argument("--mode", required=True, choices=("stereo", "temporal"))
    p_warp.add_argument("--image", required=True, help="source image PNG to sample from")
    p_warp.add_argument("--disparity", required=True, help="16-bit x256 disparity PNG")
    p_warp.add_argument("--direction", default="left", choices=("left", "right"),
                        help="stereo mode: which eye to rebuild")
    p_warp.add_argument("--calib", default=None, help="calibration JSON (temporal mode)")
    p_warp.add_argument("--pose", default=None,
                        help="temporal mode: tx,ty,tz,rho,theta,psi (target to source)")
    p_warp.add_argument("--out", required=True)
    return parser


def cmd_train(args) -> int:
    from . import config as config_mod
    from . import data as data_mod
    from . import model

    try:
        cfg = config_mod.load_config(args.config)
    except config_mod.ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: cannot read config: {exc}", file=sys.stderr)
        return 2
    if args.seed is not None:
        cfg.seed = args.seed
    out_dir = args.out or cfg.out or "run_out"

    if cfg.data.root is not None:
        snippets = list(data_mod.load_sequence(cfg.data.root, cfg.snippet_len))
    else:
        snippets = data_mod.synth_dataset(cfg.data.synth_count, seed=cfg.data.synth_seed,
                                          width=cfg.data.synth_width,
                                          height=cfg.data.synth_height,
                                          n_frames=cfg.snippet_len)
    if cfg.augment is not None:
        streams = model.seed_streams(cfg.seed)
        snippets = [data_mod.augment(s, cfg.augment, streams["augment"]) for s in snippets]

    result = model.train(cfg.train_settings(), snippets, out_dir=out_dir)
    if result.aborted:
        print(f"error: training aborted: {result.abort_reason}", file=sys.stderr)
        print(f"last good checkpoint kept at {result.checkpoint_path}", file=sys.stderr)
        return 1
    print(f"checkpoint: {result.checkpoint_path}")
    print(f"loss log:   {result.log_path}")
    print(f"final total: {result.totals[-1]:.6f}")
    return 0


def _load_networks(checkpoint_path, n_frames):
    from . import model

    tensors = model.load_checkpoint(checkpoint_path)

    def widths_from(prefix, names):
        return tuple(int(tensors[f"{prefix}{n}.b"].size) for n in names)

    disp_widths = widths_from("disp.", ("enc1", "enc2", "enc3", "enc4", "enc5"))
    pose_widths = widths_from("pose.", ("conv1", "conv2", "conv3", "conv4", "conv5", "conv6"))
    head_kernel = tensors["disp.head0.w"].shape[0]
    disp = model.DispNetSmall(widths=disp_widths, head_kernel=head_kernel)
    pose = model.PoseNetSmall(n_frames=n_frames, widths=pose_widths)
    for k in disp.params:
        disp.params[k] = tensors[f"disp.{k}"].copy()
    for k in pose.params:
        pose.params[k] = tensors[f"pose.{k}"].copy()
    return disp, pose


def cmd_eval_depth(args) -> int:
    import numpy as np

    from . import data as data_mod
    from . import evalkit, geometry, model

    snippets = list(data_mod.load_sequence(args.data, 2))
    if snippets and snippets[0].gt_disparity_left is None:
        print("error: no ground-truth disparity (disp_left/) in the dataset", file=sys.stderr)
        return 1
    disp_net, _ = _load_networks(args.checkpoint, 2)

    frames = [s.left[0] for s in snippets] + [snippets[-1].left[1]]
    gts = [s.gt_disparity_left[0] for s in snippets] + [snippets[-1].gt_disparity_left[1]]
    rig = snippets[0].rig

    rows = []
    for frame, gt_disp in zip(frames, gts):
        if args.oracle:
            pred_disp = gt_disp
        else:
            pred_disp = model.disparity_forward(frame, disp_net)[0][0]
        pred_depth = geometry.disparity_to_depth(pred_disp, rig)
        gt_depth = geometry.disparity_to_depth(gt_disp, rig)
        rows.append(evalkit.depth_metrics(pred_depth, gt_depth, cap=args.cap,
                                          crop=args.crop, pred_disp=pred_disp,
                                          gt_disp=gt_disp))

    mean = [float(np.mean([getattr(r, c) for r in rows])) for c in evalkit.DEPTH_CSV_COLUMNS]
    lines = [evalkit.DepthMetricsReport.csv_header(),
             ",".join(f"{v:.6f}" for v in mean)]
    text = "\n".join(lines) + "\n"
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_eval_pose(args) -> int:
    from . import data as data_mod
    from . import evalkit, model

    n = args.snippet_len
    snippets = list(data_mod.load_sequence(args.data, n))
    if not snippets or snippets[0].gt_poses is None:
        print("error: no poses.txt ground truth in the dataset", file=sys.stderr)
        return 1
    _, pose_net = _load_networks(args.checkpoint, n)

    target = model.target_frame_index(n)
    pred_rel, gt_rel = [], []
    for s in snippets:
        pred_rel.append(model.pose_forward(s.left, pose_net))
        gt_rel.append([s.gt_relative(target, f) for f in range(n) if f != target])
    report = evalkit.ate(pred_rel, gt_rel, target, n, align_scale=args.align_scale)

    seq = os.path.basename(os.path.normpath(args.data))
    ate_lines = ["seq,t_ate,r_ate", report.csv_row(seq)]
    trajectory = evalkit.integrate_sequence(pred_rel, target, n)
    traj_lines = ["frame,x,y,z,rho,theta,psi"]
    for i, pose in enumerate(trajectory):
        v = pose.to_vector6()
        traj_lines.append(f"{i}," + ",".join(f"{x:.6f}" for x in v))

    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "ate.csv"), "w") as fh:
            fh.write("\n".join(ate_lines) + "\n")
        with open(os.path.join(args.out, "trajectory.csv"), "w") as fh:
            fh.write("\n".join(traj_lines) + "\n")
    else:
        sys.stdout.write("\n".join(ate_lines) + "\n")
    print(f"snippets: {report.snippet_count}", file=sys.stderr)
    return 0


def cmd_gradcheck(args) -> int:
    from . import autodiff as ad
    from . import checks

    if args.inject_bug:
        # negative control: corrupt one derivative and expect a failure
        original = ad.sigmoid

        def broken_sigmoid(a):
            import numpy as np
            s = 1.0 / (1.0 + np.exp(-a.value))
            return ad.Var(a.tape, s, (a,), (lambda g: g * s,), op="sigmoid")

        ad.sigmoid = broken_sigmoid
        try:
            results = checks.run_scope("model")
        finally:
            ad.sigmoid = original
    else:
        results = checks.run_scope(args.scope)

    width = max(len(name) for name, _ in results)
    all_passed = True
    print(f"{'check'.ljust(width)}  status  max_rel    max_abs")
    for name, rep in results:
        status = "pass" if rep.passed else "FAIL"
        all_passed &= rep.passed
        print(f"{name.ljust(width)}  {status}    {rep.max_rel_error:.3e}  {rep.max_abs_error:.3e}")
    return 0 if all_passed else 1


def cmd_synth(args) -> int:
    import numpy as np

    from . import data as data_mod
    from . import grid as grid_mod

    if args.spec:
        with open(args.spec) as fh:
            spec = data_mod.SynthSpec.from_json(json.load(fh))
    else:
        frames = args.frames or 10
        rng = np.random.default_rng(args.seed)
        spec = data_mod.random_scene_spec(rng, width=args.width, height=args.height,
                                          n_frames=frames)
    snippet = data_mod.synth_generate(spec)

    out = args.out
    for sub in ("left", "right", "disp_left", "disp_right"):
        os.makedirs(os.path.join(out, sub), exist_ok=True)
    for i in range(snippet.n_frames):
        grid_mod.write_png(snippet.left[i], os.path.join(out, "left", f"{i:06d}.png"))
        grid_mod.write_png(snippet.right[i], os.path.join(out, "right", f"{i:06d}.png"))
        grid_mod.write_disparity_png(snippet.gt_disparity_left[i],
                                     os.path.join(out, "disp_left", f"{i:06d}.png"))
        grid_mod.write_disparity_png(snippet.gt_disparity_right[i],
                                     os.path.join(out, "disp_right", f"{i:06d}.png"))
    snippet.rig.save(os.path.join(out, "calib.json"))
    data_mod.write_kitti_poses(os.path.join(out, "poses.txt"), snippet.gt_poses)
    with open(os.path.join(out, "scene.json"), "w") as fh:
        json.dump(spec.to_json(), fh, indent=2)
        fh.write("\n")
    print(f"wrote {snippet.n_frames} stereo frames to {out}")
    return 0


def cmd_warp(args) -> int:
    import numpy as np

    from . import geometry, grid as grid_mod, warp as warp_mod

    image = grid_mod.read_png(args.image)
    disparity, _ = grid_mod.read_disparity_png(args.disparity)
    if args.mode == "stereo":
        recon, valid = warp_mod.reconstruct_stereo_grid(image, disparity, args.direction)
    else:
        if not args.calib or not args.pose:
            print("error: temporal mode needs --calib and --pose", file=sys.stderr)
            return 2
        rig = geometry.CameraRig.load(args.calib)
        try:
            pose6 = np.array([float(x) for x in args.pose.split(",")])
            pose = geometry.euler_to_transform(pose6)
        except ValueError as exc:
            print(f"error: bad --pose: {exc}", file=sys.stderr)
            return 2
        depth = geometry.disparity_to_depth(disparity, rig)
        recon, valid = warp_mod.reconstruct_temporal_grid(image, depth, pose, rig)

    os.makedirs(args.out, exist_ok=True)
    grid_mod.write_png(recon, os.path.join(args.out, "reconstruction.png"))
    grid_mod.write_png(grid_mod.ImageGrid(valid.astype(float)),
                       os.path.join(args.out, "mask.png"))
    print(f"wrote reconstruction and mask to {args.out}")
    return 0


COMMANDS = {
    "train": cmd_train,
    "eval-depth": cmd_eval_depth,
    "eval-pose": cmd_eval_pose,
    "gradcheck": cmd_gradcheck,
    "synth": cmd_synth,
    "warp": cmd_warp,
}


def main(argv=None) -> int:
    _apply_thread_env()
    args = build_parser().parse_args(argv)
    return COMMANDS[args.command](args)


if __name__ == "__main__":
    sys.exit(main())
