"""Gradient-check suites for every differentiable operation.

Each suite wraps an operation into a scalar function of one flat vector and
compares the tape gradient against central finite differences. Scenes and
probe points are chosen so sampling coordinates stay away from bilinear
kinks and image bounds by margins far wider than the probe step.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import data, geometry, model, objective, warp

STEP = 1e-5
TOL_REL = 1e-4


def _weighted_sum(x: ad.Var, weights: np.ndarray) -> ad.Var:
    return ad.sum_all(x * weights)


def _pipeline_check(f, point: np.ndarray) -> ad.GradCheckReport:
    """Gradient check with the absolute tolerance tied to the gradient scale.

    Deep pipelines have partials spanning many orders of magnitude; the
    smallest are dominated by float64 cancellation noise in the central
    difference, so a coordinate counts as matching when it agrees either to
    TOL_REL relatively or to TOL_REL of the largest analytic partial.
    """
    report = ad.gradient_check(f, point, STEP, TOL_REL, tol_abs=0.0)
    if not report.passed and report.analytic is not None:
        scale = float(np.abs(report.analytic).max())
        if report.max_abs_error < TOL_REL * scale:
            report.passed = True
    return report


def check_charbonnier(charb=objective.CharbonnierParams()) -> list:
    rng = np.random.default_rng(11)
    point = rng.normal(size=12)
    report = ad.gradient_check(
        lambda v: ad.sum_all(objective.charbonnier(v, charb)), point, STEP, TOL_REL)
    return [("charbonnier", report)]

def check_ssim() -> list:
    rng = np.random.default_rng(12)
    h, w, c = 6, 8, 2
    a = rng.uniform(0.2, 0.8, size=(h, w, c))
    b_point = rng.uniform(0.2, 0.8, size=h * w * c)
    weights = rng.normal(size=(h, w, c))

    def f(v):
        img = ad.reshape(v, (h, w, c))
        return _weighted_sum(objective.ssim_map(v.tape.const(a), img), weights)

    return [("ssim_map", ad.gradient_check(f, b_point, STEP, TOL_REL))]


def check_warp() -> list:
    rng = np.random.default_rng(13)
    out = []

    # bilinear sampling: gradient in the coordinates
    h, w = 7, 9
    source = rng.uniform(size=(h, w, 2))
    coords = np.concatenate([
        rng.uniform(1.2, w - 2.2, size=12),
        rng.uniform(1.2, h - 2.2, size=12)])
    coords += np.where(np.abs(coords - np.round(coords)) < 1e-3, 0.21, 0.0)
    weights = rng.normal(size=(3, 4, 2))

    def f_coords(v):
        us = ad.reshape(ad.gather(v, np.arange(12)), (3, 4))
        vs = ad.reshape(ad.gather(v, np.arange(12, 24)), (3, 4))
        field = warp.SampleField(us=us, vs=vs, valid=np.ones((3, 4), dtype=bool))
        return _weighted_sum(warp.bilinear_sample(v.tape.const(source), field), weights)

    out.append(("bilinear_sample/coords", ad.gradient_check(f_coords, coords, STEP, TOL_REL)))

    # bilinear sampling: gradient in the source values
    fixed_us = rng.uniform(1.2, w - 2.2, size=(3, 4))
    fixed_vs = rng.uniform(1.2, h - 2.2, size=(3, 4))

    def f_source(v):
        src = ad.reshape(v, (h, w, 2))
        field = warp.SampleField(us=fixed_us, vs=fixed_vs, valid=np.ones((3, 4), dtype=bool))
        return _weighted_sum(warp.bilinear_sample(src, field), weights)

    out.append(("bilinear_sample/source",
                ad.gradient_check(f_source, source.ravel(), STEP, TOL_REL)))

    # stereo reconstruction: gradient in the disparity map
    h, w = 8, 12
    opposite = rng.uniform(size=(h, w, 3))
    disparity = 2.3 + 0.1 * rng.standard_normal((h, w))
    rweights = rng.normal(size=(h, w, 3))

    def f_stereo(v):
        d = ad.reshape(v, (h, w))
        recon, _ = warp.reconstruct_stereo(v.tape.const(opposite), d, "left")
        return _weighted_sum(recon, rweights)

    out.append(("reconstruct_stereo/disparity",
                ad.gradient_check(f_stereo, disparity.ravel(), STEP, TOL_REL)))

    # temporal reconstruction: gradients in pose and depth
    rig = data.default_rig(w, h, f=20.0, baseline=0.4)
    source_img = rng.uniform(size=(h, w, 3))
    depth = rig.f * rig.baseline / disparity
    pose6 = np.array([0.02, -0.01, 0.06, 0.004, -0.003, 0.002])

    def f_pose(v):
        pose = geometry.euler_to_transform_vars(v)
        recon, _ = warp.reconstruct_temporal(v.tape.const(source_img),
                                             v.tape.const(depth), pose, rig)
        return _weighted_sum(recon, rweights)

    out.append(("reconstruct_temporal/pose",
                ad.gradient_check(f_pose, pose6, STEP, TOL_REL)))

    pose = geometry.euler_to_transform(pose6)

    def f_depth(v):
        d = ad.reshape(v, (h, w))
        recon, _ = warp.reconstruct_temporal(v.tape.const(source_img), d, pose, rig)
        return _weighted_sum(recon, rweights)

    out.append(("reconstruct_temporal/depth",
                ad.gradient_check(f_depth, depth.ravel(), STEP, TOL_REL)))
    return out


def check_smoothness(charb=objective.CharbonnierParams()) -> list:
    rng = np.random.default_rng(14)
    h, w = 8, 12
    image = rng.uniform(size=(h, w, 3))
    disparity = 3.0 + 0.5 * rng.standard_normal((h, w))

    def f(v):
        return objective.smoothness_loss(ad.reshape(v, (h, w)), image, charb)

    return [("smoothness_loss", ad.gradient_check(f, disparity.ravel(), STEP, TOL_REL))]


def _objective_scene(n_frames: int = 3, width: int = 12, height: int = 8) -> tuple:
    """A small rendered scene plus well-conditioned probe disparities."""
    rig = data.default_rig(width, height, f=18.0, baseline=0.5)
    spec = data.SynthSpec(
        width=width, height=height, rig=rig,
        planes=(data.PlaneSpec(depth=rig.f * rig.baseline / 2.4, texture_seed=5),),
        motion=tuple((0.07, 0.1, 0.05, 0.011, -0.009, 0.004)
                     for _ in range(n_frames - 1)),
        texture=data.TextureParams(spacing=5.0, cue=False))
    snippet = data.synth_generate(spec)
    batch = model.snippet_batch(snippet)
    return snippet, batch


def _kink_margin(coords: np.ndarray) -> float:
    """Distance of sampling coordinates to the nearest bilinear kink."""
    return float(np.abs(coords - np.round(coords)).min())


def _probe_margin(batch, disp_lr, disp_rl, poses, sources) -> float:
    """Smallest distance of any sampling coordinate (stereo and temporal,
    all scales) to an integer; finite differences stay one-sided as long as
    this clears the probe step by a wide factor."""
    margin = np.inf
    target = batch.target_index
    for k in range(4):
        rig_k = batch.rig.at_scale(k)
        h, w = batch.left_pyrs[target][k].shape[:2]
        ug = np.arange(w, dtype=np.float64)[None, :]
        margin = min(margin, _kink_margin(ug - disp_lr[k]))
        margin = min(margin, _kink_margin(ug + disp_rl[k]))
        depth = rig_k.f * rig_k.baseline / disp_lr[k]
        for pose in poses:
            us, vs, _ = geometry.reproject_grid(depth, pose, rig_k)
            margin = min(margin, _kink_margin(us), _kink_margin(vs))
    return margin


def check_objective(weights=objective.LossWeights(),
                    charb=objective.CharbonnierParams()) -> list:
    snippet, batch = _objective_scene()
    n = snippet.n_frames
    target = batch.target_index
    sources = [f for f in range(n) if f != target]
    pose_gt = [snippet.gt_relative(target, s).to_vector6() for s in sources]
    pose_objs = [snippet.gt_relative(target, s) for s in sources]

    sizes = [batch.left_pyrs[target][k].shape[:2] for k in range(4)]
    disp0 = None
    for seed in range(15, 200):
        rng = np.random.default_rng(seed)
        cand = [2.4 / (2 ** k) * (1.0 + 0.05 * rng.standard_normal(sizes[k]))
                for k in range(4)]
        if _probe_margin(batch, cand, cand, pose_objs, sources) > 2e-3:
            disp0 = cand
            break
    assert disp0 is not None, "no well-conditioned probe point found"
    point = np.concatenate([d.ravel() for d in disp0] * 2
                           + [v for v in pose_gt])

    def f(v):
        offset = 0
        disp_lr, disp_rl = [], []
        for group in (disp_lr, disp_rl):
            for h, w in sizes:
                group.append(ad.reshape(ad.gather(v, np.arange(offset, offset + h * w)),
                                        (h, w)))
                offset += h * w
        poses = []
        for _ in sources:
            poses.append(geometry.euler_to_transform_vars(
                ad.gather(v, np.arange(offset, offset + 6))))
            offset += 6
        _, total = objective.total_objective(batch, disp_lr, disp_rl, poses,
                                             weights, charb)
        return total

    return [("total_objective", _pipeline_check(f, point))]


def _model_probe_ok(disp_net, pose_net, batch) -> bool:
    """True when the network's own outputs keep every sampling coordinate
    and every relu preactivation clear of its kink by a wide margin."""
    tape = ad.Tape()
    target = batch.target_index
    pairs = disp_net.forward(tape, batch.left_pyrs[target][0])
    poses_v, raw = pose_net.forward(
        tape, [batch.left_pyrs[fi][0] for fi in range(batch.n_frames)])
    vec = raw.value
    if np.abs(vec[:3]).max() > 0.6:
        return False
    poses = [geometry.euler_to_transform(vec[6 * j: 6 * j + 6])
             for j in range(len(poses_v))]
    disp_lr = [p[0].value for p in pairs]
    disp_rl = [p[1].value for p in pairs]
    sources = [f for f in range(batch.n_frames) if f != target]
    if _probe_margin(batch, disp_lr, disp_rl, poses, sources) < 1.5e-3:
        return False
    preact_margin = min(
        (float(np.abs(node.parents[0].value).min())
         for node in tape.nodes if node.op == "relu"), default=1.0)
    return preact_margin > 1e-3


def check_model(weights=objective.LossWeights(),
                charb=objective.CharbonnierParams()) -> list:
    snippet, batch = _objective_scene(n_frames=2, width=32, height=16)
    disp_net = pose_net = None
    for seed in (129, 197, 181, 106):  # ranked by kink/preactivation margin
        d_net, p_net = model.micro_networks(n_frames=2, seed=seed)
        if _model_probe_ok(d_net, p_net, batch):
            disp_net, pose_net = d_net, p_net
            break
    assert disp_net is not None, "no well-conditioned micro network found"
    n_params = disp_net.parameter_count() + pose_net.parameter_count()
    if n_params > 500:
        raise AssertionError(f"micro network too large for the check: {n_params} params")

    names_disp = sorted(disp_net.params)
    names_pose = sorted(pose_net.params)
    shapes = [(f"d.{k}", disp_net.params[k].shape) for k in names_disp]
    shapes += [(f"p.{k}", pose_net.params[k].shape) for k in names_pose]
    point = np.concatenate([disp_net.params[k].ravel() for k in names_disp]
                           + [pose_net.params[k].ravel() for k in names_pose])

    def f(v):
        tape = v.tape
        offset = 0
        leaves = {}
        for name, shape in shapes:
            size = int(np.prod(shape))
            leaves[name] = ad.reshape(ad.gather(v, np.arange(offset, offset + size)), shape)
            offset += size
        disp_leaves = {k[2:]: leaf for k, leaf in leaves.items() if k.startswith("d.")}
        pose_leaves = {k[2:]: leaf for k, leaf in leaves.items() if k.startswith("p.")}
        target = batch.target_index
        pairs = disp_net.forward(tape, batch.left_pyrs[target][0], disp_leaves)
        poses, _ = pose_net.forward(
            tape, [batch.left_pyrs[fi][0] for fi in range(batch.n_frames)], pose_leaves)
        _, total = objective.total_objective(batch, [p[0] for p in pairs],
                                             [p[1] for p in pairs], poses,
                                             weights, charb)
        return total

    return [(f"micro_network/{n_params}_params", _pipeline_check(f, point))]


SCOPES = {
    "charbonnier": check_charbonnier,
    "ssim": check_ssim,
    "warp": check_warp,
    "smoothness": check_smoothness,
    "objective": check_objective,
    "model": check_model,
}


def run_scope(scope: str) -> list:
    if scope == "all":
        results = []
        for fn in SCOPES.values():
            results.extend(fn())
        return results
    if scope not in SCOPES:
        raise ValueError(f"unknown gradcheck scope {scope!r}; "
                         f"choose from {sorted(SCOPES)} or 'all'")
    return SCOPES[scope]()
