"""Desk-scale disparity and pose networks plus the Adam training loop.

The disparity network is a 5-level convolutional encoder-decoder with skip
connections and 4 prediction heads (one per output scale); the pose network
is a small convolutional encoder with separate translation and rotation
heads. Both are sized for CPU experiments; capacity is a config knob.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import geometry, objective
from .grid import ImageGrid, PYRAMID_LEVELS, mean_pool2

CHECKPOINT_MAGIC = b"UDMN1"
DISPARITY_FLOOR_FRACTION = 1e-4
DISPARITY_MAX_FRACTION = 0.3
ROTATION_SCALE = 0.01
SUPPORTED_SNIPPET_LENGTHS = (2, 3, 5)
# small positive hidden-unit bias keeps narrow relu layers from dying at init
HIDDEN_BIAS_INIT = 0.05


def target_frame_index(n: int) -> int:
    """Middle frame for 3- and 5-frame snippets, first frame for pairs."""
    if n not in SUPPORTED_SNIPPET_LENGTHS:
        raise ValueError(f"snippet length must be one of {SUPPORTED_SNIPPET_LENGTHS}, got {n}")
    return 0 if n == 2 else n // 2


def seed_streams(seed: int) -> dict:
    """Named deterministic RNG streams derived from one seed."""
    children = np.random.SeedSequence(seed).spawn(3)
    names = ("data", "init", "augment")
    return {name: np.random.default_rng(child) for name, child in zip(names, children)}


def _he_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape)


def _conv(tape, x, w, b, stride=1, pad=None):
    kh = w.value.shape[0]
    if pad is None:
        pad = kh // 2
    if pad:
        x = ad.pad_zero(x, ((pad, pad), (pad, pad)))
    return ad.conv2d(x, w, stride) + b


def _channel(x: ad.Var, c: int) -> ad.Var:
    """Extract channel c of an (H, W, C) Var as (H, W)."""
    h, w, nc = x.value.shape
    idx = (np.arange(h)[:, None] * w + np.arange(w)[None, :]) * nc + c
    return ad.gather(x, idx)


def lift_params(tape: ad.Tape, params: dict) -> dict:
    return {name: tape.var(arr, name=name) for name, arr in sorted(params.items())}


class DispNetSmall:
    """Encoder-decoder disparity predictor with sigmoid-bounded outputs.

    Every head emits two channels (left-to-right and right-to-left
    disparity) at its scale; the activation pins predictions inside
    [1e-4 * W_s, 0.3 * W_s + 1e-4 * W_s] regardless of the parameters.
    """

    def __init__(self, widths=(16, 32, 64, 128, 256), head_kernel: int = 3,
                 rng: np.random.Generator | None = None):
        if len(widths) != 5:
            raise ValueError("DispNetSmall uses exactly 5 encoder widths")
        rng = rng or np.random.default_rng(0)
        self.widths = tuple(widths)
        self.head_kernel = head_kernel
        w = self.widths
        self.params: dict = {}

        def conv_param(name, kh, cin, cout, bias=HIDDEN_BIAS_INIT):
            self.params[f"{name}.w"] = _he_uniform(rng, (kh, kh, cin, cout), kh * kh * cin)
            self.params[f"{name}.b"] = np.full(cout, bias)

        enc_in = (3, w[0], w[1], w[2], w[3])
        for i in range(5):
            conv_param(f"enc{i + 1}", 3, enc_in[i], w[i])
        conv_param("dec5", 3, w[4], w[3])
        # decoder levels, deepest first: output channels per upsampling stage
        self.dec_out = (w[2], w[1], w[0], w[0])
        dec_in = (w[3] + w[3], w[2] + w[2], w[1] + w[1], w[0] + w[0])
        for i in range(4):
            conv_param(f"up{3 - i}", 3, dec_in[i], self.dec_out[i])
        for k in range(4):
            conv_param(f"head{k}", head_kernel, self.dec_out[3 - k], 2, bias=0.0)

    def forward(self, tape: ad.Tape, image: np.ndarray, leaves: dict | None = None) -> list:
        """Run the network; returns [(d_lr, d_rl)] for scales 0..3.

        Disparities are (H_k, W_k) Vars in pixels at their own scale.
        """
        h, w_img = image.shape[:2]
        if h % 16 or w_img % 16:
            raise ValueError(f"input dims must be divisible by 16, got {h}x{w_img}")
        if image.min() < -1e-9 or image.max() > 1.0 + 1e-9:
            raise ValueError("input image values must lie in [0, 1]")
        p = leaves if leaves is not None else lift_params(tape, self.params)
        x = tape.const(image)

        skips = []
        for i, stride in enumerate((1, 2, 2, 2, 2)):
            x = ad.relu(_conv(tape, x, p[f"enc{i + 1}.w"], p[f"enc{i + 1}.b"], stride))
            skips.append(x)
        x = ad.relu(_conv(tape, x, p["dec5.w"], p["dec5.b"]))

        outputs: list = [None] * 4
        for i in range(4):
            x = ad.upsample2(x)
            x = ad.concat([x, skips[3 - i]], axis=2)
            x = ad.relu(_conv(tape, x, p[f"up{3 - i}.w"], p[f"up{3 - i}.b"]))
            k = 3 - i
            logits = _conv(tape, x, p[f"head{k}.w"], p[f"head{k}.b"])
            w_k = w_img // (2 ** k)
            d_max = DISPARITY_MAX_FRACTION * w_k
            floor = DISPARITY_FLOOR_FRACTION * w_k
            disp = d_max * ad.sigmoid(logits) + floor
            outputs[k] = (_channel(disp, 0), _channel(disp, 1))
        return outputs

    def parameter_count(self) -> int:
        return sum(arr.size for arr in self.params.values())


def disparity_forward(left: ImageGrid, net: DispNetSmall) -> list:
    """Concrete forward pass: [(d_lr, d_rl)] as single-channel ImageGrids."""
    tape = ad.Tape()
    outs = net.forward(tape, left.data)
    return [(ImageGrid(a.value), ImageGrid(b.value)) for a, b in outs]


class PoseNetSmall:
    """Convolutional encoder over concatenated frames with two linear heads.

    Outputs 6 x (n-1) values: one translation and one scaled rotation
    triplet per non-target frame, interpreted as target-to-source motions.
    """

    def __init__(self, n_frames: int = 3, widths=(16, 32, 64, 128, 256, 256),
                 rng: np.random.Generator | None = None):
        if n_frames not in SUPPORTED_SNIPPET_LENGTHS:
            raise ValueError(
                f"snippet length must be one of {SUPPORTED_SNIPPET_LENGTHS}, got {n_frames}")
        if len(widths) != 6:
            raise ValueError("PoseNetSmall uses exactly 6 encoder widths")
        rng = rng or np.random.default_rng(0)
        self.n_frames = n_frames
        self.widths = tuple(widths)
        self.params: dict = {}
        cin = 3 * n_frames
        for i, cout in enumerate(widths):
            self.params[f"conv{i + 1}.w"] = _he_uniform(rng, (3, 3, cin, cout), 9 * cin)
            self.params[f"conv{i + 1}.b"] = np.full(cout, HIDDEN_BIAS_INIT)
            cin = cout
        out_dim = 3 * (n_frames - 1)
        for head in ("trans", "rot"):
            self.params[f"{head}.w"] = _he_uniform(rng, (cin, out_dim), cin)
            self.params[f"{head}.b"] = np.zeros(out_dim)

    def forward(self, tape: ad.Tape, frames: list, leaves: dict | None = None) -> tuple:
        """Returns (poses, raw): (n-1) PoseVars plus the raw 6(n-1) vector."""
        if len(frames) != self.n_frames:
            raise ValueError(f"expected {self.n_frames} frames, got {len(frames)}")
        shape = frames[0].shape
        for f in frames:
            if f.shape != shape:
                raise ValueError("snippet frames must share dimensions")
        p = leaves if leaves is not None else lift_params(tape, self.params)
        x = tape.const(np.concatenate(frames, axis=2))
        for i, stride in enumerate((1, 2, 2, 2, 2, 1)):
            x = ad.relu(_conv(tape, x, p[f"conv{i + 1}.w"], p[f"conv{i + 1}.b"], stride))
        feat = ad.spatial_mean(x)
        trans = ad.matvec(feat, p["trans.w"]) + p["trans.b"]
        rot = (ad.matvec(feat, p["rot.w"]) + p["rot.b"]) * ROTATION_SCALE

        poses = []
        raw_parts = []
        for j in range(self.n_frames - 1):
            sel = np.arange(3 * j, 3 * j + 3)
            t = ad.gather(trans, sel)
            r = ad.gather(rot, sel)
            six = ad.concat([t, r], axis=0)
            raw_parts.append(six)
            poses.append(geometry.euler_to_transform_vars(six))
        return poses, ad.concat(raw_parts, axis=0)

    def parameter_count(self) -> int:
        return sum(arr.size for arr in self.params.values())


def pose_forward(snippet_frames: list, net: PoseNetSmall) -> list:
    """Concrete forward pass: list of (n-1) PoseSE3 target-to-source motions."""
    tape = ad.Tape()
    _, raw = net.forward(tape, [f.data if isinstance(f, ImageGrid) else f
                                for f in snippet_frames])
    vec = raw.value
    return [geometry.euler_to_transform(vec[6 * j: 6 * j + 6])
            for j in range(net.n_frames - 1)]


def micro_networks(n_frames: int = 2, seed: int = 7) -> tuple:
    """Smallest useful network pair (< 500 parameters combined) for
    finite-difference checks of the full pipeline."""
    disp = DispNetSmall(widths=(1, 1, 1, 2, 2), head_kernel=1,
                        rng=np.random.default_rng(seed))
    pose = PoseNetSmall(n_frames=n_frames, widths=(1, 1, 1, 1, 1, 1),
                        rng=np.random.default_rng(seed + 1))
    return disp, pose


@dataclass
class AdamState:
    """First/second moment accumulators plus the step counter."""

    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: dict, **kwargs) -> "AdamState":
        return cls(m={k: np.zeros_like(p) for k, p in params.items()},
                   v={k: np.zeros_like(p) for k, p in params.items()},
                   **kwargs)


@dataclass(frozen=True)
class LrSchedule:
    """Base rate halved after 3/5 of the run and halved again after 4/5."""

    base_lr: float = 0.001
    total_iters: int = 1

    def lr_at(self, step: int) -> float:
        if step < 0.6 * self.total_iters:
            return self.base_lr
        if step < 0.8 * self.total_iters:
            return self.base_lr * 0.5
        return self.base_lr * 0.25


def adam_step(params: dict, grads: dict, state: AdamState, schedule: LrSchedule) -> AdamState:
    """One Adam update in place; raises on non-finite gradients."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in {name} at step {state.step}")
    lr = schedule.lr_at(state.step)
    t = state.step + 1
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = grads[name]
        state.m[name] = state.beta1 * state.m[name] + (1.0 - state.beta1) * g
        state.v[name] = state.beta2 * state.v[name] + (1.0 - state.beta2) * g * g
        m_hat = state.m[name] / bc1
        v_hat = state.v[name] / bc2
        p -= lr * m_hat / (np.sqrt(v_hat) + state.eps)
    state.step = t
    return state


def save_checkpoint(path, tensors: dict) -> None:
    """Little-endian binary: magic, then (name, rank, dims, float64 data)."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        for name in sorted(tensors):
            arr = np.ascontiguousarray(tensors[name], dtype=np.float64)
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.astype("<f8").tobytes())


def load_checkpoint(path) -> dict:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path} is not a checkpoint (bad magic)")
    tensors = {}
    off = len(CHECKPOINT_MAGIC)
    while off < len(blob):
        (name_len,) = struct.unpack_from("<I", blob, off)
        off += 4
        name = blob[off:off + name_len].decode("utf-8")
        off += name_len
        (rank,) = struct.unpack_from("<I", blob, off)
        off += 4
        dims = struct.unpack_from(f"<{rank}I", blob, off)
        off += 4 * rank
        count = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=off).reshape(dims)
        off += 8 * count
        tensors[name] = arr.copy()
    return tensors


def snippet_batch(snippet) -> objective.SnippetBatch:
    """Precompute the image pyramids the objective needs for one snippet."""
    def pyramid(arr):
        levels = [arr]
        for _ in range(PYRAMID_LEVELS - 1):
            levels.append(mean_pool2(levels[-1]))
        return levels

    return objective.SnippetBatch(
        left_pyrs=[pyramid(g.data) for g in snippet.left],
        right_pyrs=[pyramid(g.data) for g in snippet.right],
        target_index=target_frame_index(len(snippet.left)),
        rig=snippet.rig)


@dataclass
class TrainSettings:
    iterations: int = 1000
    seed: int = 0
    base_lr: float = 0.001
    weights: objective.LossWeights = field(default_factory=objective.LossWeights)
    charbonnier: objective.CharbonnierParams = field(default_factory=objective.CharbonnierParams)
    disp_widths: tuple = (16, 32, 64, 128, 256)
    pose_widths: tuple = (16, 32, 64, 128, 256, 256)
    head_kernel: int = 3
    right_temporal: bool = False


@dataclass
class TrainResult:
    disp_net: DispNetSmall
    pose_net: PoseNetSmall
    totals: list
    checkpoint_path: str | None
    log_path: str | None
    aborted: bool = False
    abort_reason: str | None = None


def checkpoint_tensors(disp_net: DispNetSmall, pose_net: PoseNetSmall) -> dict:
    tensors = {f"disp.{k}": v for k, v in disp_net.params.items()}
    tensors.update({f"pose.{k}": v for k, v in pose_net.params.items()})
    return tensors


def restore_networks(tensors: dict, settings: TrainSettings, n_frames: int) -> tuple:
    disp = DispNetSmall(widths=settings.disp_widths, head_kernel=settings.head_kernel)
    pose = PoseNetSmall(n_frames=n_frames, widths=settings.pose_widths)
    for k in disp.params:
        disp.params[k] = tensors[f"disp.{k}"].copy()
    for k in pose.params:
        pose.params[k] = tensors[f"pose.{k}"].copy()
    return disp, pose


def train_step(disp_net: DispNetSmall, pose_net: PoseNetSmall,
               batch: objective.SnippetBatch, weights: objective.LossWeights,
               charb: objective.CharbonnierParams, right_temporal: bool = False) -> tuple:
    """Forward + backward over one snippet; returns (breakdown, grads)."""
    tape = ad.Tape()
    disp_leaves = lift_params(tape, disp_net.params)
    pose_leaves = lift_params(tape, pose_net.params)
    target = batch.target_index
    disp_pairs = disp_net.forward(tape, batch.left_pyrs[target][0], disp_leaves)
    poses, _ = pose_net.forward(tape, [batch.left_pyrs[f][0] for f in range(batch.n_frames)],
                                pose_leaves)
    breakdown, total = objective.total_objective(
        batch, [p[0] for p in disp_pairs], [p[1] for p in disp_pairs],
        poses, weights, charb, right_temporal=right_temporal)
    tape.backward(total)
    grads = {name: tape.grad(leaf) for name, leaf in disp_leaves.items()}
    pose_grads = {name: tape.grad(leaf) for name, leaf in pose_leaves.items()}
    return breakdown, grads, pose_grads


def train(settings: TrainSettings, snippets: list, out_dir=None,
          log_every: int = 1) -> TrainResult:
    """End-to-end training loop over in-memory snippets.

    Deterministic for a fixed seed: initialization, data order, and every
    update are driven by named RNG streams. Emits one JSON line per logged
    iteration and a final checkpoint when ``out_dir`` is given. A non-finite
    loss aborts, keeping the last finite-loss parameters.
    """
    import os

    if not snippets:
        raise ValueError("training needs at least one snippet")
    n_frames = len(snippets[0].left)
    rig = snippets[0].rig
    for i, s in enumerate(snippets):
        if len(s.left) != n_frames:
            raise ValueError(f"snippet {i} has {len(s.left)} frames, expected {n_frames}")
        if s.rig != rig:
            raise ValueError(f"snippet {i} carries a different calibration")

    streams = seed_streams(settings.seed)
    disp_net = DispNetSmall(widths=settings.disp_widths, head_kernel=settings.head_kernel,
                            rng=streams["init"])
    pose_net = PoseNetSmall(n_frames=n_frames, widths=settings.pose_widths,
                            rng=streams["init"])
    batches = [snippet_batch(s) for s in snippets]

    all_params = {}
    all_params.update({f"disp.{k}": v for k, v in disp_net.params.items()})
    all_params.update({f"pose.{k}": v for k, v in pose_net.params.items()})
    state = AdamState.for_params(all_params)
    schedule = LrSchedule(base_lr=settings.base_lr, total_iters=settings.iterations)

    log_path = checkpoint_path = None
    log_fh = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        log_path = os.path.join(out_dir, "loss_log.jsonl")
        checkpoint_path = os.path.join(out_dir, "checkpoint.bin")
        log_fh = open(log_path, "w")

    totals = []
    order = np.arange(len(batches))
    cursor = len(batches)  # force a reshuffle on the first iteration
    last_good = None
    aborted = False
    abort_reason = None
    try:
        for it in range(settings.iterations):
            if cursor >= len(order):
                streams["data"].shuffle(order)
                cursor = 0
            batch = batches[order[cursor]]
            cursor += 1

            breakdown, disp_grads, pose_grads = train_step(
                disp_net, pose_net, batch, settings.weights, settings.charbonnier,
                settings.right_temporal)
            if not np.isfinite(breakdown.total):
                aborted = True
                abort_reason = f"non-finite loss at iteration {it}"
                break
            last_good = {k: v.copy() for k, v in checkpoint_tensors(disp_net, pose_net).items()}
            totals.append(breakdown.total)

            grads = {f"disp.{k}": g for k, g in disp_grads.items()}
            grads.update({f"pose.{k}": g for k, g in pose_grads.items()})
            try:
                adam_step(all_params, grads, state, schedule)
            except FloatingPointError as exc:
                aborted = True
                abort_reason = str(exc)
                break

            if log_fh is not None and (it % log_every == 0 or it == settings.iterations - 1):
                row = {"iter": it, "lr": schedule.lr_at(it), "total": breakdown.total,
                       "terms": breakdown.to_json_rows()}
                log_fh.write(json.dumps(row) + "\n")
    finally:
        if log_fh is not None:
            log_fh.close()

    if aborted and last_good is not None:
        disp_net, pose_net = restore_networks(last_good, settings, n_frames)
    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, checkpoint_tensors(disp_net, pose_net))
    return TrainResult(disp_net=disp_net, pose_net=pose_net, totals=totals,
                       checkpoint_path=checkpoint_path, log_path=log_path,
                       aborted=aborted, abort_reason=abort_reason)
