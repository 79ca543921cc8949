"""Run configuration: strict JSON schema with paper-constant defaults.

Every knob of an experiment lives in one JSON document so that ablations
(penalty exponent sweeps, snippet lengths) are pure config changes. Unknown
keys are rejected, and every validation error names the offending key.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from . import data as data_mod
from .model import TrainSettings
from .objective import CharbonnierParams, LossWeights


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        self.key = key
        super().__init__(f"config key '{key}': {message}")


def _check_keys(obj: dict, allowed: set, context: str) -> None:
    unknown = obj.keys() - allowed
    if unknown:
        key = sorted(unknown)[0]
        raise ConfigError(f"{context}{key}" if context else key, "unknown key")


def _number(obj: dict, key: str, default, context: str = "", minimum=None,
            maximum=None, integer=False):
    val = obj.get(key, default)
    full = f"{context}{key}"
    if isinstance(val, bool) or not isinstance(val, (int, float)):
        raise ConfigError(full, f"expected a number, got {val!r}")
    if integer and int(val) != val:
        raise ConfigError(full, f"expected an integer, got {val!r}")
    if minimum is not None and val < minimum:
        raise ConfigError(full, f"must be >= {minimum}, got {val}")
    if maximum is not None and val > maximum:
        raise ConfigError(full, f"must be <= {maximum}, got {val}")
    return int(val) if integer else float(val)


@dataclass
class DataConfig:
    root: str | None = None
    synth_count: int = 200
    synth_width: int = 48
    synth_height: int = 32
    synth_seed: int = 100
    holdout_count: int = 0


@dataclass
class RunConfig:
    seed: int = 0
    snippet_len: int = 3
    iterations: int = 1000
    lr: float = 0.001
    weights: LossWeights = field(default_factory=LossWeights)
    charbonnier: CharbonnierParams = field(default_factory=CharbonnierParams)
    disp_widths: tuple = (16, 32, 64, 128, 256)
    pose_widths: tuple = (16, 32, 64, 128, 256, 256)
    head_kernel: int = 3
    right_temporal: bool = False
    augment: data_mod.AugmentPolicy | None = None
    data: DataConfig = field(default_factory=DataConfig)
    out: str | None = None

    def train_settings(self) -> TrainSettings:
        return TrainSettings(
            iterations=self.iterations, seed=self.seed, base_lr=self.lr,
            weights=self.weights, charbonnier=self.charbonnier,
            disp_widths=self.disp_widths, pose_widths=self.pose_widths,
            head_kernel=self.head_kernel, right_temporal=self.right_temporal)


def parse_config(obj: dict) -> RunConfig:
    _check_keys(obj, {"seed", "snippet_len", "iterations", "lr", "weights",
                      "charbonnier", "model", "data", "right_temporal",
                      "augment", "out"}, "")
    cfg = RunConfig()
    cfg.seed = _number(obj, "seed", 0, integer=True)
    cfg.snippet_len = _number(obj, "snippet_len", 3, integer=True)
    if cfg.snippet_len not in (2, 3, 5):
        raise ConfigError("snippet_len", f"must be 2, 3, or 5, got {cfg.snippet_len}")
    cfg.iterations = _number(obj, "iterations", 1000, minimum=1, integer=True)
    cfg.lr = _number(obj, "lr", 0.001, minimum=0.0)

    w = obj.get("weights", {})
    _check_keys(w, {"lambda_ap", "lambda_ds_base", "alpha", "lambda_d", "lambda_p"},
                "weights.")
    try:
        cfg.weights = LossWeights(
            lambda_ap=_number(w, "lambda_ap", 1.0, "weights.", minimum=0.0),
            lambda_ds_base=_number(w, "lambda_ds_base", 0.1, "weights.", minimum=0.0),
            alpha=_number(w, "alpha", 0.85, "weights.", minimum=0.0, maximum=1.0),
            lambda_d=_number(w, "lambda_d", 1.0, "weights.", minimum=0.0),
            lambda_p=_number(w, "lambda_p", 1.0, "weights.", minimum=0.0))
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError("weights", str(exc)) from exc

    c = obj.get("charbonnier", {})
    _check_keys(c, {"a", "eps"}, "charbonnier.")
    a = _number(c, "a", 0.45, "charbonnier.")
    eps = _number(c, "eps", 0.001, "charbonnier.")
    if not 0.0 < a <= 1.0:
        raise ConfigError("charbonnier.a", f"must be in (0, 1], got {a}")
    if eps <= 0.0:
        raise ConfigError("charbonnier.eps", f"must be positive, got {eps}")
    cfg.charbonnier = CharbonnierParams(a=a, eps=eps)

    m = obj.get("model", {})
    _check_keys(m, {"disp_widths", "pose_widths", "head_kernel"}, "model.")
    if "disp_widths" in m:
        ws = m["disp_widths"]
        if not isinstance(ws, list) or len(ws) != 5:
            raise ConfigError("model.disp_widths", "expected a list of 5 integers")
        cfg.disp_widths = tuple(int(v) for v in ws)
    if "pose_widths" in m:
        ws = m["pose_widths"]
        if not isinstance(ws, list) or len(ws) != 6:
            raise ConfigError("model.pose_widths", "expected a list of 6 integers")
        cfg.pose_widths = tuple(int(v) for v in ws)
    cfg.head_kernel = _number(m, "head_kernel", 3, "model.", minimum=1, integer=True)

    rt = obj.get("right_temporal", False)
    if not isinstance(rt, bool):
        raise ConfigError("right_temporal", f"expected true/false, got {rt!r}")
    cfg.right_temporal = rt

    d = obj.get("data", {})
    _check_keys(d, {"root", "synth"}, "data.")
    dc = DataConfig()
    if "root" in d and "synth" in d:
        raise ConfigError("data", "give either 'root' or 'synth', not both")
    if "root" in d:
        if not isinstance(d["root"], str):
            raise ConfigError("data.root", "expected a path string")
        dc.root = d["root"]
    if "synth" in d:
        s = d["synth"]
        _check_keys(s, {"count", "width", "height", "seed", "holdout_count"},
                    "data.synth.")
        dc.synth_count = _number(s, "count", 200, "data.synth.", minimum=1, integer=True)
        dc.synth_width = _number(s, "width", 48, "data.synth.", minimum=16, integer=True)
        dc.synth_height = _number(s, "height", 32, "data.synth.", minimum=16, integer=True)
        dc.synth_seed = _number(s, "seed", 100, "data.synth.", integer=True)
        dc.holdout_count = _number(s, "holdout_count", 0, "data.synth.", minimum=0,
                                   integer=True)
    cfg.data = dc

    if "augment" in obj and obj["augment"] is not None:
        a_obj = obj["augment"]
        _check_keys(a_obj, {"flip_prob", "apply_prob", "brightness", "gamma", "color"},
                    "augment.")

        def pair(key, default):
            val = a_obj.get(key, list(default))
            if not isinstance(val, list) or len(val) != 2:
                raise ConfigError(f"augment.{key}", "expected [lo, hi]")
            return float(val[0]), float(val[1])

        cfg.augment = data_mod.AugmentPolicy(
            flip_prob=_number(a_obj, "flip_prob", 0.5, "augment.", 0.0, 1.0),
            apply_prob=_number(a_obj, "apply_prob", 0.5, "augment.", 0.0, 1.0),
            brightness=pair("brightness", (0.5, 2.0)),
            gamma=pair("gamma", (0.8, 1.2)),
            color=pair("color", (0.8, 1.2)))

    if "out" in obj and obj["out"] is not None:
        if not isinstance(obj["out"], str):
            raise ConfigError("out", "expected a path string")
        cfg.out = obj["out"]
    return cfg


def load_config(path) -> RunConfig:
    with open(path) as fh:
        try:
            obj = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError("(document)", f"invalid JSON: {exc}") from exc
    if not isinstance(obj, dict):
        raise ConfigError("(document)", "top level must be a JSON object")
    return parse_config(obj)
