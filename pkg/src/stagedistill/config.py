"""Hierarchical run configuration (YAML) with dotted-key overrides.

Every value has a built-in default; a config file and ``--set a.b=value``
overrides are layered on top. Unknown keys and ill-typed values are rejected
with their full dotted path.
"""

from __future__ import annotations

import copy
from pathlib import Path
from typing import Any, Iterable, Optional

import yaml

from . import cascade as C
from .errors import ConfigError
from .losses import LossWeights
from .models import NetworkSpec
from .packager import FrameGenerator
from .training import TrainingSchedule

_W = LossWeights()

DEFAULTS = {
    "name": "run",
    "seed": 0,
    "model": {
        "teacher": {"family": "residual_cnn", "depth": 14, "width_multiplier": 1.0},
        "student": {"family": "plain_cnn", "depth": 14, "width_multiplier": 0.5},
        "num_classes": 8,
        "image_size": 16,
    },
    "distill": {
        "mode": "rskd",
        "kind": "response",
        "teacher_checkpoint": None,
        "lambda_": _W.lambda_,
        "alpha": _W.alpha,
        "beta": _W.beta,
        "gamma": _W.gamma,
        "eta": _W.eta,
        "xi": _W.xi,
        "tau_w": _W.tau_w,
        "temperature": _W.temperature,
        "k_channels": 8,
        "t2_scaling": True,
        "resize": False,
        "n_cascade": 1,
        "ladder": "same",
        "merge": "average",
        "recalibrate_bn": True,
        "shared_branch_init": True,
        "parallel": False,
        "feature_taps": ["s1", "s2", "s3"],
        "fsp_pairs": [["s1_in", "s1"], ["s2_in", "s2"], ["s3_in", "s3"]],
    },
    "schedule": {
        "epochs": 15,
        "batch_size": 64,
        "optimizer": "sgd_momentum",
        "initial_lr": 0.05,
        "lr_decay_factor": 0.1,
        "decay_epochs": [9, 13],
        "weight_decay": 5e-4,
        "momentum": 0.9,
        "augment": True,
        # the default loss weights make the feature term dominate by three
        # orders of magnitude at init; clipping keeps that run finite
        "grad_clip": 5.0,
    },
    "teacher_schedule": {
        "epochs": 20,
        "decay_epochs": [12, 17],
        "grad_clip": None,
    },
    "data": {
        "source": "synthetic",
        "root": None,
        "n_train": 2000,
        "n_val": 800,
        "noise": 0.2,
        "seed": 0,
    },
    "package": {
        "checkpoint": None,
        "n_images": 32,
        "split": "val",
        "count": 8,
        "threshold": 1.0,
        "weight_scheme": "confidence",
        "anomaly_rate": 0.0,
        "generator": "stochastic_perturbation",
        "magnitude": 1.0,
        "crop": 0.25,
        "shift": 0.1,
        "brightness": 0.15,
        "contrast": 0.15,
        "noise": 0.05,
    },
    "report": {
        "heatmap": True,
        "split": "val",
    },
}

# keys whose default is None but which take a value of this type
_NULLABLE = {
    "distill.teacher_checkpoint": str,
    "data.root": str,
    "package.checkpoint": str,
    "schedule.grad_clip": float,
    "teacher_schedule.grad_clip": float,
}

SINGLE_KINDS = ("response", "feature", "relation") + tuple(C.RSKD_BRANCHES)


def _coerce(path: str, default: Any, value: Any):
    if value is None and (default is None or path in _NULLABLE):
        return None
    want = _NULLABLE.get(path, type(default)) if default is None else type(default)
    if want is bool:
        if isinstance(value, bool):
            return value
    elif want is float:
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
        if isinstance(value, str):  # YAML 1.1 reads "1e30" as a string
            try:
                return float(value)
            except ValueError:
                pass
    elif want is int:
        if isinstance(value, int) and not isinstance(value, bool):
            return value
    elif want is str:
        if isinstance(value, (str, Path)):
            return str(value)
    elif want is list:
        if isinstance(value, (list, tuple)):
            return list(value)
    elif want is dict:
        raise ConfigError(f"{path}: expected a section")
    raise ConfigError(f"{path}: expected {want.__name__}, got {value!r}")


def _merge(base: dict, update: dict, prefix: str = ""):
    if not isinstance(update, dict):
        raise ConfigError(f"{prefix or '<root>'}: expected a mapping")
    for key, value in update.items():
        path = f"{prefix}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {path!r}")
        if isinstance(base[key], dict):
            _merge(base[key], value, path + ".")
        else:
            base[key] = _coerce(path, DEFAULTS_FLAT.get(path, base[key]), value)


def _flatten(d: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in d.items():
        if isinstance(v, dict):
            out.update(_flatten(v, f"{prefix}{k}."))
        else:
            out[f"{prefix}{k}"] = v
    return out


DEFAULTS_FLAT = _flatten(DEFAULTS)


def parse_override(text: str) -> dict:
    """``a.b.c=value`` -> ``{"a": {"b": {"c": value}}}``; value parsed as YAML."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    key, raw = text.split("=", 1)
    key = key.strip()
    if not key:
        raise ConfigError(f"override {text!r} has an empty key")
    try:
        value = yaml.safe_load(raw) if raw.strip() else None
    except yaml.YAMLError as exc:
        raise ConfigError(f"{key}: cannot parse value {raw!r}") from exc
    node: dict = {}
    cur = node
    parts = key.split(".")
    for p in parts[:-1]:
        cur[p] = {}
        cur = cur[p]
    cur[parts[-1]] = value
    return node


class RunConfig:
    """Validated configuration tree with typed accessors."""

    def __init__(self, tree: Optional[dict] = None):
        self.tree = copy.deepcopy(DEFAULTS)
        if tree:
            _merge(self.tree, tree)
        self.validate()

    @classmethod
    def load(cls, path=None, overrides: Iterable[str] = (), seed: Optional[int] = None) -> "RunConfig":
        tree = copy.deepcopy(DEFAULTS)
        if path:
            try:
                loaded = yaml.safe_load(Path(path).read_text()) or {}
            except OSError as exc:
                raise ConfigError(f"cannot read config {path}: {exc}") from exc
            except yaml.YAMLError as exc:
                raise ConfigError(f"invalid YAML in {path}: {exc}") from exc
            _merge(tree, loaded)
        for text in overrides:
            _merge(tree, parse_override(text))
        if seed is not None:
            tree["seed"] = int(seed)
        cfg = cls.__new__(cls)
        cfg.tree = tree
        cfg.validate()
        return cfg

    def __getitem__(self, dotted: str):
        node = self.tree
        for part in dotted.split("."):
            if not isinstance(node, dict) or part not in node:
                raise ConfigError(f"unknown config key {dotted!r}")
            node = node[part]
        return node

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.tree, sort_keys=False)

    def flat(self) -> dict:
        return _flatten(self.tree)

    # -- typed views ------------------------------------------------------

    def _spec(self, role: str) -> NetworkSpec:
        m = self.tree["model"]
        try:
            return NetworkSpec(num_classes=m["num_classes"], image_size=m["image_size"], **m[role])
        except TypeError as exc:
            raise ConfigError(f"model.{role}: {exc}") from exc
        except ConfigError as exc:
            raise ConfigError(f"model.{role}: {exc}") from exc

    def teacher_spec(self) -> NetworkSpec:
        return self._spec("teacher")

    def student_spec(self) -> NetworkSpec:
        return self._spec("student")

    def loss_weights(self) -> LossWeights:
        d = self.tree["distill"]
        names = ("lambda_", "alpha", "beta", "gamma", "eta", "xi", "tau_w", "temperature", "k_channels")
        try:
            return LossWeights(**{k: d[k] for k in names})
        except ValueError as exc:
            raise ConfigError(f"distill: {exc}") from exc

    def schedule(self, teacher: bool = False) -> TrainingSchedule:
        s = dict(self.tree["schedule"])
        if teacher:
            s.update(self.tree["teacher_schedule"])
        try:
            return TrainingSchedule(seed=self.tree["seed"], **s)
        except ConfigError as exc:
            raise ConfigError(f"schedule: {exc}") from exc

    def distill_config(self) -> C.DistillConfig:
        d = self.tree["distill"]
        try:
            return C.DistillConfig(
                weights=self.loss_weights(),
                schedule=self.schedule(),
                feature_taps=tuple(d["feature_taps"]),
                fsp_pairs=tuple(tuple(p) for p in d["fsp_pairs"]),
                t2_scaling=d["t2_scaling"],
                resize=d["resize"],
                n_cascade=d["n_cascade"],
                ladder=d["ladder"],
                merge=d["merge"],
                recalibrate_bn=d["recalibrate_bn"],
                shared_branch_init=d["shared_branch_init"],
                parallel=d["parallel"],
                seed=self.tree["seed"],
            )
        except ConfigError as exc:
            raise ConfigError(f"distill: {exc}") from exc

    def single_recipe(self) -> C.Recipe:
        kind = self.tree["distill"]["kind"]
        if kind in C.RSKD_BRANCHES:
            return C.RSKD_BRANCHES[kind]
        return C.SubstageKind(kind)

    def frame_generator(self) -> FrameGenerator:
        p = self.tree["package"]
        if p["generator"] != "stochastic_perturbation":
            raise ConfigError("package.generator: only stochastic_perturbation is configurable from a file")
        keys = ("magnitude", "crop", "shift", "brightness", "contrast", "noise")
        try:
            return FrameGenerator(p["generator"], {k: p[k] for k in keys})
        except ConfigError as exc:
            raise ConfigError(f"package: {exc}") from exc

    def validate(self):
        d = self.tree["distill"]
        if d["mode"] not in ("skd", "rskd", "single"):
            raise ConfigError("distill.mode: expected one of skd, rskd, single")
        if d["kind"] not in SINGLE_KINDS:
            raise ConfigError(f"distill.kind: expected one of {', '.join(SINGLE_KINDS)}")
        if self.tree["data"]["source"] not in ("synthetic", "folder"):
            raise ConfigError("data.source: expected synthetic or folder")
        if self.tree["data"]["source"] == "folder" and not self.tree["data"]["root"]:
            raise ConfigError("data.root: required when data.source is folder")
        p = self.tree["package"]
        if p["weight_scheme"] not in ("uniform", "confidence"):
            raise ConfigError("package.weight_scheme: expected uniform or confidence")
        if p["count"] < 1:
            raise ConfigError("package.count: must be >= 1")
        if not 0 <= p["threshold"] <= 1:
            raise ConfigError("package.threshold: must lie in [0, 1]")
        if not 0 <= p["anomaly_rate"] <= 1:
            raise ConfigError("package.anomaly_rate: must lie in [0, 1]")
        if p["split"] not in ("train", "val") or self.tree["report"]["split"] not in ("train", "val"):
            raise ConfigError("package.split / report.split: expected train or val")
        # build every typed view once so bad values fail at load time
        self.teacher_spec()
        self.student_spec()
        self.distill_config()
        self.schedule(teacher=True)
        self.frame_generator()
