"""Composite pseudo-labels: turn a still image into a labelled short clip.

A source image is expanded into a few perturbed frames; a pretrained model
labels every frame; unreliable (high-entropy) frames are dropped and the rest
are blended into one package label.

Frames are never stored. A :class:`PackageStore` record keeps the seed and
generator parameters, and :func:`regenerate_frames` rebuilds the pixels.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigError, InputError
from .models import TrainedWeights, check_input

log = logging.getLogger(__name__)

WEIGHT_SCHEMES = ("uniform", "confidence")
GENERATOR_KINDS = ("stochastic_perturbation", "external")
SUM_TOL = 1e-6


def normalized_entropy(probs) -> float:
    p = np.asarray(probs, dtype=np.float64)
    if p.size < 2:
        return 0.0
    nz = p[p > 0]
    return float(np.clip(-(nz * np.log(nz)).sum() / math.log(p.size), 0.0, 1.0))


@dataclass(frozen=True)
class SoftLabel:
    """Class distribution with its normalized-entropy uncertainty in [0, 1]."""

    probs: tuple
    uncertainty: float

    @classmethod
    def from_probs(cls, probs) -> "SoftLabel":
        p = np.asarray(probs, dtype=np.float64).ravel()
        if p.size < 2 or not np.all(np.isfinite(p)) or p.min() < 0 or abs(p.sum() - 1) > SUM_TOL:
            raise InputError("soft label must be a finite distribution over >= 2 classes")
        return cls(tuple(float(v) for v in p), normalized_entropy(p))

    @classmethod
    def from_logits(cls, logits) -> "SoftLabel":
        z = torch.as_tensor(logits, dtype=torch.float64).ravel()
        if not torch.isfinite(z).all():
            raise InputError("non-finite logits")
        return cls.from_probs(torch.softmax(z, 0).numpy())

    @property
    def array(self) -> np.ndarray:
        return np.asarray(self.probs)

    @property
    def top_class(self) -> int:
        return int(np.argmax(self.probs))


def original_label(image: torch.Tensor, pretrained: TrainedWeights) -> SoftLabel:
    """Softmax (T = 1) of the pretrained model on one ``C x H x W`` image."""
    if image.dim() != 3:
        raise InputError(f"expected one C x H x W image, got shape {tuple(image.shape)}")
    return label_frames(image[None], pretrained)[0]


def label_frames(frames: torch.Tensor, pretrained: TrainedWeights) -> List[SoftLabel]:
    # float64 so a frame's label does not depend on how many frames share the batch
    check_input(pretrained, frames)
    net = pretrained.to_module().double()
    with torch.no_grad():
        logits, _ = net(frames.double(), taps=())
    return [SoftLabel.from_logits(z) for z in logits]


# ---------------------------------------------------------------------------
# frame generation


@dataclass
class FrameGenerator:
    """Produces perturbed copies of a source image.

    ``stochastic_perturbation`` params (all scaled by ``magnitude``):
    ``crop`` max fraction of the side removed before resizing back,
    ``shift`` max translation as a fraction of the side,
    ``brightness`` / ``contrast`` jitter half-widths, ``noise`` Gaussian std.

    ``external`` takes ``params["fn"]``, a callable
    ``fn(image, index, generator) -> frame`` (e.g. a trained image-to-image
    model), and an optional ``params["name"]`` recorded in package stores.
    """

    kind: str = "stochastic_perturbation"
    params: Dict = field(default_factory=dict)

    DEFAULTS = {"magnitude": 1.0, "crop": 0.25, "shift": 0.1, "brightness": 0.15,
                "contrast": 0.15, "noise": 0.05}

    def __post_init__(self):
        if self.kind not in GENERATOR_KINDS:
            raise ConfigError(f"frame generator kind must be one of {GENERATOR_KINDS}")
        if self.kind == "external":
            if not callable(self.params.get("fn")):
                raise ConfigError("external frame generator needs a callable params['fn']")
            return
        unknown = set(self.params) - set(self.DEFAULTS)
        if unknown:
            raise ConfigError(f"unknown perturbation params {sorted(unknown)}")
        self.params = {**self.DEFAULTS, **self.params}
        p = self.params
        if any(not math.isfinite(float(v)) or float(v) < 0 for v in p.values()):
            raise ConfigError("perturbation params must be finite and >= 0")
        if p["magnitude"] * p["crop"] >= 1:
            raise ConfigError("crop fraction leaves a zero-size crop")
        if p["magnitude"] * p["shift"] >= 1:
            raise ConfigError("shift fraction moves the frame out of view")

    def describe(self) -> dict:
        if self.kind == "external":
            return {"kind": self.kind, "name": str(self.params.get("name", "external"))}
        return {"kind": self.kind, "params": dict(self.params)}

    def __call__(self, image: torch.Tensor, index: int, gen: torch.Generator) -> torch.Tensor:
        if self.kind == "external":
            frame = torch.as_tensor(self.params["fn"](image, index, gen))
            if frame.shape != image.shape:
                raise InputError(f"external generator returned shape {tuple(frame.shape)}")
            return frame
        return self._perturb(image, gen)

    def _perturb(self, image: torch.Tensor, gen: torch.Generator) -> torch.Tensor:
        p = self.params
        m = p["magnitude"]
        # draw every random number up front so the stream does not depend on magnitude
        u = torch.rand(7, generator=gen, dtype=torch.float64)
        eps = torch.randn(image.shape, generator=gen, dtype=torch.float64)
        if m == 0:
            return image.clone()
        c, h, w = image.shape
        x = image.double()

        keep = 1.0 - m * p["crop"] * float(u[0])
        ch, cw = max(1, round(h * keep)), max(1, round(w * keep))
        top = int(float(u[1]) * (h - ch + 1)) if ch < h else 0
        left = int(float(u[2]) * (w - cw + 1)) if cw < w else 0
        if (ch, cw) != (h, w):
            x = F.interpolate(x[None, :, top: top + ch, left: left + cw], size=(h, w),
                              mode="bilinear", align_corners=False)[0]

        max_shift = m * p["shift"]
        if max_shift > 0:
            theta = torch.tensor([[1.0, 0.0, (2 * float(u[3]) - 1) * 2 * max_shift],
                                  [0.0, 1.0, (2 * float(u[4]) - 1) * 2 * max_shift]], dtype=torch.float64)
            grid = F.affine_grid(theta[None], [1, c, h, w], align_corners=False)
            x = F.grid_sample(x[None], grid, padding_mode="border", align_corners=False)[0]

        mean = x.mean()
        contrast = 1.0 + m * p["contrast"] * (2 * float(u[5]) - 1)
        brightness = m * p["brightness"] * (2 * float(u[6]) - 1)
        x = (x - mean) * contrast + mean + brightness
        x = x + m * p["noise"] * eps
        return x.to(image.dtype)


def generate_frames(image: torch.Tensor, count: int, gen: Optional[FrameGenerator] = None,
                    seed: int = 0) -> List[torch.Tensor]:
    """``count`` frames; frame 0 is the source, the rest are perturbed copies."""
    if count < 1:
        raise ConfigError("frame count must be >= 1")
    if image.dim() != 3:
        raise InputError("expected one C x H x W image")
    gen = gen or FrameGenerator()
    rng = torch.Generator().manual_seed(int(seed))
    return [image.clone()] + [gen(image, i, rng) for i in range(1, count)]


# ---------------------------------------------------------------------------
# selection and aggregation


def reliable_indices(labels: Sequence[SoftLabel], threshold: float) -> List[int]:
    if not labels:
        return []
    keep = [i for i, lab in enumerate(labels) if lab.uncertainty <= threshold]
    if not keep:
        keep = [min(range(len(labels)), key=lambda i: (labels[i].uncertainty, i))]
    return keep


def select_reliable(labels: Sequence[SoftLabel], threshold: float) -> List[SoftLabel]:
    """Labels at or below the uncertainty threshold, in order.

    Never empty for nonempty input: if nothing qualifies, the single least
    uncertain label is kept.
    """
    return [labels[i] for i in reliable_indices(labels, threshold)]


@dataclass
class LabelPackage:
    """A pseudo clip: frames with per-frame labels and weights, plus the blend."""

    frames: List[torch.Tensor]
    labels: List[SoftLabel]
    weights: List[float]
    aggregated: SoftLabel
    source_id: str = ""
    meta: Dict = field(default_factory=dict)

    def __len__(self):
        return len(self.labels)

    def entries(self):
        return list(zip(self.frames, self.labels, self.weights))


def package_weights(labels: Sequence[SoftLabel], scheme: str = "confidence") -> List[float]:
    if scheme not in WEIGHT_SCHEMES:
        raise ConfigError(f"weight scheme must be one of {WEIGHT_SCHEMES}")
    n = len(labels)
    if scheme == "confidence":
        raw = np.array([1.0 - lab.uncertainty for lab in labels])
        if raw.sum() > 0:
            return list(raw / raw.sum())
        log.warning("all frames maximally uncertain; falling back to uniform weights")
    return [1.0 / n] * n


def aggregate_package(frames: Sequence[torch.Tensor], labels: Sequence[SoftLabel],
                      weight_scheme: str = "confidence", source_id: str = "") -> LabelPackage:
    """Weighted mean of the per-frame labels."""
    if len(frames) != len(labels) or not labels:
        raise InputError("need one label per frame and at least one frame")
    if len({len(lab.probs) for lab in labels}) != 1:
        raise InputError("labels disagree on the number of classes")
    w = package_weights(labels, weight_scheme)
    stack = np.stack([lab.array for lab in labels])
    agg = (np.asarray(w)[:, None] * stack).sum(0)
    agg = np.clip(agg, 0.0, None)
    agg = agg / agg.sum()
    return LabelPackage(list(frames), list(labels), [float(v) for v in w],
                        SoftLabel.from_probs(agg), source_id, {"weight_scheme": weight_scheme})


def package_loss(package: LabelPackage, frame_logits) -> torch.Tensor:
    """Frame-weighted cross-entropy of a classifier against the package label.

    ``frame_logits`` holds one row of logits per frame of the package.
    """
    z = torch.as_tensor(frame_logits)
    if z.dim() == 1:
        z = z[None]
    if z.shape[0] != len(package):
        raise InputError("need one row of logits per frame")
    target = torch.as_tensor(package.aggregated.array, dtype=z.dtype)
    per_frame = -(target[None] * torch.log_softmax(z, dim=1)).sum(1)
    w = torch.as_tensor(package.weights, dtype=z.dtype)
    return (w * per_frame).sum()


def _anomalous(label: SoftLabel, rng: np.random.Generator) -> SoftLabel:
    # swap the top class with a random below-median class, yielding a
    # confident-looking label that puts its mass on an unlikely class
    p = label.array.copy()
    top = int(np.argmax(p))
    low = np.flatnonzero(p <= np.median(p))
    low = low[low != top]
    if low.size == 0:
        return label
    j = int(rng.choice(low))
    p[top], p[j] = p[j], p[top]
    return SoftLabel.from_probs(p)


def build_package(image: torch.Tensor, pretrained: TrainedWeights, count: int = 8,
                  gen: Optional[FrameGenerator] = None, seed: int = 0, threshold: float = 1.0,
                  weight_scheme: str = "confidence", anomaly_rate: float = 0.0,
                  source_id: str = "") -> LabelPackage:
    """Generate, label, filter and aggregate one package.

    ``anomaly_rate`` is the probability that a frame's label is replaced by a
    deliberately implausible one (default off).
    """
    if not 0 <= anomaly_rate <= 1:
        raise ConfigError("anomaly_rate must lie in [0, 1]")
    if not 0 <= threshold <= 1:
        raise ConfigError("threshold must lie in [0, 1]")
    gen = gen or FrameGenerator()
    frames = generate_frames(image, count, gen, seed)
    labels = label_frames(torch.stack(frames), pretrained)
    rng = np.random.default_rng(seed)
    flags = rng.random(count) < anomaly_rate
    labels = [_anomalous(lab, rng) if flag else lab for lab, flag in zip(labels, flags)]
    keep = reliable_indices(labels, threshold)
    pkg = aggregate_package([frames[i] for i in keep], [labels[i] for i in keep],
                            weight_scheme, source_id)
    pkg.meta.update({
        "seed": int(seed), "count": int(count), "kept": keep, "threshold": float(threshold),
        "anomalous": [int(i) for i in np.flatnonzero(flags)], "anomaly_rate": float(anomaly_rate),
        "generator": gen.describe(),
    })
    return pkg


def regenerate_frames(record: dict, image: torch.Tensor,
                      gen: Optional[FrameGenerator] = None) -> List[torch.Tensor]:
    """Rebuild a stored package's kept frames from its source image."""
    desc = record["generator"]
    if gen is None:
        if desc["kind"] == "external":
            raise ConfigError("external generator packages need the generator passed back in")
        gen = FrameGenerator(desc["kind"], dict(desc["params"]))
    frames = generate_frames(image, record["count"], gen, record["seed"])
    return [frames[i] for i in record["kept"]]


# ---------------------------------------------------------------------------
# storage


class PackageStore:
    """Append-only ``packages.jsonl`` plus an ``index.json`` of source ids.

    The index maps ``source_id`` to the record's line number.
    """

    def __init__(self, root):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.records_path = self.root / "packages.jsonl"
        self.index_path = self.root / "index.json"
        self.index: Dict[str, int] = {}
        if self.index_path.exists():
            self.index = json.loads(self.index_path.read_text())["packages"]

    def __len__(self):
        return len(self.index)

    @staticmethod
    def to_record(pkg: LabelPackage) -> dict:
        return {
            "source_id": pkg.source_id,
            **{k: pkg.meta[k] for k in ("seed", "count", "kept", "generator") if k in pkg.meta},
            "weight_scheme": pkg.meta.get("weight_scheme"),
            "labels": [list(lab.probs) for lab in pkg.labels],
            "uncertainty": [lab.uncertainty for lab in pkg.labels],
            "weights": pkg.weights,
            "aggregated": list(pkg.aggregated.probs),
        }

    def add(self, pkg: LabelPackage) -> int:
        if pkg.source_id in self.index:
            raise InputError(f"package {pkg.source_id!r} already stored")
        line = sum(1 for _ in self.records_path.open()) if self.records_path.exists() else 0
        with self.records_path.open("a") as fh:
            fh.write(json.dumps(self.to_record(pkg)) + "\n")
        self.index[pkg.source_id] = line
        self._write_index()
        return line

    def _write_index(self):
        tmp = self.index_path.with_suffix(".tmp")
        tmp.write_text(json.dumps({"n_packages": len(self.index), "packages": self.index}, indent=1))
        tmp.replace(self.index_path)

    def records(self) -> List[dict]:
        if not self.records_path.exists():
            return []
        with self.records_path.open() as fh:
            return [json.loads(line) for line in fh if line.strip()]

    def get(self, source_id: str) -> dict:
        if source_id not in self.index:
            raise InputError(f"no package {source_id!r}")
        return self.records()[self.index[source_id]]
