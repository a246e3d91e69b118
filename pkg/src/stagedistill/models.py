"""Desk-scale CNN families with named tap points, plus weight containers.

Both families share one topology: a 3x3 stem followed by three stages of
``(depth - 2) / 6`` two-conv blocks, global average pooling and a linear
head. ``residual_cnn`` adds identity (or 1x1 projection) shortcuts;
``plain_cnn`` does not. Depth follows the CIFAR ResNet convention, so
``depth=8`` is one block per stage and ``depth=20`` is three.

Available taps, in forward order:

``stem``
    output of the stem conv.
``s{i}_in``
    output of the first conv of stage ``i`` (after downsampling).
``s{i}``
    output of stage ``i``.

``s{i}_in`` and ``s{i}`` share resolution and width, which makes them the
default FSP pair for stage ``i``.
"""

from __future__ import annotations

import hashlib
import io
import json
import os
import struct
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, InputError

FAMILIES = ("plain_cnn", "residual_cnn")
STAGES = 3
ALL_TAPS = ("stem", "s1_in", "s1", "s2_in", "s2", "s3_in", "s3")
DEFAULT_TAPS = ("s1_in", "s1", "s2_in", "s2", "s3_in", "s3")


@dataclass(frozen=True)
class NetworkSpec:
    family: str = "plain_cnn"
    depth: int = 8
    width_multiplier: float = 1.0
    num_classes: int = 8
    tap_names: Tuple[str, ...] = DEFAULT_TAPS
    in_channels: int = 3
    image_size: int = 16
    base_widths: Tuple[int, ...] = (16, 32, 64)

    def __post_init__(self):
        object.__setattr__(self, "depth", int(self.depth))
        object.__setattr__(self, "width_multiplier", float(self.width_multiplier))
        object.__setattr__(self, "num_classes", int(self.num_classes))
        object.__setattr__(self, "tap_names", tuple(self.tap_names))
        object.__setattr__(self, "base_widths", tuple(int(w) for w in self.base_widths))
        self.validate()

    def validate(self):
        if self.family not in FAMILIES:
            raise ConfigError(f"unknown family {self.family!r}; expected one of {FAMILIES}")
        if self.depth < 8 or (self.depth - 2) % 6:
            raise ConfigError(f"depth must be 6b+2 with b >= 1, got {self.depth}")
        if not self.width_multiplier > 0:
            raise ConfigError("width_multiplier must be positive")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be at least 2")
        if not self.tap_names or len(set(self.tap_names)) != len(self.tap_names):
            raise ConfigError("tap_names must be nonempty and unique")
        unknown = set(self.tap_names) - set(ALL_TAPS)
        if unknown:
            raise ConfigError(f"unknown taps {sorted(unknown)}; available: {ALL_TAPS}")
        if len(self.base_widths) != STAGES or min(self.base_widths) < 1:
            raise ConfigError(f"base_widths needs {STAGES} positive entries")
        if self.in_channels < 1 or self.image_size < 4:
            raise ConfigError("invalid input geometry")

    @property
    def blocks_per_stage(self) -> int:
        return (self.depth - 2) // 6

    @property
    def widths(self) -> Tuple[int, ...]:
        return tuple(max(1, int(round(w * self.width_multiplier))) for w in self.base_widths)

    def tap_channels(self, tap: str) -> int:
        if tap == "stem":
            return self.widths[0]
        return self.widths[int(tap[1]) - 1]

    def tap_resolution(self, tap: str) -> int:
        stage = 1 if tap == "stem" else int(tap[1])
        size = self.image_size
        for _ in range(stage - 1):
            size = (size + 1) // 2
        return size

    def to_dict(self) -> dict:
        d = asdict(self)
        d["tap_names"] = list(self.tap_names)
        d["base_widths"] = list(self.base_widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(f"bad network spec: {exc}") from None

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


class Block(nn.Module):
    def __init__(self, cin: int, cout: int, stride: int, residual: bool):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.residual = residual
        self.shortcut = None
        if residual and (stride != 1 or cin != cout):
            self.shortcut = nn.Sequential(
                nn.Conv2d(cin, cout, 1, stride=stride, bias=False), nn.BatchNorm2d(cout)
            )

    def forward(self, x):
        mid = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(mid))
        if self.residual:
            out = out + (x if self.shortcut is None else self.shortcut(x))
        return F.relu(out), mid


class Network(nn.Module):
    """Module realization of a :class:`NetworkSpec`.

    ``forward`` returns ``(logits, features)`` where ``features`` maps each
    requested tap name to its activation.
    """

    def __init__(self, spec: NetworkSpec):
        super().__init__()
        self.spec = spec
        widths = spec.widths
        residual = spec.family == "residual_cnn"
        self.stem = nn.Sequential(
            nn.Conv2d(spec.in_channels, widths[0], 3, padding=1, bias=False),
            nn.BatchNorm2d(widths[0]),
            nn.ReLU(),
        )
        stages = []
        cin = widths[0]
        for i, cout in enumerate(widths):
            blocks = []
            for b in range(spec.blocks_per_stage):
                stride = 2 if (i > 0 and b == 0) else 1
                blocks.append(Block(cin, cout, stride, residual))
                cin = cout
            stages.append(nn.ModuleList(blocks))
        self.stages = nn.ModuleList(stages)
        self.fc = nn.Linear(cin, spec.num_classes)
        self._taps = set(spec.tap_names)

    def forward(self, x, taps: Optional[Iterable[str]] = None):
        wanted = self._taps if taps is None else set(taps)
        feats = {}
        x = self.stem(x)
        if "stem" in wanted:
            feats["stem"] = x
        for i, stage in enumerate(self.stages, start=1):
            for b, block in enumerate(stage):
                x, mid = block(x)
                if b == 0 and f"s{i}_in" in wanted:
                    feats[f"s{i}_in"] = mid
            if f"s{i}" in wanted:
                feats[f"s{i}"] = x
        logits = self.fc(torch.flatten(F.adaptive_avg_pool2d(x, 1), 1))
        order = self.spec.tap_names if taps is None else [t for t in ALL_TAPS if t in wanted]
        return logits, {name: feats[name] for name in order}


def _is_buffer(name: str) -> bool:
    return "running_mean" in name or "running_var" in name


@dataclass
class TrainedWeights:
    """Flat named parameter tensors (and BN running statistics) of a network."""

    spec: NetworkSpec
    entries: Dict[str, torch.Tensor]
    spec_fingerprint: str = ""

    def __post_init__(self):
        expected = self.spec.fingerprint()
        if not self.spec_fingerprint:
            self.spec_fingerprint = expected
        elif self.spec_fingerprint != expected:
            raise InputError("weights fingerprint does not match their network spec")

    @classmethod
    def from_module(cls, net: Network) -> "TrainedWeights":
        entries = {
            k: v.detach().clone()
            for k, v in net.state_dict().items()
            if not k.endswith("num_batches_tracked")
        }
        return cls(net.spec, entries)

    def to_module(self, train: bool = False) -> Network:
        net = Network(self.spec)
        expected = {k for k in net.state_dict() if not k.endswith("num_batches_tracked")}
        if set(self.entries) != expected:
            missing = sorted(expected - set(self.entries))
            extra = sorted(set(self.entries) - expected)
            raise InputError(f"weights do not fit spec (missing={missing[:3]}, extra={extra[:3]})")
        net.load_state_dict(self.entries, strict=False)
        return net.train(train)

    def digest(self) -> str:
        """Content hash of every tensor; changes whenever any value changes."""
        h = hashlib.sha256(self.spec_fingerprint.encode())
        for name in sorted(self.entries):
            h.update(name.encode())
            h.update(self.entries[name].detach().cpu().contiguous().numpy().tobytes())
        return h.hexdigest()[:16]

    def allclose(self, other: "TrainedWeights", **kw) -> bool:
        return self.entries.keys() == other.entries.keys() and all(
            torch.allclose(self.entries[k], other.entries[k], **kw) for k in self.entries
        )


@dataclass
class TapOutput:
    logits: torch.Tensor
    features: Dict[str, torch.Tensor] = field(default_factory=dict)


def build(spec: NetworkSpec, seed: int = 0) -> TrainedWeights:
    """Deterministic He (fan-in) initialization of ``spec``."""
    spec.validate()
    net = Network(spec)
    gen = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for m in net.modules():
            if isinstance(m, (nn.Conv2d, nn.Linear)):
                nn.init.kaiming_normal_(m.weight, mode="fan_in", nonlinearity="relu", generator=gen)
                if m.bias is not None:
                    m.bias.zero_()
            elif isinstance(m, nn.BatchNorm2d):
                m.reset_parameters()
    return TrainedWeights.from_module(net)


def check_input(weights: TrainedWeights, batch: torch.Tensor):
    spec = weights.spec
    if weights.spec_fingerprint != spec.fingerprint():
        raise InputError("fingerprint mismatch")
    expected = (spec.in_channels, spec.image_size, spec.image_size)
    if batch.dim() != 4 or tuple(batch.shape[1:]) != expected:
        raise InputError(f"expected input N x {expected}, got {tuple(batch.shape)}")


def forward_batch(weights: TrainedWeights, batch: torch.Tensor) -> TapOutput:
    """Eval-mode forward pass returning batched logits and tap features."""
    check_input(weights, batch)
    net = weights.to_module()
    with torch.no_grad():
        logits, feats = net(batch)
    return TapOutput(logits, feats)


def forward(weights: TrainedWeights, batch: torch.Tensor) -> List[TapOutput]:
    """Per-sample :class:`TapOutput` list for an ``N x C x H x W`` batch."""
    out = forward_batch(weights, batch)
    return [
        TapOutput(out.logits[i], {k: v[i] for k, v in out.features.items()})
        for i in range(batch.shape[0])
    ]


def param_count(weights) -> int:
    """Trainable scalar parameters (BN running statistics excluded)."""
    if isinstance(weights, TrainedWeights):
        return sum(v.numel() for k, v in weights.entries.items() if not _is_buffer(k))
    if isinstance(weights, nn.Module):
        return sum(p.numel() for p in weights.parameters())
    raise TypeError(f"cannot count parameters of {type(weights).__name__}")


def extra_param_count(distiller_state) -> int:
    """Parameters added by distillation (adapters), excluding the student.

    Accepts a module, an iterable of modules, or ``None`` for no adapters.
    """
    if distiller_state is None:
        return 0
    if isinstance(distiller_state, nn.Module):
        return sum(p.numel() for p in distiller_state.parameters())
    return sum(extra_param_count(m) for m in distiller_state)


# ---------------------------------------------------------------------------
# checkpoint files
#
# layout: MAGIC | u16 version | u32 header length | JSON header | raw tensors

MAGIC = b"SDKW"
FORMAT_VERSION = 1


def _atomic_write(path: Path, data: bytes):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(weights: TrainedWeights, path, meta: Optional[dict] = None):
    body = io.BytesIO()
    table = []
    for name in sorted(weights.entries):
        arr = weights.entries[name].detach().cpu().contiguous().numpy()
        arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        table.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape),
                      "offset": body.tell(), "nbytes": arr.nbytes})
        body.write(arr.tobytes())
    header = json.dumps({
        "spec": weights.spec.to_dict(),
        "fingerprint": weights.spec_fingerprint,
        "entries": table,
        "meta": meta or {},
    }).encode()
    blob = MAGIC + struct.pack("<HI", FORMAT_VERSION, len(header)) + header + body.getvalue()
    _atomic_write(Path(path), blob)


def read_checkpoint_header(path) -> dict:
    with open(path, "rb") as fh:
        head = fh.read(len(MAGIC) + 6)
        if head[: len(MAGIC)] != MAGIC:
            raise InputError(f"{path} is not a stagedistill checkpoint")
        version, size = struct.unpack("<HI", head[len(MAGIC):])
        if version > FORMAT_VERSION:
            raise InputError(f"checkpoint format {version} is newer than supported {FORMAT_VERSION}")
        header = json.loads(fh.read(size))
    header["_body_offset"] = len(MAGIC) + 6 + size
    return header


def load_checkpoint(path) -> TrainedWeights:
    header = read_checkpoint_header(path)
    raw = Path(path).read_bytes()[header["_body_offset"]:]
    entries = {}
    for e in header["entries"]:
        chunk = raw[e["offset"]: e["offset"] + e["nbytes"]]
        arr = np.frombuffer(chunk, dtype=np.dtype(e["dtype"])).reshape(e["shape"])
        entries[e["name"]] = torch.from_numpy(arr.copy())
    spec = NetworkSpec.from_dict(header["spec"])
    return TrainedWeights(spec, entries, header["fingerprint"])
