"""Datasets: a procedural 8-class image set, image-folder I/O, augmentation."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigError, InputError

SYNTHETIC_CLASSES = (
    "h_stripes", "v_stripes", "diag_stripes", "anti_diag_stripes",
    "checker", "disk", "ring", "cross",
)
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp")


@dataclass
class ArrayDataset:
    """In-memory image tensors ``x`` (N x C x H x W, float32) with labels ``y``."""

    x: torch.Tensor
    y: torch.Tensor
    num_classes: int
    class_names: Tuple[str, ...] = ()

    def __post_init__(self):
        if self.x.dim() != 4 or self.x.shape[0] != self.y.shape[0]:
            raise InputError(f"inconsistent dataset shapes {tuple(self.x.shape)} / {tuple(self.y.shape)}")
        self.y = self.y.long()
        if not self.class_names:
            self.class_names = tuple(str(i) for i in range(self.num_classes))

    def __len__(self):
        return self.x.shape[0]

    @property
    def image_shape(self):
        return tuple(self.x.shape[1:])

    def subset(self, idx) -> "ArrayDataset":
        idx = torch.as_tensor(idx, dtype=torch.long)
        return ArrayDataset(self.x[idx], self.y[idx], self.num_classes, self.class_names)

    def batches(
        self,
        batch_size: int,
        shuffle: bool = False,
        generator: Optional[torch.Generator] = None,
        augment_pad: int = 0,
    ) -> Iterator[Tuple[torch.Tensor, torch.Tensor]]:
        n = len(self)
        order = torch.randperm(n, generator=generator) if shuffle else torch.arange(n)
        for start in range(0, n, batch_size):
            idx = order[start: start + batch_size]
            x = self.x[idx]
            if augment_pad:
                x = pad_random_crop(x, augment_pad, generator)
            yield x, self.y[idx]


def pad_random_crop(x: torch.Tensor, pad: int, generator: Optional[torch.Generator] = None) -> torch.Tensor:
    """Zero-pad by ``pad`` on each side and crop back to the original size at a random offset."""
    n, _, h, w = x.shape
    padded = F.pad(x, (pad, pad, pad, pad))
    offs = torch.randint(0, 2 * pad + 1, (n, 2), generator=generator)
    out = torch.empty_like(x)
    for i in range(n):
        dy, dx = int(offs[i, 0]), int(offs[i, 1])
        out[i] = padded[i, :, dy: dy + h, dx: dx + w]
    return out


def default_pad(image_size: int) -> int:
    # 4 px on 32 px images, scaled to the image size
    return max(1, round(image_size * 4 / 32))


# ---------------------------------------------------------------------------
# procedural dataset


def _pattern(cls: int, size: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / size
    freq = rng.uniform(2.0, 4.5)
    phase = rng.uniform(0, 2 * math.pi)
    cx, cy = rng.uniform(0.3, 0.7, size=2)
    r = np.hypot(xx - cx, yy - cy)
    if cls == 0:
        m = np.sin(2 * math.pi * freq * yy + phase)
    elif cls == 1:
        m = np.sin(2 * math.pi * freq * xx + phase)
    elif cls == 2:
        m = np.sin(2 * math.pi * freq * (xx + yy) / math.sqrt(2) + phase)
    elif cls == 3:
        m = np.sin(2 * math.pi * freq * (xx - yy) / math.sqrt(2) + phase)
    elif cls == 4:
        m = np.sin(2 * math.pi * freq * xx + phase) * np.sin(2 * math.pi * freq * yy + phase)
        m = np.sign(m) * np.abs(m) ** 0.5
    elif cls == 5:
        radius = rng.uniform(0.15, 0.3)
        m = np.tanh((radius - r) * 25)
    elif cls == 6:
        radius = rng.uniform(0.18, 0.3)
        width = rng.uniform(0.05, 0.09)
        m = np.tanh((width - np.abs(r - radius)) * 30)
    elif cls == 7:
        width = rng.uniform(0.06, 0.12)
        arm = np.minimum(np.abs(xx - cx), np.abs(yy - cy))
        m = np.tanh((width - arm) * 30)
    else:
        raise ConfigError(f"no procedural pattern for class {cls}")
    return m


def make_synthetic(
    n_train: int = 2000,
    n_val: int = 800,
    seed: int = 0,
    image_size: int = 16,
    noise: float = 0.2,
    num_classes: int = 8,
) -> Tuple[ArrayDataset, ArrayDataset]:
    """Deterministic procedural textures/shapes, balanced over classes.

    Each image is a class pattern rendered in random foreground/background
    colors, blended with a random distractor pattern of another class and
    corrupted by Gaussian noise of std ``noise``. Returns ``(train, val)``.
    """
    if not 2 <= num_classes <= len(SYNTHETIC_CLASSES):
        raise ConfigError(f"synthetic data supports 2..{len(SYNTHETIC_CLASSES)} classes")
    rng = np.random.default_rng(seed)
    total = n_train + n_val
    labels = np.arange(total) % num_classes
    rng.shuffle(labels)
    images = np.empty((total, 3, image_size, image_size), dtype=np.float32)
    for i, cls in enumerate(labels):
        m = _pattern(int(cls), image_size, rng)
        other = int((cls + rng.integers(1, num_classes)) % num_classes)
        distract = _pattern(other, image_size, rng)
        mix = rng.uniform(0.2, 0.45)
        m = (1 - mix) * m + mix * distract
        fg, bg = rng.uniform(-1, 1, size=(2, 3))
        img = bg[:, None, None] + (fg - bg)[:, None, None] * (m[None] + 1) / 2
        img = img * rng.uniform(0.6, 1.4) + rng.normal(0, noise, size=img.shape)
        images[i] = img
    x = torch.from_numpy(images)
    y = torch.from_numpy(labels.astype(np.int64))
    names = SYNTHETIC_CLASSES[:num_classes]
    train = ArrayDataset(x[:n_train], y[:n_train], num_classes, names)
    val = ArrayDataset(x[n_train:], y[n_train:], num_classes, names)
    return train, val


# ---------------------------------------------------------------------------
# image folders: <root>/<split>/<class>/<file>


def load_image_folder(root, split: str, image_size: Optional[int] = None,
                      class_names: Optional[Sequence[str]] = None) -> ArrayDataset:
    """Read ``<root>/<split>/<class>/<image>`` into an :class:`ArrayDataset`.

    Pixels are scaled to [0, 1] then standardized per channel over the split.
    Class indices follow ``class_names`` or sorted directory names.
    """
    from PIL import Image

    base = Path(root) / split
    if not base.is_dir():
        raise InputError(f"missing split directory {base}")
    names = list(class_names) if class_names else sorted(p.name for p in base.iterdir() if p.is_dir())
    if not names:
        raise InputError(f"no class directories under {base}")
    xs, ys = [], []
    for idx, name in enumerate(names):
        for path in sorted((base / name).iterdir()):
            if path.suffix.lower() not in IMAGE_SUFFIXES:
                continue
            img = Image.open(path).convert("RGB")
            if image_size and img.size != (image_size, image_size):
                img = img.resize((image_size, image_size), Image.BILINEAR)
            xs.append(np.asarray(img, dtype=np.float32).transpose(2, 0, 1) / 255.0)
            ys.append(idx)
    if not xs:
        raise InputError(f"no images found under {base}")
    x = torch.from_numpy(np.stack(xs))
    mean = x.mean(dim=(0, 2, 3), keepdim=True)
    std = x.std(dim=(0, 2, 3), keepdim=True).clamp_min(1e-6)
    return ArrayDataset((x - mean) / std, torch.tensor(ys), len(names), tuple(names))


def save_image_folder(data: ArrayDataset, root, split: str):
    """Write a dataset as 8-bit PNGs (min-max scaled per image)."""
    from PIL import Image

    for i in range(len(data)):
        name = data.class_names[int(data.y[i])]
        out = Path(root) / split / name
        out.mkdir(parents=True, exist_ok=True)
        img = data.x[i].numpy()
        lo, hi = img.min(), img.max()
        img = ((img - lo) / max(hi - lo, 1e-8) * 255).round().astype(np.uint8).transpose(1, 2, 0)
        Image.fromarray(img).save(out / f"{i:06d}.png")


def read_frame_folder(path, image_size: Optional[int] = None) -> torch.Tensor:
    """Frames of one clip stored as images in a directory, in filename order.

    Stands in for video decoding: returns ``T x 3 x H x W`` in [0, 1].
    """
    from PIL import Image

    frames = []
    for p in sorted(Path(path).iterdir()):
        if p.suffix.lower() not in IMAGE_SUFFIXES:
            continue
        img = Image.open(p).convert("RGB")
        if image_size:
            img = img.resize((image_size, image_size), Image.BILINEAR)
        frames.append(np.asarray(img, dtype=np.float32).transpose(2, 0, 1) / 255.0)
    if not frames:
        raise InputError(f"no frames in {path}")
    return torch.from_numpy(np.stack(frames))
