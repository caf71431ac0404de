"""Dataset ingestion, procedural stand-ins, and composite distractor construction.

All images are float32 tensors of shape (N, C, 32, 32) with values in [0, 1].
Builders are pure functions of (inputs, seed): two calls with the same
arguments produce bit-identical tensors.

Two dataset families are supported:

* the standard small-image benchmarks (``mnist``, ``fashion_mnist``,
  ``cifar10``, ``svhn``), fetched through torchvision into a local cache;
* a procedural stand-in family (``synth_digits``, ``synth_garments``,
  ``synth_textures``, ``synth_colordigits``) generated offline from a seed,
  for environments where the benchmark downloads are unavailable. The
  stand-ins mirror the complexity ordering of their counterparts (sparse
  strokes < textured silhouettes < full-field color texture).
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image, ImageDraw, ImageFont

from .errors import ConfigurationError, IngestionError, ShapeError, ValidationError

IMAGE_SIZE = 32
# Bump when any procedural generator changes; cache keys include it.
DATA_VERSION = 9
REAL_NAMES = ("mnist", "fashion_mnist", "cifar10", "svhn")
SYNTH_NAMES = ("synth_digits", "synth_garments", "synth_textures", "synth_colordigits")
COMPOSITE_KINDS = ("side_by_side", "uniform_noise", "interpolated", "stripes")

SYNTH_TRAIN_SIZE = 3000
SYNTH_TEST_SIZE = 1000

# Stripe overlay geometry: repeating stripes every STRIPE_PERIOD pixels,
# STRIPE_WIDTH pixels thick, alpha-blended at STRIPE_ALPHA.
STRIPE_PERIOD = 4
STRIPE_WIDTH = 2
STRIPE_ALPHA = 0.5

DEFAULT_NOISE_AMPLITUDE = 0.5
DEFAULT_MIX_WEIGHT = 0.5


@dataclass(frozen=True)
class LabeledDataset:
    """An image classification dataset with fixed 32x32 geometry.

    ``distractor_side`` is populated only by :func:`build_side_by_side`:
    0 means the distractor occupies columns 0-15, 1 means columns 16-31.
    """

    name: str
    split: str
    images: torch.Tensor
    labels: torch.Tensor
    num_classes: int
    distractor_side: torch.Tensor | None = None

    def __post_init__(self):
        img, lab = self.images, self.labels
        if img.dim() != 4 or img.shape[2] != IMAGE_SIZE or img.shape[3] != IMAGE_SIZE:
            raise ShapeError(f"images must be (N, C, 32, 32), got {tuple(img.shape)}")
        if img.shape[1] not in (1, 3):
            raise ShapeError(f"channel count must be 1 or 3, got {img.shape[1]}")
        if img.shape[0] != lab.shape[0]:
            raise ShapeError(
                f"image/label count mismatch: {img.shape[0]} vs {lab.shape[0]}"
            )
        if img.numel() and (img.min().item() < 0.0 or img.max().item() > 1.0):
            raise ValidationError("pixel values outside [0, 1]")
        if lab.numel() and (lab.min().item() < 0 or lab.max().item() >= self.num_classes):
            raise ValidationError(f"labels outside [0, {self.num_classes})")
        if self.distractor_side is not None and self.distractor_side.shape[0] != img.shape[0]:
            raise ShapeError("distractor_side length must match image count")

    def __len__(self):
        return self.images.shape[0]

    def subset(self, n: int, seed: int = 0) -> "LabeledDataset":
        """Seeded class-stratified subset of size <= n."""
        if n >= len(self):
            return self
        rng = np.random.default_rng(seed)
        per_class = n // self.num_classes
        labels = self.labels.numpy()
        picks = []
        for c in range(self.num_classes):
            idx = np.flatnonzero(labels == c)
            take = min(per_class, idx.size)
            picks.append(rng.choice(idx, size=take, replace=False))
        idx = np.sort(np.concatenate(picks))
        t = torch.from_numpy(idx)
        side = self.distractor_side[t] if self.distractor_side is not None else None
        return replace(self, images=self.images[t], labels=self.labels[t], distractor_side=side)

    def with_channels(self, channels: int) -> "LabeledDataset":
        """Channel-replicate grayscale data to RGB (or pass through)."""
        if self.images.shape[1] == channels:
            return self
        if self.images.shape[1] == 1 and channels == 3:
            return replace(self, images=self.images.repeat(1, 3, 1, 1))
        raise ShapeError(f"cannot convert {self.images.shape[1]} channels to {channels}")


@dataclass(frozen=True)
class CompositeSpec:
    """Parameters for one composite distractor dataset."""

    kind: str
    seed: int
    mix_weight: float = DEFAULT_MIX_WEIGHT
    noise_amplitude: float = DEFAULT_NOISE_AMPLITUDE

    def __post_init__(self):
        if self.kind not in COMPOSITE_KINDS:
            raise ConfigurationError(f"unknown composite kind {self.kind!r}")

    def required_bases(self, family: str) -> tuple[str, ...]:
        digits = "synth_digits" if family == "synth" else "mnist"
        garments = "synth_garments" if family == "synth" else "fashion_mnist"
        textures = "synth_textures" if family == "synth" else "cifar10"
        return {
            "side_by_side": (digits, garments),
            "uniform_noise": (digits,),
            "interpolated": (digits, textures),
            "stripes": (textures,),
        }[self.kind]


# ---------------------------------------------------------------------------
# Benchmark loaders
# ---------------------------------------------------------------------------


def _to_tensor_32(images_u8: np.ndarray) -> torch.Tensor:
    """uint8 (N, H, W[, C]) -> float32 (N, C, 32, 32), padding 28x28 inputs."""
    if images_u8.ndim == 3:
        images_u8 = images_u8[:, :, :, None]
    x = torch.from_numpy(images_u8).permute(0, 3, 1, 2).float() / 255.0
    if x.shape[2] == 28:
        x = F.pad(x, (2, 2, 2, 2))
    if x.shape[2] != IMAGE_SIZE:
        raise ShapeError(f"unsupported source size {x.shape[2]}")
    return x


def _load_real(name: str, split: str, cache_dir: Path) -> LabeledDataset:
    import torchvision.datasets as tvd

    root = str(cache_dir / "raw")
    train = split == "train"
    try:
        if name == "mnist":
            ds = tvd.MNIST(root, train=train, download=True)
            images, labels = ds.data.numpy(), ds.targets.numpy()
        elif name == "fashion_mnist":
            ds = tvd.FashionMNIST(root, train=train, download=True)
            images, labels = ds.data.numpy(), ds.targets.numpy()
        elif name == "cifar10":
            ds = tvd.CIFAR10(root, train=train, download=True)
            images, labels = ds.data, np.asarray(ds.targets)
        elif name == "svhn":
            ds = tvd.SVHN(root, split="train" if train else "test", download=True)
            images, labels = ds.data.transpose(0, 2, 3, 1), ds.labels
        else:  # pragma: no cover - guarded by load_dataset
            raise ConfigurationError(name)
    except (OSError, RuntimeError) as exc:
        raise IngestionError(
            f"could not fetch {name!r} into {root}: {exc}; "
            "check network access or pre-populate the cache, then retry"
        ) from exc
    return LabeledDataset(
        name=name,
        split=split,
        images=_to_tensor_32(np.ascontiguousarray(images)),
        labels=torch.from_numpy(np.ascontiguousarray(labels)).long(),
        num_classes=10,
    )


# ---------------------------------------------------------------------------
# Procedural stand-ins
# ---------------------------------------------------------------------------

_FONT_CACHE: dict[int, ImageFont.FreeTypeFont] = {}


def _font(size: int):
    if size not in _FONT_CACHE:
        _FONT_CACHE[size] = ImageFont.load_default(size=size)
    return _FONT_CACHE[size]


def _quantize(x: np.ndarray) -> np.ndarray:
    """Snap to the 8-bit grid so PNG caching is lossless."""
    return np.round(np.clip(x, 0.0, 1.0) * 255.0).astype(np.float32) / 255.0


def _glyph_mask(rng: np.random.Generator, char: str) -> np.ndarray:
    """Render one character with random pose jitter; returns float [0,1] 32x32.

    Stroke width 1 keeps the ink fraction near the handwritten-digit
    benchmarks' (~0.18) rather than thin-font sparsity.
    """
    size = int(rng.integers(22, 27))
    canvas = Image.new("L", (48, 48), 0)
    draw = ImageDraw.Draw(canvas)
    draw.text((17, 11), char, fill=255, font=_font(size), stroke_width=1, stroke_fill=255)
    angle = float(rng.uniform(-8.0, 8.0))
    canvas = canvas.rotate(angle, resample=Image.BILINEAR, center=(24, 24))
    dx, dy = int(rng.integers(-2, 3)), int(rng.integers(-2, 3))
    box = (8 + dx, 8 + dy, 40 + dx, 40 + dy)
    return np.asarray(canvas.crop(box), dtype=np.float32) / 255.0


def _smooth_field(rng: np.random.Generator, octaves=((4, 0.5), (8, 0.3), (16, 0.2))) -> np.ndarray:
    """Multi-octave smooth noise in roughly [-1, 1], shape 32x32."""
    out = np.zeros((IMAGE_SIZE, IMAGE_SIZE), dtype=np.float32)
    for grid, weight in octaves:
        coarse = rng.standard_normal((grid, grid)).astype(np.float32)
        up = Image.fromarray(coarse, mode="F").resize((IMAGE_SIZE, IMAGE_SIZE), Image.BILINEAR)
        out += weight * np.asarray(up, dtype=np.float32)
    return out


def _gen_digits(n: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 10, size=n)
    images = np.zeros((n, 1, IMAGE_SIZE, IMAGE_SIZE), dtype=np.float32)
    for i in range(n):
        mask = _glyph_mask(rng, str(labels[i]))
        intensity = float(rng.uniform(0.75, 1.0))
        images[i, 0] = _quantize(mask * intensity)
    return images, labels


def _garment_mask(rng: np.random.Generator, cls: int) -> np.ndarray:
    """Filled silhouette for one of ten garment-like classes."""
    img = Image.new("L", (IMAGE_SIZE, IMAGE_SIZE), 0)
    d = ImageDraw.Draw(img)
    j = lambda a, b: int(rng.integers(a, b + 1))  # noqa: E731 - terse jitter helper
    if cls == 0:  # tee: torso + short sleeves
        d.rectangle([10, 8, 21, 27], fill=255)
        d.polygon([(10, 8), (4, 13), (7, 16), (10, 12)], fill=255)
        d.polygon([(21, 8), (27, 13), (24, 16), (21, 12)], fill=255)
    elif cls == 1:  # trousers: two legs
        d.polygon([(10, 5), (21, 5), (19, 27), (16, 27), (16, 14), (15, 14), (12, 27), (9, 27)], fill=255)
    elif cls == 2:  # pullover: wide torso + long sleeves
        d.rectangle([9, 7, 22, 26], fill=255)
        d.rectangle([4, 8, 8, 24], fill=255)
        d.rectangle([23, 8, 27, 24], fill=255)
    elif cls == 3:  # dress: trapezoid
        d.polygon([(13, 5), (18, 5), (24, 28), (7, 28)], fill=255)
    elif cls == 4:  # coat: long rectangle with split
        d.rectangle([8, 5, 23, 28], fill=255)
        d.line([(16, 14), (16, 28)], fill=0, width=1)
    elif cls == 5:  # sandal: stacked bars
        d.rectangle([5, 20, 27, 23], fill=255)
        d.rectangle([8, 14, 24, 16], fill=255)
        d.rectangle([12, 8, 20, 10], fill=255)
    elif cls == 6:  # shirt: torso + collar notch
        d.rectangle([10, 8, 21, 27], fill=255)
        d.polygon([(13, 8), (18, 8), (16, 13)], fill=0)
        d.rectangle([5, 9, 9, 20], fill=255)
        d.rectangle([22, 9, 26, 20], fill=255)
    elif cls == 7:  # sneaker: low wedge
        d.polygon([(4, 24), (10, 15), (20, 15), (28, 20), (28, 26), (4, 26)], fill=255)
    elif cls == 8:  # bag: box with handle
        d.rectangle([7, 14, 25, 27], fill=255)
        d.arc([10, 6, 22, 18], start=180, end=360, fill=255, width=2)
    else:  # boot: tall L shape
        d.rectangle([11, 6, 19, 22], fill=255)
        d.rectangle([11, 20, 26, 27], fill=255)
    angle = float(rng.uniform(-8.0, 8.0))
    img = img.rotate(angle, resample=Image.BILINEAR, center=(16, 16))
    dx, dy = j(-2, 2), j(-2, 2)
    arr = np.asarray(img, dtype=np.float32) / 255.0
    arr = np.roll(arr, (dy, dx), axis=(0, 1))
    return arr


def _gen_garments(n: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 10, size=n)
    images = np.zeros((n, 1, IMAGE_SIZE, IMAGE_SIZE), dtype=np.float32)
    for i in range(n):
        mask = _garment_mask(rng, int(labels[i]))
        base = float(rng.uniform(0.55, 0.85))
        texture = 1.0 + 0.22 * _smooth_field(rng) + 0.10 * rng.standard_normal(mask.shape).astype(np.float32)
        images[i, 0] = _quantize(mask * base * texture)
    return images, labels


_TEXTURE_SHAPES = 5  # classes are (shape, fill) pairs: shape + 5 * striped


def _hsv_to_rgb(h: np.ndarray, s: np.ndarray, v: np.ndarray) -> np.ndarray:
    i = np.floor(h * 6.0)
    f = h * 6.0 - i
    p, q, t = v * (1 - s), v * (1 - f * s), v * (1 - (1 - f) * s)
    i = i.astype(int) % 6
    out = np.select(
        [i == 0, i == 1, i == 2, i == 3, i == 4, i == 5],
        [
            np.stack([v, t, p]), np.stack([q, v, p]), np.stack([p, v, t]),
            np.stack([p, q, v]), np.stack([t, p, v]), np.stack([v, p, q]),
        ],
    )
    return out


def _shape_mask(rng: np.random.Generator, shape: int) -> np.ndarray:
    """Foreground silhouettes for the texture stand-in's five base shapes."""
    img = Image.new("L", (IMAGE_SIZE, IMAGE_SIZE), 0)
    d = ImageDraw.Draw(img)
    cx, cy = int(rng.integers(13, 20)), int(rng.integers(13, 20))
    r = int(rng.integers(8, 12))
    if shape == 0:
        d.ellipse([cx - r, cy - r, cx + r, cy + r], fill=255)
    elif shape == 1:
        d.rectangle([cx - r, cy - r, cx + r, cy + r], fill=255)
    elif shape == 2:
        d.polygon([(cx, cy - r), (cx + r, cy + r), (cx - r, cy + r)], fill=255)
    elif shape == 3:
        d.polygon([(cx, cy - r), (cx + r, cy), (cx, cy + r), (cx - r, cy)], fill=255)
    else:
        w = max(2, r // 2)
        d.rectangle([cx - r, cy - w, cx + r, cy + w], fill=255)
        d.rectangle([cx - w, cy - r, cx + w, cy + r], fill=255)
    return np.asarray(img, dtype=np.float32) / 255.0


def _gen_textures(n: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Ten classes = five shapes x {smooth fill, striped fill}.

    Hue is uninformative, so the label rests on the shape and on the fine
    grating inside it; removing high-frequency content merges the class
    pairs, which is the degradation mode natural photo classes exhibit.
    """
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 10, size=n)
    images = np.zeros((n, 3, IMAGE_SIZE, IMAGE_SIZE), dtype=np.float32)
    yy, xx = np.meshgrid(np.arange(IMAGE_SIZE), np.arange(IMAGE_SIZE), indexing="ij")
    for i in range(n):
        cls = int(labels[i])
        shape, striped = cls % _TEXTURE_SHAPES, cls >= _TEXTURE_SHAPES
        hue_bg = rng.uniform(0.0, 1.0)
        sat = 0.35 + 0.25 * (_smooth_field(rng) * 0.5 + 0.5)
        val = np.clip(0.45 + 0.30 * _smooth_field(rng), 0.05, 0.95)
        h_field = (hue_bg + 0.12 * _smooth_field(rng)) % 1.0
        bg = _hsv_to_rgb(h_field, np.clip(sat, 0, 1), val)
        # Per-image grain amplitude: natural scenes mix smooth and busy
        # content, and the corpus needs both regimes represented.
        grain_amp = float(rng.uniform(0.0, 0.12))
        grain = grain_amp * rng.standard_normal((3, IMAGE_SIZE, IMAGE_SIZE)).astype(np.float32)
        bg = np.clip(bg + grain, 0.0, 1.0)
        mask = _shape_mask(rng, shape)
        # Foreground hue encodes the shape factor (a cheap, robust cue); the
        # fill factor is carried only by the fine grating.
        hue_fg = (shape / _TEXTURE_SHAPES + rng.uniform(-0.04, 0.04)) % 1.0
        base_val = np.clip(0.72 + 0.15 * _smooth_field(rng), 0.25, 1.0)
        if striped:
            period = int(rng.integers(3, 5))
            phase = int(rng.integers(0, period))
            grating = (((yy + phase) % period) < period // 2).astype(np.float32)
            if rng.integers(0, 2):
                grating = (((xx + phase) % period) < period // 2).astype(np.float32)
            base_val = np.clip(base_val * (0.55 + 0.6 * grating), 0.0, 1.0)
        fg = _hsv_to_rgb(
            np.full(mask.shape, hue_fg, dtype=np.float32),
            np.full(mask.shape, 0.85, dtype=np.float32),
            base_val.astype(np.float32),
        )
        images[i] = _quantize(bg * (1 - mask) + fg * mask)
    return images, labels


def _gen_colordigits(n: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Digits on near-flat colored plaques (the house-number look); the flat
    backgrounds keep constant-color statistics represented in the corpus."""
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 10, size=n)
    images = np.zeros((n, 3, IMAGE_SIZE, IMAGE_SIZE), dtype=np.float32)
    for i in range(n):
        mask = _glyph_mask(rng, str(labels[i]))
        hue_bg = rng.uniform(0.0, 1.0)
        val = np.clip(float(rng.uniform(0.0, 1.0)) + 0.01 * _smooth_field(rng), 0.0, 1.0)
        bg = _hsv_to_rgb(
            np.full(mask.shape, hue_bg, dtype=np.float32),
            np.full(mask.shape, float(rng.uniform(0.0, 1.0)), dtype=np.float32),
            val.astype(np.float32),
        )
        hue_fg = (hue_bg + rng.uniform(0.3, 0.7)) % 1.0
        fg = _hsv_to_rgb(
            np.full(mask.shape, hue_fg, dtype=np.float32),
            np.full(mask.shape, 0.9, dtype=np.float32),
            np.full(mask.shape, float(rng.uniform(0.8, 1.0)), dtype=np.float32),
        )
        images[i] = _quantize(bg * (1 - mask) + fg * mask)
    return images, labels


_SYNTH_GENERATORS = {
    "synth_digits": _gen_digits,
    "synth_garments": _gen_garments,
    "synth_textures": _gen_textures,
    "synth_colordigits": _gen_colordigits,
}


def _load_synth(name: str, split: str, seed: int, size: int | None = None) -> LabeledDataset:
    n = size if size is not None else (SYNTH_TRAIN_SIZE if split == "train" else SYNTH_TEST_SIZE)
    # Distinct streams per (name, split, seed) so train/test never overlap.
    key = f"{name}/{split}/{seed}".encode()
    stream_seed = int.from_bytes(hashlib.sha256(key).digest()[:8], "little")
    images, labels = _SYNTH_GENERATORS[name](n, stream_seed)
    return LabeledDataset(
        name=name,
        split=split,
        images=torch.from_numpy(images),
        labels=torch.from_numpy(labels).long(),
        num_classes=10,
    )


def load_dataset(
    name: str,
    split: str,
    cache_dir: str | os.PathLike | None = None,
    seed: int = 0,
    size: int | None = None,
) -> LabeledDataset:
    """Load a base dataset by name.

    ``size`` truncates procedural stand-ins (ignored for benchmarks, whose
    canonical split sizes are part of the contract).
    """
    if split not in ("train", "test"):
        raise ConfigurationError(f"split must be 'train' or 'test', got {split!r}")
    if name in SYNTH_NAMES:
        return _load_synth(name, split, seed, size)
    if name in REAL_NAMES:
        if cache_dir is None:
            cache_dir = os.environ.get("MINBITS_CACHE_DIR", "cache")
        cache_dir = Path(cache_dir)
        cache_dir.mkdir(parents=True, exist_ok=True)
        return _load_real(name, split, cache_dir)
    raise ConfigurationError(
        f"unknown dataset {name!r}; expected one of {REAL_NAMES + SYNTH_NAMES}"
    )


# ---------------------------------------------------------------------------
# Composite builders
# ---------------------------------------------------------------------------


def _halve_width(images: torch.Tensor) -> torch.Tensor:
    """32x32 -> 32 rows x 16 cols by area interpolation (exact 2x column average)."""
    return F.avg_pool2d(images, kernel_size=(1, 2))


def build_side_by_side(mnist: LabeledDataset, fashion: LabeledDataset, seed: int) -> LabeledDataset:
    """Concatenate a rescaled digit and a rescaled garment side by side.

    The digit's label is the target; which half holds the garment is chosen
    per example by the seeded RNG and recorded in ``distractor_side``.
    """
    if mnist.images.shape[1] != 1 or fashion.images.shape[1] != 1:
        raise ShapeError("side_by_side requires single-channel inputs")
    n = len(mnist)
    rng = np.random.default_rng(seed)
    pair_idx = rng.integers(0, len(fashion), size=n)
    digit_left = rng.integers(0, 2, size=n)  # 1 -> digit occupies columns 0-15
    digit_half = _halve_width(mnist.images)
    garment_half = _halve_width(fashion.images[torch.from_numpy(pair_idx)])
    left = torch.where(
        torch.from_numpy(digit_left).bool().view(-1, 1, 1, 1), digit_half, garment_half
    )
    right = torch.where(
        torch.from_numpy(digit_left).bool().view(-1, 1, 1, 1), garment_half, digit_half
    )
    images = torch.cat([left, right], dim=3)
    distractor_side = torch.from_numpy(digit_left.astype(np.uint8))  # digit left -> distractor right (1)
    return LabeledDataset(
        name="side_by_side",
        split=mnist.split,
        images=images,
        labels=mnist.labels.clone(),
        num_classes=mnist.num_classes,
        distractor_side=distractor_side,
    )


def build_uniform_noise(mnist: LabeledDataset, amplitude: float, seed: int) -> LabeledDataset:
    """Add clipped uniform noise of the given amplitude to every pixel."""
    if not (0.0 < amplitude <= 1.0):
        raise ConfigurationError(f"amplitude must be in (0, 1], got {amplitude}")
    rng = np.random.default_rng(seed)
    noise = torch.from_numpy(
        rng.uniform(0.0, 1.0, size=tuple(mnist.images.shape)).astype(np.float32)
    )
    images = torch.clamp(mnist.images + amplitude * noise, 0.0, 1.0)
    return LabeledDataset(
        name="uniform_noise",
        split=mnist.split,
        images=images,
        labels=mnist.labels.clone(),
        num_classes=mnist.num_classes,
    )


def build_interpolated(
    mnist: LabeledDataset, cifar: LabeledDataset, mix_weight: float, seed: int
) -> LabeledDataset:
    """Convex combination of a digit image and a seeded texture image."""
    if not (0.0 < mix_weight <= 1.0):
        raise ConfigurationError(f"mix_weight must be in (0, 1], got {mix_weight}")
    digits = mnist.with_channels(3)
    if cifar.images.shape[1] != 3:
        raise ShapeError("interpolated requires a 3-channel second dataset")
    rng = np.random.default_rng(seed)
    pair_idx = torch.from_numpy(rng.integers(0, len(cifar), size=len(digits)))
    images = mix_weight * digits.images + (1.0 - mix_weight) * cifar.images[pair_idx]
    return LabeledDataset(
        name="interpolated",
        split=mnist.split,
        images=images,
        labels=mnist.labels.clone(),
        num_classes=mnist.num_classes,
    )


def stripe_pattern(orientation: int) -> torch.Tensor:
    """Binary 32x32 stripe mask; orientation 0 = horizontal rows, 1 = vertical columns."""
    line = (torch.arange(IMAGE_SIZE) % STRIPE_PERIOD) < STRIPE_WIDTH
    if orientation == 0:
        return line.float().view(IMAGE_SIZE, 1).expand(IMAGE_SIZE, IMAGE_SIZE)
    return line.float().view(1, IMAGE_SIZE).expand(IMAGE_SIZE, IMAGE_SIZE)


def build_stripes(cifar: LabeledDataset, seed: int) -> LabeledDataset:
    """Overlay horizontal or vertical stripes; the orientation is the label."""
    if cifar.images.shape[1] != 3:
        raise ShapeError("stripes requires 3-channel inputs")
    rng = np.random.default_rng(seed)
    orientation = rng.integers(0, 2, size=len(cifar))
    masks = torch.stack([stripe_pattern(0), stripe_pattern(1)])[
        torch.from_numpy(orientation)
    ].unsqueeze(1)
    images = cifar.images * (1.0 - STRIPE_ALPHA * masks) + STRIPE_ALPHA * masks
    return LabeledDataset(
        name="stripes",
        split=cifar.split,
        images=images,
        labels=torch.from_numpy(orientation).long(),
        num_classes=2,
    )


def get_dataset(
    name: str,
    split: str,
    cache_dir: str | os.PathLike | None = None,
    seed: int = 0,
    family: str = "synth",
    size: int | None = None,
    spec: CompositeSpec | None = None,
) -> LabeledDataset:
    """Resolve a base or composite dataset name for the CLI and harnesses."""
    if name in REAL_NAMES or name in SYNTH_NAMES:
        return load_dataset(name, split, cache_dir, seed=seed, size=size)
    if name not in COMPOSITE_KINDS:
        raise ConfigurationError(f"unknown dataset {name!r}")
    spec = spec or CompositeSpec(kind=name, seed=seed)
    bases = [
        load_dataset(b, split, cache_dir, seed=seed, size=size)
        for b in spec.required_bases(family)
    ]
    if name == "side_by_side":
        return build_side_by_side(bases[0], bases[1], spec.seed)
    if name == "uniform_noise":
        return build_uniform_noise(bases[0], spec.noise_amplitude, spec.seed)
    if name == "interpolated":
        return build_interpolated(bases[0], bases[1], spec.mix_weight, spec.seed)
    return build_stripes(bases[0], spec.seed)


def scorer_corpus(datasets: list[LabeledDataset]) -> torch.Tensor:
    """Union of several datasets as one 3-channel image tensor."""
    return torch.cat([d.with_channels(3).images for d in datasets], dim=0)


# ---------------------------------------------------------------------------
# PNG cache (external interface)
# ---------------------------------------------------------------------------


def _dataset_checksum(images_u8: np.ndarray, labels: np.ndarray) -> str:
    h = hashlib.sha256()
    h.update(images_u8.tobytes())
    h.update(labels.astype(np.int64).tobytes())
    return h.hexdigest()


def save_dataset_cache(ds: LabeledDataset, cache_dir: str | os.PathLike, seed: int = 0) -> Path:
    """Materialize a dataset as 8-bit PNGs plus a JSON manifest and label index.

    Writing is guarded by an exclusive lock file; concurrent readers may use
    the directory once the manifest exists.
    """
    out = Path(cache_dir) / ds.name / ds.split
    out.mkdir(parents=True, exist_ok=True)
    lock = out / ".lock"
    fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    try:
        images_u8 = (ds.images.numpy() * 255.0).round().astype(np.uint8)
        for i in range(len(ds)):
            arr = images_u8[i].transpose(1, 2, 0).squeeze()
            Image.fromarray(arr).save(out / f"img{i:06d}.png")
        index = {
            "labels": ds.labels.tolist(),
            "num_classes": ds.num_classes,
            "distractor_side": ds.distractor_side.tolist() if ds.distractor_side is not None else None,
        }
        (out / "labels.json").write_text(json.dumps(index))
        manifest = {
            "name": ds.name,
            "split": ds.split,
            "seed": seed,
            "count": len(ds),
            "channels": int(ds.images.shape[1]),
            "checksum": _dataset_checksum(images_u8, ds.labels.numpy()),
        }
        (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
    finally:
        os.close(fd)
        os.unlink(lock)
    return out


def load_dataset_cache(name: str, split: str, cache_dir: str | os.PathLike) -> LabeledDataset:
    """Read a dataset previously written by :func:`save_dataset_cache`."""
    src = Path(cache_dir) / name / split
    manifest_path = src / "manifest.json"
    if not manifest_path.exists():
        raise IngestionError(f"no cached dataset at {src}; build and save it first")
    manifest = json.loads(manifest_path.read_text())
    index = json.loads((src / "labels.json").read_text())
    n, c = manifest["count"], manifest["channels"]
    images_u8 = np.zeros((n, c, IMAGE_SIZE, IMAGE_SIZE), dtype=np.uint8)
    for i in range(n):
        arr = np.asarray(Image.open(src / f"img{i:06d}.png"))
        if arr.ndim == 2:
            arr = arr[None]
        else:
            arr = arr.transpose(2, 0, 1)
        images_u8[i] = arr
    labels = np.asarray(index["labels"], dtype=np.int64)
    if _dataset_checksum(images_u8, labels) != manifest["checksum"]:
        raise IngestionError(f"checksum mismatch in {src}; delete the cache and retry")
    side = index.get("distractor_side")
    return LabeledDataset(
        name=name,
        split=split,
        images=torch.from_numpy(images_u8.astype(np.float32) / 255.0),
        labels=torch.from_numpy(labels),
        num_classes=index["num_classes"],
        distractor_side=torch.tensor(side, dtype=torch.uint8) if side is not None else None,
    )
