"""Synthetic shapes dataset, IDX import, and the corruption suite.

The shapes dataset exists because measuring token-label quality needs
per-pixel ground truth, which real photographs don't come with. Each image
is one of eight shape classes drawn at a random scale/position/color over a
textured background; the foreground mask is exact by construction and the
per-token mask follows by majority vote inside each patch.

Corruptions are deterministic per (seed, sample) with severity tables frozen
below; changing them would silently break mCE comparability across runs.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import convolve

from .errors import FormatError, ValidationError
from .rng import Purpose, stream

SHAPE_CLASSES = ("square", "circle", "triangle", "cross", "ring", "bar", "ell", "diamond")

CORRUPTION_KINDS = ("gaussian_noise", "shot_noise", "defocus_blur", "contrast",
                    "brightness", "pixelate")

# severity tables, index 0 = severity 1 (mild) ... index 4 = severity 5 (severe)
SEVERITY_TABLES = {
    "gaussian_noise": (0.04, 0.08, 0.12, 0.18, 0.26),   # noise stddev
    "shot_noise": (60.0, 25.0, 12.0, 5.0, 3.0),         # photons at full intensity
    "defocus_blur": (1, 2, 3, 4, 5),                    # disk kernel radius, pixels
    "contrast": (0.75, 0.6, 0.45, 0.3, 0.2),            # contrast factor
    "brightness": (0.08, 0.16, 0.24, 0.32, 0.42),       # additive offset
    "pixelate": (2, 3, 4, 6, 8),                        # block size, pixels
}

_MASK_FRACTION_RANGE = (0.05, 0.6)


@dataclass
class ShapesDataset:
    images: np.ndarray        # (S, C, H, W) float32 in [0, 1]
    labels: np.ndarray        # (S,) int64 class indices
    fg_masks: np.ndarray      # (S, H, W) bool, exact foreground
    token_masks: np.ndarray   # (S, N) bool, majority-rule per patch
    split: str
    patch_size: int
    class_names: tuple = SHAPE_CLASSES

    def __len__(self):
        return len(self.images)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)


@dataclass(frozen=True)
class CorruptionSpec:
    kind: str
    severity: int
    seed: int = 0

    def __post_init__(self):
        if self.kind not in CORRUPTION_KINDS:
            raise ValidationError(f"unknown corruption kind {self.kind!r}")
        if not 1 <= self.severity <= 5:
            raise ValidationError(f"severity must be in 1..5, got {self.severity}")


# ---------------------------------------------------------------------------
# shape rasterization


def _shape_mask(kind: str, h: int, w: int, cy: float, cx: float, s: float) -> np.ndarray:
    ys, xs = np.mgrid[0:h, 0:w]
    x = xs - cx
    y = ys - cy
    if kind == "square":
        return (np.abs(x) <= s) & (np.abs(y) <= s)
    if kind == "circle":
        return x * x + y * y <= s * s
    if kind == "triangle":
        return (y >= -s) & (y <= s) & (np.abs(x) <= (y + s) / 2)
    if kind == "cross":
        return ((np.abs(x) <= s / 3) & (np.abs(y) <= s)) | ((np.abs(y) <= s / 3) & (np.abs(x) <= s))
    if kind == "ring":
        r2 = x * x + y * y
        return (r2 <= s * s) & (r2 >= (0.55 * s) ** 2)
    if kind == "bar":
        return (np.abs(x) <= s) & (np.abs(y) <= s / 3)
    if kind == "ell":
        vertical = (x >= -s) & (x <= -s / 3) & (np.abs(y) <= s)
        horizontal = (y >= s / 3) & (y <= s) & (np.abs(x) <= s)
        return vertical | horizontal
    if kind == "diamond":
        return np.abs(x) + np.abs(y) <= s
    raise ValidationError(f"unknown shape kind {kind!r}")


def tokens_from_fg_mask(fg_mask: np.ndarray, patch_size: int) -> np.ndarray:
    """Majority rule: a token is foreground when more than half of its patch
    pixels are foreground. Returns a flat (N,) bool array in token order."""
    h, w = fg_mask.shape
    g_h, g_w = h // patch_size, w // patch_size
    blocks = fg_mask[:g_h * patch_size, :g_w * patch_size].reshape(
        g_h, patch_size, g_w, patch_size)
    counts = blocks.sum(axis=(1, 3))
    return (counts > (patch_size * patch_size) // 2).reshape(-1)


def gen_shapes(seed: int, samples: int, num_classes: int, height: int = 32,
               width: int = 32, patch_size: int = 8, split: str = "train") -> ShapesDataset:
    """Deterministic synthetic dataset with exact foreground masks."""
    if num_classes > len(SHAPE_CLASSES):
        raise ValidationError(
            f"at most {len(SHAPE_CLASSES)} shape classes available, asked for {num_classes}")
    if num_classes < 2:
        raise ValidationError("need at least 2 classes")
    if height % patch_size or width % patch_size:
        raise ValidationError("patch_size must divide image height and width")

    rng = stream(seed, Purpose.DATA_GEN, {"train": 0, "test": 1, "val": 2}.get(split, 3))
    images = np.empty((samples, 3, height, width), dtype=np.float32)
    labels = np.empty(samples, dtype=np.int64)
    fg_masks = np.empty((samples, height, width), dtype=bool)
    token_masks = np.empty((samples, (height // patch_size) * (width // patch_size)), dtype=bool)

    for i in range(samples):
        label = int(rng.integers(num_classes))
        kind = SHAPE_CLASSES[label]
        for _ in range(200):
            s = float(rng.uniform(min(height, width) * 0.22, min(height, width) * 0.45))
            cy = float(rng.uniform(s * 0.7, height - 1 - s * 0.7))
            cx = float(rng.uniform(s * 0.7, width - 1 - s * 0.7))
            mask = _shape_mask(kind, height, width, cy, cx, s)
            frac = mask.mean()
            tokens = tokens_from_fg_mask(mask, patch_size)
            if _MASK_FRACTION_RANGE[0] <= frac <= _MASK_FRACTION_RANGE[1] and tokens.any():
                break
        else:
            raise RuntimeError(f"could not place shape {kind} within constraints")

        # Background: darker direction-gradient plus elliptical "texture
        # fields" striped at random class orientations. Foreground: the
        # bright shape striped at its own class orientation. Local texture is
        # therefore class-informative everywhere - on the object it votes for
        # the image class, off the object it votes for arbitrary other
        # classes - which is the desk-scale stand-in for the local texture
        # cues that make per-patch labels meaningful in real photographs.
        g0 = rng.uniform(0.1, 0.55, size=3)
        g1 = rng.uniform(0.1, 0.55, size=3)
        angle = rng.uniform(0, 2 * np.pi)
        ys, xs = np.mgrid[0:height, 0:width]
        ramp = (np.cos(angle) * xs / (width - 1) + np.sin(angle) * ys / (height - 1))
        ramp = (ramp - ramp.min()) / max(ramp.max() - ramp.min(), 1e-9)
        img = g0[:, None, None] * (1 - ramp) + g1[:, None, None] * ramp

        def stripe_field(class_idx, phase):
            theta = np.pi * class_idx / num_classes
            return 0.5 + 0.5 * np.cos(
                2 * np.pi / 4.0 * (np.cos(theta) * xs + np.sin(theta) * ys) + phase)

        for _ in range(int(rng.integers(3, 6))):
            fy, fx = rng.uniform(0, height), rng.uniform(0, width)
            ry, rx = rng.uniform(5.0, 14.0), rng.uniform(5.0, 14.0)
            field = ((ys - fy) / ry) ** 2 + ((xs - fx) / rx) ** 2 <= 1.0
            field &= ~mask
            tex = stripe_field(int(rng.integers(num_classes)), rng.uniform(0, 2 * np.pi))
            img = np.where(field[None], img * (0.5 + 0.5 * tex[None]), img)

        color = rng.uniform(0.75, 1.0, size=3)
        fg_pixels = color[:, None, None] * (
            0.65 + 0.35 * stripe_field(label, rng.uniform(0, 2 * np.pi))[None])
        img = np.where(mask[None], fg_pixels, img)
        img += rng.uniform(-0.03, 0.03, size=(3, height, width))
        images[i] = np.clip(img, 0.0, 1.0, out=img)
        labels[i] = label
        fg_masks[i] = mask
        token_masks[i] = tokens

    return ShapesDataset(images, labels, fg_masks, token_masks, split, patch_size,
                         SHAPE_CLASSES[:num_classes])


# ---------------------------------------------------------------------------
# persistence: raw little-endian f32 blob + JSON sidecar + packed masks


def save_dataset(ds: ShapesDataset, directory: str | Path):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "images.bin").write_bytes(
        np.ascontiguousarray(ds.images, dtype="<f4").tobytes())
    (directory / "masks.bin").write_bytes(np.packbits(ds.fg_masks).tobytes())
    meta = {
        "shape": list(ds.images.shape),
        "split": ds.split,
        "class_names": list(ds.class_names),
        "labels": ds.labels.tolist(),
        "patch_size": ds.patch_size,
    }
    (directory / "meta.json").write_text(json.dumps(meta, indent=1, sort_keys=True))


def load_dataset(directory: str | Path) -> ShapesDataset:
    directory = Path(directory)
    try:
        meta = json.loads((directory / "meta.json").read_text())
        shape = tuple(meta["shape"])
        images = np.frombuffer((directory / "images.bin").read_bytes(),
                               dtype="<f4").reshape(shape).astype(np.float32)
        s, _, h, w = shape
        n_mask_bits = s * h * w
        packed = np.frombuffer((directory / "masks.bin").read_bytes(), dtype=np.uint8)
        fg = np.unpackbits(packed, count=n_mask_bits).reshape(s, h, w).astype(bool)
    except (KeyError, ValueError, OSError) as e:
        raise FormatError(f"unreadable dataset at {directory}: {e}") from e
    labels = np.asarray(meta["labels"], dtype=np.int64)
    if len(labels) != s:
        raise FormatError(f"label count {len(labels)} != image count {s}")
    patch_size = int(meta["patch_size"])
    token_masks = np.stack([tokens_from_fg_mask(m, patch_size) for m in fg])
    return ShapesDataset(images, labels, fg, token_masks, meta["split"], patch_size,
                         tuple(meta["class_names"]))


# ---------------------------------------------------------------------------
# IDX import (big-endian header, u8 payload)


def _read_idx(path: str | Path, expect_magic: int, expect_dims: int):
    raw = Path(path).read_bytes()
    if len(raw) < 4 + 4 * expect_dims:
        raise FormatError(f"{path}: truncated IDX header")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expect_magic:
        raise FormatError(f"{path}: bad IDX magic {magic:#010x}, expected {expect_magic:#010x}")
    dims = struct.unpack(f">{expect_dims}I", raw[4:4 + 4 * expect_dims])
    payload = raw[4 + 4 * expect_dims:]
    count = int(np.prod(dims, dtype=np.int64))
    if len(payload) < count:
        raise FormatError(f"{path}: payload truncated ({len(payload)} < {count} bytes)")
    return dims, np.frombuffer(payload[:count], dtype=np.uint8)


def load_idx(images_path: str | Path, labels_path: str | Path,
             image_size: int = 32) -> tuple[np.ndarray, np.ndarray]:
    """Load an IDX image/label pair, rescale to [0, 1], nearest-resize to
    image_size, and replicate grayscale to three channels."""
    (n, h, w), pixels = _read_idx(images_path, 0x00000803, 3)
    (n_lab,), labels = _read_idx(labels_path, 0x00000801, 1)
    if n != n_lab:
        raise FormatError(f"image count {n} != label count {n_lab}")
    images = pixels.reshape(n, h, w).astype(np.float32) / 255.0
    if (h, w) != (image_size, image_size):
        rows = (np.arange(image_size) * h // image_size).clip(0, h - 1)
        cols = (np.arange(image_size) * w // image_size).clip(0, w - 1)
        images = images[:, rows][:, :, cols]
    images = np.repeat(images[:, None], 3, axis=1)
    return images, labels.astype(np.int64)


# ---------------------------------------------------------------------------
# corruptions


def _pixelate(image: np.ndarray, block: int) -> np.ndarray:
    c, h, w = image.shape
    out = np.empty_like(image)
    for r0 in range(0, h, block):
        for c0 in range(0, w, block):
            patch = image[:, r0:r0 + block, c0:c0 + block]
            out[:, r0:r0 + block, c0:c0 + block] = patch.mean(axis=(1, 2), keepdims=True)
    return out


_DISK_CACHE: dict = {}


def _disk_kernel(radius: int) -> np.ndarray:
    if radius not in _DISK_CACHE:
        ys, xs = np.mgrid[-radius:radius + 1, -radius:radius + 1]
        disk = (xs * xs + ys * ys <= radius * radius).astype(np.float64)
        _DISK_CACHE[radius] = disk / disk.sum()
    return _DISK_CACHE[radius]


def corrupt(images: np.ndarray, spec: CorruptionSpec) -> np.ndarray:
    """Apply one corruption at one severity; labels, masks, and shapes are
    untouched and outputs stay in [0, 1]."""
    level = SEVERITY_TABLES[spec.kind][spec.severity - 1]
    kind_id = CORRUPTION_KINDS.index(spec.kind)
    out = np.empty_like(images)
    for i, img in enumerate(images):
        if spec.kind == "gaussian_noise":
            rng = stream(spec.seed, Purpose.CORRUPT, kind_id, spec.severity, i)
            noisy = img + rng.normal(0.0, level, size=img.shape)
        elif spec.kind == "shot_noise":
            rng = stream(spec.seed, Purpose.CORRUPT, kind_id, spec.severity, i)
            noisy = rng.poisson(np.clip(img, 0, 1) * level) / level
        elif spec.kind == "defocus_blur":
            kernel = _disk_kernel(int(level))[None]
            noisy = convolve(img.astype(np.float64), kernel, mode="reflect")
        elif spec.kind == "contrast":
            mean = img.mean(axis=(1, 2), keepdims=True)
            noisy = (img - mean) * level + mean
        elif spec.kind == "brightness":
            noisy = img + level
        elif spec.kind == "pixelate":
            noisy = _pixelate(img, int(level))
        else:  # unreachable, CorruptionSpec validates
            raise ValidationError(spec.kind)
        out[i] = np.clip(noisy, 0.0, 1.0)
    return out


def corruption_grid(seed: int = 0):
    """All (kind, severity) specs of the frozen benchmark grid."""
    return [CorruptionSpec(kind, sev, seed) for kind in CORRUPTION_KINDS
            for sev in range(1, 6)]
