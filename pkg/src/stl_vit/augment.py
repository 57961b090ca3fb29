"""Two-view augmentation pipeline.

Every sample passes through a shared spatial stage (flip / rotate / shear /
translate) that produces the teacher view. The student view starts from the
same spatially-warped image and additionally receives photometric noise,
cutout, and optionally mixup or cutmix. Keeping the spatial stage shared is
what makes the teacher's token labels line up with the student's patches.

All draws are pure functions of (seed, sample id, epoch), so the pipeline is
replayable and parallelizable per sample.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np

from .errors import ValidationError
from .rng import Purpose, stream

PHOTOMETRIC_OPS = ("brightness", "contrast", "posterize", "solarize")
MAX_MAGNITUDE = 31


@dataclass(frozen=True)
class SpatialAug:
    """One draw of the shared spatial stage."""

    hflip: bool = False
    rotate_deg: float = 0.0
    shear: float = 0.0
    translate: tuple = (0.0, 0.0)   # fractions of width/height

    @property
    def is_identity(self) -> bool:
        return (not self.hflip and self.rotate_deg == 0.0 and self.shear == 0.0
                and self.translate == (0.0, 0.0))


@dataclass(frozen=True)
class SpatialBounds:
    rotate_deg: float = 15.0
    shear: float = 0.1
    translate: float = 0.1
    hflip_prob: float = 0.5

    def __post_init__(self):
        if self.rotate_deg < 0 or self.shear < 0 or self.translate < 0:
            raise ValidationError("spatial bounds must be non-negative")
        if not 0.0 <= self.hflip_prob <= 1.0:
            raise ValidationError("hflip_prob must be in [0, 1]")


@dataclass(frozen=True)
class MixSpec:
    """Batch-level mixing applied to one sample."""

    mode: str                 # "mixup" | "cutmix"
    lam: float                # weight of the sample's own content
    partner: int              # batch index of the partner sample
    region: tuple | None      # (r0, c0, h, w) in pixels, patch-aligned (cutmix only)


@dataclass(frozen=True)
class StrongAug:
    """One draw of the student-only strong stage."""

    photometric: tuple = ()         # ((op_name, parameter), ...)
    cutout_box: tuple | None = None  # (r0, c0, h, w) in pixels
    mix: MixSpec | None = None


@dataclass(frozen=True)
class StrongConfig:
    num_ops: int = 2
    magnitude: int = 9             # out of MAX_MAGNITUDE, as in "RandAug 9/0.5"
    op_prob: float = 0.5
    ops: tuple = PHOTOMETRIC_OPS
    cutout_prob: float = 0.3
    cutout_size: int = 8
    mixup_alpha: float = 0.8
    cutmix_alpha: float = 1.0
    mixup: bool = True
    cutmix: bool = True

    def __post_init__(self):
        if not 0 <= self.magnitude <= MAX_MAGNITUDE:
            raise ValidationError(f"magnitude must be in [0, {MAX_MAGNITUDE}]")
        if not 0.0 <= self.op_prob <= 1.0 or not 0.0 <= self.cutout_prob <= 1.0:
            raise ValidationError("probabilities must be in [0, 1]")
        unknown = set(self.ops) - set(PHOTOMETRIC_OPS)
        if unknown:
            raise ValidationError(f"unknown photometric ops: {sorted(unknown)}")


@dataclass(frozen=True)
class AugmentConfig:
    spatial: SpatialBounds = field(default_factory=SpatialBounds)
    strong: StrongConfig = field(default_factory=StrongConfig)
    strong_enabled: bool = True

    def to_dict(self) -> dict:
        return {
            "spatial": {f.name: getattr(self.spatial, f.name) for f in fields(self.spatial)},
            "strong": {f.name: list(v) if isinstance(v := getattr(self.strong, f.name), tuple)
                       else v for f in fields(self.strong)},
            "strong_enabled": self.strong_enabled,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AugmentConfig":
        known = {"spatial", "strong", "strong_enabled"}
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"unknown augment config keys: {sorted(unknown)}")
        spatial = SpatialBounds(**d.get("spatial", {}))
        strong_d = dict(d.get("strong", {}))
        if "ops" in strong_d:
            strong_d["ops"] = tuple(strong_d["ops"])
        strong = StrongConfig(**strong_d)
        return cls(spatial=spatial, strong=strong,
                   strong_enabled=d.get("strong_enabled", True))


@dataclass
class TwoViewBatch:
    teacher_view: np.ndarray      # (B, C, H, W) shared-spatial-stage output only
    student_view: np.ndarray      # (B, C, H, W) fully augmented
    spatial: list                 # SpatialAug per sample (identical for both views)
    strong: list                  # StrongAug per sample (identity when disabled)
    mix_meta: list                # MixSpec or None per sample
    class_targets: np.ndarray     # (B, K), smoothed then mixed
    sample_ids: np.ndarray


# ---------------------------------------------------------------------------
# spatial stage


def sample_spatial(seed: int, sample_id: int, epoch: int, bounds: SpatialBounds) -> SpatialAug:
    """Deterministic draw of the shared spatial parameters."""
    rng = stream(seed, Purpose.SPATIAL, epoch, sample_id)
    hflip = bool(rng.random() < bounds.hflip_prob)
    rotate = float(rng.uniform(-bounds.rotate_deg, bounds.rotate_deg)) if bounds.rotate_deg else 0.0
    shear = float(rng.uniform(-bounds.shear, bounds.shear)) if bounds.shear else 0.0
    if bounds.translate:
        translate = (float(rng.uniform(-bounds.translate, bounds.translate)),
                     float(rng.uniform(-bounds.translate, bounds.translate)))
    else:
        translate = (0.0, 0.0)
    return SpatialAug(hflip=hflip, rotate_deg=rotate, shear=shear, translate=translate)


def apply_spatial(image: np.ndarray, aug: SpatialAug) -> np.ndarray:
    """Affine warp (bilinear, zero padding). Identity and pure flips bypass
    interpolation so they stay bit-exact."""
    if aug.is_identity:
        return image.copy()
    if aug.rotate_deg == 0.0 and aug.shear == 0.0 and aug.translate == (0.0, 0.0):
        return image[..., ::-1].copy()

    c, h, w = image.shape
    theta = np.deg2rad(aug.rotate_deg)
    cos_t, sin_t = np.cos(theta), np.sin(theta)
    # forward map: p_out = T * Shear * Rot * Flip * (p_in - center) + center + t
    # in (x, y) coordinates with y pointing down rows
    rot = np.array([[cos_t, -sin_t], [sin_t, cos_t]])
    shear = np.array([[1.0, aug.shear], [0.0, 1.0]])
    flip = np.array([[-1.0 if aug.hflip else 1.0, 0.0], [0.0, 1.0]])
    fwd = shear @ rot @ flip
    inv = np.linalg.inv(fwd)
    t = np.array([aug.translate[0] * w, aug.translate[1] * h])
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0

    ys, xs = np.meshgrid(np.arange(h, dtype=np.float64),
                         np.arange(w, dtype=np.float64), indexing="ij")
    rel = np.stack([xs.ravel() - cx - t[0], ys.ravel() - cy - t[1]])
    src = inv @ rel
    sx = src[0] + cx
    sy = src[1] + cy

    x0 = np.floor(sx).astype(np.int64)
    y0 = np.floor(sy).astype(np.int64)
    fx = (sx - x0).astype(image.dtype)
    fy = (sy - y0).astype(image.dtype)

    def gather(yy, xx):
        inside = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
        vals = np.zeros((c, yy.size), dtype=image.dtype)
        flat = image.reshape(c, -1)
        idx = np.where(inside, yy * w + xx, 0)
        vals[:, :] = flat[:, idx] * inside
        return vals

    top = gather(y0, x0) * (1 - fx) + gather(y0, x0 + 1) * fx
    bot = gather(y0 + 1, x0) * (1 - fx) + gather(y0 + 1, x0 + 1) * fx
    out = top * (1 - fy) + bot * fy
    return out.reshape(c, h, w)


# ---------------------------------------------------------------------------
# strong stage


def _apply_photometric(image: np.ndarray, op: str, param: float) -> np.ndarray:
    if op == "brightness":
        return np.clip(image * param, 0.0, 1.0)
    if op == "contrast":
        mean = image.mean()
        return np.clip((image - mean) * param + mean, 0.0, 1.0)
    if op == "posterize":
        levels = 2 ** int(param)
        return np.floor(image * (levels - 1) + 0.5) / (levels - 1)
    if op == "solarize":
        return np.where(image >= param, 1.0 - image, image)
    raise ValidationError(f"unknown photometric op {op!r}")


def invert_photometric(image: np.ndarray, ops: tuple) -> np.ndarray:
    """Undo invertible photometric ops (brightness/contrast); used by the
    alignment checks. Posterize/solarize are not invertible."""
    out = image
    for op, param in reversed(ops):
        if op == "brightness":
            out = out / param
        elif op == "contrast":
            # contrast preserves the mean it was computed from
            mean = out.mean()
            out = (out - mean) / param + mean
        else:
            raise ValidationError(f"photometric op {op!r} is not invertible")
    return out


def sample_strong(seed: int, sample_id: int, epoch: int, cfg: StrongConfig) -> StrongAug:
    """Draw the per-sample part of the strong stage (photometric + cutout).
    Mixing is drawn per batch in make_two_views."""
    rng = stream(seed, Purpose.PHOTOMETRIC, epoch, sample_id)
    chosen = []
    m = cfg.magnitude / MAX_MAGNITUDE
    for _ in range(cfg.num_ops):
        op = cfg.ops[int(rng.integers(len(cfg.ops)))]
        apply_it = rng.random() < cfg.op_prob
        sign = 1.0 if rng.random() < 0.5 else -1.0
        if not apply_it:
            continue
        if op in ("brightness", "contrast"):
            chosen.append((op, float(1.0 + sign * 0.9 * m)))
        elif op == "posterize":
            chosen.append((op, float(int(round(8 - 4 * m)))))
        elif op == "solarize":
            chosen.append((op, float(1.0 - m)))

    cut_rng = stream(seed, Purpose.CUTOUT, epoch, sample_id)
    cutout_box = None
    if cfg.cutout_prob > 0 and cut_rng.random() < cfg.cutout_prob:
        # center drawn uniformly; the box is clipped at the borders on apply
        cy = int(cut_rng.integers(0, 2 ** 16))
        cx = int(cut_rng.integers(0, 2 ** 16))
        cutout_box = ("center", cy, cx, cfg.cutout_size)
    return StrongAug(photometric=tuple(chosen), cutout_box=cutout_box, mix=None)


def _resolve_cutout(box, h, w):
    _, cy, cx, size = box
    cy, cx = cy % h, cx % w
    r0 = max(0, cy - size // 2)
    c0 = max(0, cx - size // 2)
    return (r0, c0, min(size, h - r0), min(size, w - c0))


def apply_strong(image: np.ndarray, aug: StrongAug,
                 partner_image: np.ndarray | None = None) -> np.ndarray:
    """Photometric ops, then cutout, then mixing against the partner image."""
    out = image.copy()
    for op, param in aug.photometric:
        out = _apply_photometric(out, op, param)
    if aug.cutout_box is not None:
        _, h, w = out.shape
        r0, c0, bh, bw = _resolve_cutout(aug.cutout_box, h, w)
        out[:, r0:r0 + bh, c0:c0 + bw] = 0.0
    if aug.mix is not None:
        if partner_image is None:
            raise ValidationError("mixing requested but no partner image given")
        if aug.mix.mode == "mixup":
            out = aug.mix.lam * out + (1.0 - aug.mix.lam) * partner_image
        elif aug.mix.mode == "cutmix":
            if aug.mix.region is not None:  # a zero-area draw degenerates to identity
                r0, c0, bh, bw = aug.mix.region
                out[:, r0:r0 + bh, c0:c0 + bw] = partner_image[:, r0:r0 + bh, c0:c0 + bw]
        else:
            raise ValidationError(f"unknown mix mode {aug.mix.mode!r}")
    return out


def _draw_mix(rng: np.random.Generator, cfg: StrongConfig, batch: int,
              image_size: int, patch_size: int):
    """Per-batch mixing decision: mode, lambda, partner permutation, region."""
    use_mixup, use_cutmix = cfg.mixup, cfg.cutmix
    if not use_mixup and not use_cutmix:
        return None
    if use_mixup and use_cutmix:
        mode = "mixup" if rng.random() < 0.5 else "cutmix"
    else:
        mode = "mixup" if use_mixup else "cutmix"
    partner = rng.permutation(batch)
    if mode == "mixup":
        lam = float(rng.beta(cfg.mixup_alpha, cfg.mixup_alpha))
        return mode, lam, partner, None
    lam = float(rng.beta(cfg.cutmix_alpha, cfg.cutmix_alpha))
    grid = image_size // patch_size
    # side length in patches targeting an area fraction of (1 - lam)
    side = int(round(np.sqrt(1.0 - lam) * grid))
    side = min(max(side, 0), grid)
    if side == 0:
        return mode, 1.0, partner, None
    r0 = int(rng.integers(0, grid - side + 1)) * patch_size
    c0 = int(rng.integers(0, grid - side + 1)) * patch_size
    region = (r0, c0, side * patch_size, side * patch_size)
    lam_eff = 1.0 - (side * side) / (grid * grid)
    return mode, lam_eff, partner, region


def make_two_views(images: np.ndarray, labels: np.ndarray, sample_ids: np.ndarray,
                   epoch: int, seed: int, cfg: AugmentConfig, num_classes: int,
                   smoothing: float, patch_size: int) -> TwoViewBatch:
    """Build spatially-aligned teacher and student views plus mixed targets."""
    if len(images) == 0:
        raise ValidationError("empty batch")
    b = len(images)
    spatial = [sample_spatial(seed, int(sid), epoch, cfg.spatial) for sid in sample_ids]
    teacher = np.stack([apply_spatial(images[i], spatial[i]) for i in range(b)])

    eye = np.eye(num_classes, dtype=images.dtype)
    targets = eye[np.asarray(labels)] * (1.0 - smoothing) + smoothing / num_classes

    if not cfg.strong_enabled:
        strong = [StrongAug()] * b
        return TwoViewBatch(teacher, teacher.copy(), spatial, strong, [None] * b,
                            targets, np.asarray(sample_ids))

    strong = [sample_strong(seed, int(sid), epoch, cfg.strong) for sid in sample_ids]
    pre_mix = np.stack([apply_strong(teacher[i], strong[i]) for i in range(b)])

    mix_rng = stream(seed, Purpose.MIX, epoch, int(sample_ids[0]))
    drawn = _draw_mix(mix_rng, cfg.strong, b, images.shape[-1], patch_size)
    if drawn is None:
        return TwoViewBatch(teacher, pre_mix, spatial, strong, [None] * b,
                            targets, np.asarray(sample_ids))

    mode, lam, partner, region = drawn
    student = np.empty_like(pre_mix)
    mix_meta = []
    mixed_targets = lam * targets + (1.0 - lam) * targets[partner]
    for i in range(b):
        spec = MixSpec(mode=mode, lam=lam, partner=int(partner[i]), region=region)
        strong[i] = StrongAug(photometric=strong[i].photometric,
                              cutout_box=strong[i].cutout_box, mix=spec)
        student[i] = apply_strong(pre_mix[i], StrongAug(mix=spec),
                                  partner_image=pre_mix[partner[i]])
        mix_meta.append(spec)
    return TwoViewBatch(teacher, student, spatial, strong, mix_meta,
                        mixed_targets, np.asarray(sample_ids))
