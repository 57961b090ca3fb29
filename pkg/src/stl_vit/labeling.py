"""Token-label generation and the two-stage losses.

Stage 1 trains the labeler with a dual objective: the usual class-token
cross entropy plus an alpha-weighted cross entropy on the head applied to
the average-pooled patch embedding. That second term is what makes
per-token class structure emerge.

Stage 2 reads the labeler's token logits on the spatially-aligned teacher
view, scores each token by its maximal softmax probability (confidence),
and either keeps the full softmax rows (soft mode) or draws one hard label
per token through Gumbel-Softmax: confident tokens essentially keep their
argmax, low-confidence tokens get resampled in proportion to their
probabilities. Labels are targets only; no gradient flows through them.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ShapeError, ValidationError
from .model import FanModel, ModelOutput
from .rng import Purpose, stream

GUMBEL_CLAMP = 1e-12


@dataclass(frozen=True)
class GumbelConfig:
    tau: float = 1.0
    hard: bool = True
    stream_id: int = 0

    def __post_init__(self):
        if self.tau <= 0:
            raise ValidationError(f"gumbel temperature must be positive, got {self.tau}")


@dataclass
class TokenLabelMap:
    """Per-token labels for a batch: class id, confidence (max softmax
    probability before any noise), target distribution, and the foreground
    flag (token class == image class)."""

    class_id: np.ndarray     # (B, N) int64
    confidence: np.ndarray   # (B, N) float, in [0, 1]
    target: np.ndarray       # (B, N, K) rows sum to 1
    foreground: np.ndarray   # (B, N) bool
    grid: tuple              # (rows, cols), rows*cols == N

    def validate(self):
        b, n, k = self.target.shape
        assert self.class_id.shape == (b, n)
        assert self.confidence.shape == (b, n)
        assert self.foreground.shape == (b, n)
        assert self.grid[0] * self.grid[1] == n
        assert np.allclose(self.target.sum(axis=-1), 1.0, atol=1e-6)
        assert np.array_equal(self.class_id, self.target.argmax(axis=-1))
        assert ((self.confidence >= 0) & (self.confidence <= 1)).all()

    def take(self, indices: np.ndarray) -> "TokenLabelMap":
        """Rows reordered by batch index (for partner gathering under mixing)."""
        return TokenLabelMap(self.class_id[indices], self.confidence[indices],
                             self.target[indices], self.foreground[indices], self.grid)


# ---------------------------------------------------------------------------
# Gumbel machinery


def gumbel_sample(shape, rng: np.random.Generator) -> np.ndarray:
    """Standard Gumbel(0, 1) draws: -ln(-ln U), U clamped away from {0, 1}."""
    u = rng.random(shape)
    np.clip(u, GUMBEL_CLAMP, 1.0 - GUMBEL_CLAMP, out=u)
    return -np.log(-np.log(u))


def gumbel_softmax(logits, cfg: GumbelConfig, noise: np.ndarray | None = None,
                   rng: np.random.Generator | None = None) -> np.ndarray:
    """softmax((log softmax(logits) + G) / tau) over the last axis.

    `noise` overrides the Gumbel draws (zeros reduce the hard path to plain
    argmax); otherwise `rng` supplies them. Hard mode returns one-hot rows at
    the row argmax, ties resolved to the lowest class index.
    """
    x = logits.data if isinstance(logits, ad.Tensor) else np.asarray(logits)
    if noise is None:
        if rng is None:
            raise ValidationError("gumbel_softmax needs either explicit noise or an rng")
        noise = gumbel_sample(x.shape, rng)
    z = x - x.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    y = (logp + noise) / cfg.tau
    y -= y.max(axis=-1, keepdims=True)
    np.exp(y, out=y)
    y /= y.sum(axis=-1, keepdims=True)
    if not cfg.hard:
        return y
    hard = np.zeros_like(y)
    np.put_along_axis(hard, y.argmax(axis=-1)[..., None], 1.0, axis=-1)
    return hard


# ---------------------------------------------------------------------------
# losses


def labeler_loss_terms(output: ModelOutput, targets, alpha: float,
                       smoothing: float = 0.0):
    """(total, cls_term, pooled_term) of the stage-1 dual objective.

    `targets` is either integer class indices (converted to smoothed one-hot
    rows) or ready-made probability rows (already smoothed/mixed upstream).
    With alpha == 0 the pooled branch is skipped entirely so the loss graph
    is identical to the plain class-token objective.
    """
    if alpha < 0:
        raise ValidationError(f"alpha must be >= 0, got {alpha}")
    k = output.cls_logits.data.shape[-1]
    rows = _as_target_rows(targets, k, smoothing, output.cls_logits.data.dtype)
    cls_term = ad.cross_entropy(output.cls_logits, rows)
    if alpha == 0.0:
        return cls_term, cls_term, None
    pooled_term = ad.cross_entropy(output.pooled_logits, rows)
    total = ad.add(cls_term, ad.scale(pooled_term, alpha))
    return total, cls_term, pooled_term


def labeler_loss(output: ModelOutput, targets, alpha: float = 1.0,
                 smoothing: float = 0.0) -> ad.Tensor:
    return labeler_loss_terms(output, targets, alpha, smoothing)[0]


def _as_target_rows(targets, num_classes, smoothing, dtype):
    arr = targets.data if isinstance(targets, ad.Tensor) else np.asarray(targets)
    if arr.ndim == 1 and np.issubdtype(arr.dtype, np.integer):
        if arr.size and (arr.min() < 0 or arr.max() >= num_classes):
            raise ValidationError("class index out of range")
        rows = np.eye(num_classes, dtype=dtype)[arr]
        return rows * (1.0 - smoothing) + smoothing / num_classes
    if arr.ndim == 2 and arr.shape[-1] == num_classes:
        return arr.astype(dtype, copy=False)
    raise ValidationError(f"targets must be (B,) ints or (B, {num_classes}) rows, "
                          f"got shape {arr.shape}")


def student_token_loss(student_output: ModelOutput, labels: TokenLabelMap,
                       beta: float = 1.0, smoothing: float = 0.0) -> ad.Tensor:
    """beta times the mean over all tokens of the cross entropy between
    student token logits and the (smoothed) teacher targets."""
    if beta < 0:
        raise ValidationError(f"beta must be >= 0, got {beta}")
    logits = student_output.token_logits
    if logits.data.shape[:2] != labels.target.shape[:2]:
        raise ShapeError(f"token grid mismatch: student {logits.data.shape[:2]} "
                         f"vs labels {labels.target.shape[:2]}")
    if beta == 0.0:
        return ad.Tensor(np.asarray(0.0, dtype=logits.data.dtype))
    targets = ad.blend_uniform(labels.target, smoothing).astype(logits.data.dtype)
    ce = ad.cross_entropy(logits, targets)
    return ad.scale(ce, beta) if beta != 1.0 else ce


# ---------------------------------------------------------------------------
# label generation and compositing


def generate_token_labels(labeler: FanModel, teacher_view: np.ndarray,
                          image_class: np.ndarray, cfg: GumbelConfig,
                          mode: str = "hard", *, seed: int = 0, epoch: int = 0,
                          sample_ids: np.ndarray | None = None,
                          noise: np.ndarray | None = None) -> TokenLabelMap:
    """Run the frozen labeler on the teacher view and build token targets.

    All N tokens are kept regardless of confidence. Confidence is always the
    pre-noise max softmax probability; in hard mode the target is the one-hot
    of the Gumbel-Softmax argmax, in soft mode the plain softmax row.
    """
    if mode not in ("soft", "hard"):
        raise ValidationError(f"mode must be 'soft' or 'hard', got {mode!r}")
    with ad.no_grad():
        out = labeler.forward(teacher_view, mode="eval")
    logits = out.token_logits.data
    b, n, k = logits.shape

    z = logits - logits.max(axis=-1, keepdims=True)
    probs = np.exp(z)
    probs /= probs.sum(axis=-1, keepdims=True)
    confidence = probs.max(axis=-1)

    if mode == "soft":
        target = probs
        class_id = probs.argmax(axis=-1)
    else:
        if noise is None:
            if sample_ids is None:
                sample_ids = np.arange(b)
            noise = np.empty_like(logits)
            for i, sid in enumerate(sample_ids):
                g = stream(seed, Purpose.GUMBEL, cfg.stream_id, epoch, int(sid))
                noise[i] = gumbel_sample((n, k), g)
        target = gumbel_softmax(logits, GumbelConfig(cfg.tau, hard=True, stream_id=cfg.stream_id),
                                noise=noise)
        class_id = target.argmax(axis=-1)

    grid = labeler.config.grid_size
    foreground = class_id == np.asarray(image_class).reshape(-1, 1)
    return TokenLabelMap(class_id=class_id.astype(np.int64), confidence=confidence,
                         target=target, foreground=foreground, grid=(grid, grid))


def composite_labels(map_a: TokenLabelMap, map_b: TokenLabelMap, mix_meta,
                     patch_size: int) -> TokenLabelMap:
    """Combine token maps the same way the student images were mixed:
    cutmix splices the grid-aligned region exactly, mixup blends rows."""
    if map_a.grid != map_b.grid:
        raise ShapeError(f"grid mismatch {map_a.grid} vs {map_b.grid}")
    rows, cols = map_a.grid
    b = map_a.target.shape[0]
    out = TokenLabelMap(map_a.class_id.copy(), map_a.confidence.copy(),
                        map_a.target.copy(), map_a.foreground.copy(), map_a.grid)
    metas = mix_meta if isinstance(mix_meta, (list, tuple)) else [mix_meta] * b
    for i, meta in enumerate(metas):
        if meta is None:
            continue
        if meta.mode == "mixup":
            lam = meta.lam
            out.target[i] = lam * map_a.target[i] + (1.0 - lam) * map_b.target[i]
            out.class_id[i] = out.target[i].argmax(axis=-1)
            out.confidence[i] = lam * map_a.confidence[i] + (1.0 - lam) * map_b.confidence[i]
            src = map_a if lam >= 0.5 else map_b
            out.foreground[i] = src.foreground[i]
        elif meta.mode == "cutmix":
            if meta.region is None:
                continue
            r0, c0, h, w = meta.region
            if r0 % patch_size or c0 % patch_size or h % patch_size or w % patch_size:
                raise ValidationError(f"cutmix region {meta.region} not aligned to "
                                      f"patch size {patch_size}")
            tr0, tc0 = r0 // patch_size, c0 // patch_size
            trh, tcw = h // patch_size, w // patch_size
            token_idx = (np.arange(tr0, tr0 + trh)[:, None] * cols
                         + np.arange(tc0, tc0 + tcw)[None, :]).reshape(-1)
            out.target[i, token_idx] = map_b.target[i, token_idx]
            out.class_id[i, token_idx] = map_b.class_id[i, token_idx]
            out.confidence[i, token_idx] = map_b.confidence[i, token_idx]
            out.foreground[i, token_idx] = map_b.foreground[i, token_idx]
        else:
            raise ValidationError(f"unknown mix mode {meta.mode!r}")
    return out


# ---------------------------------------------------------------------------
# export


def token_labels_to_csv(label_map: TokenLabelMap, sample_ids=None) -> str:
    """CSV rows (sample_id, token_row, token_col, class_id, confidence,
    is_foreground) for the visualization and metrics tooling."""
    b, n = label_map.class_id.shape
    rows, cols = label_map.grid
    if sample_ids is None:
        sample_ids = np.arange(b)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["sample_id", "token_row", "token_col", "class_id",
                     "confidence", "is_foreground"])
    for i in range(b):
        for t in range(n):
            writer.writerow([int(sample_ids[i]), t // cols, t % cols,
                             int(label_map.class_id[i, t]),
                             f"{label_map.confidence[i, t]:.6f}",
                             int(label_map.foreground[i, t])])
    return buf.getvalue()
