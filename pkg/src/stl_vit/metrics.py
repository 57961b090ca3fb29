"""Accuracy, robustness metrics, token-label quality, and map rendering.

The mCE reference model is whatever report the caller passes in; by
convention the repo's own class-loss baseline. Retention is robust accuracy
over clean accuracy, reported to one decimal like the tables it mirrors.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ValidationError
from .labeling import TokenLabelMap
from .model import FanModel

# frozen palette for the token-map rasters
PALETTE = {
    "background": (25, 25, 112),   # dark blue
    "foreground": (255, 215, 0),   # yellow
    "low_confidence": (0, 255, 255),  # cyan
}


@dataclass
class RobustnessReport:
    clean_acc: float                       # percent
    per_cell: dict                         # (kind, severity) -> accuracy percent
    retention: float = 0.0                 # percent
    mce: float | None = None               # percent vs the named reference
    reference: str | None = None
    seeds: list = field(default_factory=list)

    @property
    def robust_acc(self) -> float:
        return float(np.mean(list(self.per_cell.values())))

    def to_json(self) -> str:
        cells = {f"{kind}:{sev}": acc for (kind, sev), acc in sorted(self.per_cell.items())}
        return json.dumps({
            "clean_acc": self.clean_acc,
            "robust_acc": self.robust_acc,
            "retention": self.retention,
            "mce": self.mce,
            "reference": self.reference,
            "seeds": self.seeds,
            "per_cell": cells,
        }, indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "RobustnessReport":
        d = json.loads(text)
        per_cell = {}
        for key, acc in d["per_cell"].items():
            kind, sev = key.rsplit(":", 1)
            per_cell[(kind, int(sev))] = acc
        return cls(clean_acc=d["clean_acc"], per_cell=per_cell,
                   retention=d.get("retention", 0.0), mce=d.get("mce"),
                   reference=d.get("reference"), seeds=d.get("seeds", []))


# ---------------------------------------------------------------------------
# accuracy and derived metrics


def accuracy(model: FanModel, images: np.ndarray, labels: np.ndarray,
             batch_size: int = 256) -> float:
    """Top-1 accuracy in percent, eval mode."""
    if len(images) == 0:
        raise ValidationError("empty dataset")
    correct = 0
    with ad.no_grad():
        for start in range(0, len(images), batch_size):
            chunk = images[start:start + batch_size]
            out = model.forward(chunk, mode="eval")
            correct += int((out.cls_logits.data.argmax(axis=-1)
                            == labels[start:start + len(chunk)]).sum())
    return 100.0 * correct / len(images)


def retention(clean: float, robust: float) -> float:
    """100 * robust / clean, one decimal."""
    if clean <= 0:
        raise ValidationError("retention undefined for clean accuracy <= 0")
    return round(100.0 * robust / clean, 1)


def mce(report: RobustnessReport, reference: RobustnessReport) -> float:
    """Mean corruption error: per-kind error normalized by the reference's
    error, averaged over kinds, times 100. Lower is better."""
    if set(report.per_cell) != set(reference.per_cell):
        raise ValidationError("corruption grids differ between report and reference")
    kinds = sorted({kind for kind, _ in report.per_cell})
    ratios = []
    for kind in kinds:
        sevs = sorted(sev for k, sev in report.per_cell if k == kind)
        err = sum(100.0 - report.per_cell[(kind, s)] for s in sevs)
        ref_err = sum(100.0 - reference.per_cell[(kind, s)] for s in sevs)
        if ref_err == 0:
            raise ValidationError(f"reference error is 0 for kind {kind!r}; mCE undefined")
        ratios.append(err / ref_err)
    return 100.0 * float(np.mean(ratios))


def token_label_iou(label_map: TokenLabelMap, gt_token_mask: np.ndarray) -> float:
    """IoU between predicted-foreground and ground-truth-foreground token
    sets, batch-pooled. Both sets empty counts as IoU 1."""
    pred = label_map.foreground
    gt = np.asarray(gt_token_mask, dtype=bool)
    if pred.shape != gt.shape:
        raise ValidationError(f"token grid mismatch: {pred.shape} vs {gt.shape}")
    inter = np.logical_and(pred, gt).sum()
    union = np.logical_or(pred, gt).sum()
    if union == 0:
        return 1.0
    return float(inter / union)


def per_sample_iou(label_map: TokenLabelMap, gt_token_mask: np.ndarray) -> np.ndarray:
    pred = label_map.foreground
    gt = np.asarray(gt_token_mask, dtype=bool)
    if pred.shape != gt.shape:
        raise ValidationError(f"token grid mismatch: {pred.shape} vs {gt.shape}")
    inter = np.logical_and(pred, gt).sum(axis=1)
    union = np.logical_or(pred, gt).sum(axis=1)
    out = np.ones(len(pred))
    nz = union > 0
    out[nz] = inter[nz] / union[nz]
    return out


# ---------------------------------------------------------------------------
# Fig-2-style artifacts


def render_token_map(label_map: TokenLabelMap, style: str = "binary",
                     conf_threshold: float = 0.5, cell_size: int = 16,
                     sample: int = 0) -> bytes:
    """P6 PPM raster of one sample's token map, one colored cell per token.

    binary: foreground yellow, background dark blue. trinary: foreground
    split at conf_threshold into cyan (low) / yellow (high). filtered: same
    as binary (callers pass a map built from hard Gumbel labels).
    """
    if style not in ("binary", "trinary", "filtered"):
        raise ValidationError(f"unknown style {style!r}")
    rows, cols = label_map.grid
    fg = label_map.foreground[sample].reshape(rows, cols)
    conf = label_map.confidence[sample].reshape(rows, cols)

    raster = np.empty((rows, cols, 3), dtype=np.uint8)
    raster[:] = PALETTE["background"]
    if style == "trinary":
        raster[fg & (conf >= conf_threshold)] = PALETTE["foreground"]
        raster[fg & (conf < conf_threshold)] = PALETTE["low_confidence"]
    else:
        raster[fg] = PALETTE["foreground"]

    raster = np.repeat(np.repeat(raster, cell_size, axis=0), cell_size, axis=1)
    header = f"P6\n{cols * cell_size} {rows * cell_size}\n255\n".encode("ascii")
    return header + raster.tobytes()


def confidence_histogram(label_maps: list, bins: int = 20) -> str:
    """CSV of the token-confidence distribution plus foreground/background
    mean-confidence summary lines."""
    if not label_maps:
        raise ValidationError("no label maps given")
    conf = np.concatenate([m.confidence.reshape(-1) for m in label_maps])
    fg = np.concatenate([m.foreground.reshape(-1) for m in label_maps])
    counts, edges = np.histogram(conf, bins=bins, range=(0.0, 1.0))
    lines = ["bin_low,bin_high,count"]
    for i, count in enumerate(counts):
        lines.append(f"{edges[i]:.4f},{edges[i + 1]:.4f},{int(count)}")
    lines.append(f"# total_tokens,{conf.size}")
    mean_fg = float(conf[fg].mean()) if fg.any() else float("nan")
    mean_bg = float(conf[~fg].mean()) if (~fg).any() else float("nan")
    lines.append(f"# mean_confidence_foreground,{mean_fg:.6f}")
    lines.append(f"# mean_confidence_background,{mean_bg:.6f}")
    return "\n".join(lines) + "\n"
