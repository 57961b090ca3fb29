"""Stage-1 labeler training, stage-2 student training, and the class-loss
baseline.

All three loops share one batch pipeline (shuffle, two-view augmentation,
mixed targets) driven by purpose-keyed random streams, which is why the
degenerate configurations (alpha=0 labeler, beta=0 student) reproduce the
baseline bit for bit: they consume identical streams and build identical
loss graphs.

BLAS is pinned to one thread for the whole run; at these matrix sizes that
is both faster and the only way to guarantee bit-identical reruns.
"""

from __future__ import annotations

import csv
import io
import json
import time
from dataclasses import dataclass, field, fields, replace

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from . import autodiff as ad
from .augment import AugmentConfig, TwoViewBatch, make_two_views
from .data import ShapesDataset
from .errors import TrainingDiverged, ValidationError
from .labeling import (GumbelConfig, composite_labels, generate_token_labels,
                       labeler_loss_terms, student_token_loss)
from .metrics import accuracy
from .model import FanModel, ModelConfig, StepRNG
from .rng import Purpose, stream

LABELER_ABLATIONS = ("none", "cls_only", "stop_grad_pooled")
GRAD_CLIP_NORM = 5.0


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 64
    base_lr: float = 1e-3
    weight_decay: float = 0.05
    floor_factor: float = 0.1            # cosine schedule floor
    warmup_epochs: int = 2
    alpha: float = 1.0                   # pooled-token loss weight (stage 1)
    beta: float = 1.0                    # token-label loss weight (stage 2)
    label_smoothing: float = 0.1
    gumbel: GumbelConfig = field(default_factory=GumbelConfig)
    token_label_mode: str = "hard"       # soft | hard
    labeler_ablation: str = "none"       # none | cls_only | stop_grad_pooled
    seed: int = 0

    def __post_init__(self):
        if self.epochs <= 0 or self.batch_size <= 0:
            raise ValidationError("epochs and batch_size must be positive")
        if self.base_lr <= 0:
            raise ValidationError("base_lr must be positive")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ValidationError("label_smoothing must be in [0, 1)")
        if self.token_label_mode not in ("soft", "hard"):
            raise ValidationError(f"token_label_mode must be soft|hard, "
                                  f"got {self.token_label_mode!r}")
        if self.labeler_ablation not in LABELER_ABLATIONS:
            raise ValidationError(f"labeler_ablation must be one of {LABELER_ABLATIONS}")
        if self.alpha < 0 or self.beta < 0:
            raise ValidationError("alpha and beta must be >= 0")
        if self.warmup_epochs < 0 or self.warmup_epochs >= self.epochs:
            raise ValidationError("warmup_epochs must be in [0, epochs)")

    def to_dict(self) -> dict:
        d = {}
        for f in fields(self):
            v = getattr(self, f.name)
            d[f.name] = {"tau": v.tau, "hard": v.hard, "stream_id": v.stream_id} \
                if isinstance(v, GumbelConfig) else v
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"unknown train config keys: {sorted(unknown)}")
        d = dict(d)
        if "gumbel" in d and isinstance(d["gumbel"], dict):
            d["gumbel"] = GumbelConfig(**d["gumbel"])
        return cls(**d)


@dataclass
class EpochStats:
    epoch: int
    lr: float
    loss_cls: float
    loss_token: float          # weighted pooled/token term (0 when absent)
    train_acc: float
    eval_acc: float


@dataclass
class TrainReport:
    epochs: list                      # EpochStats per epoch
    seed: int
    wall_clock_sec: float = 0.0
    checkpoint_path: str | None = None

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "lr", "loss_cls", "loss_token", "train_acc", "eval_acc"])
        for e in self.epochs:
            w.writerow([e.epoch, f"{e.lr:.8e}", f"{e.loss_cls:.10e}",
                        f"{e.loss_token:.10e}", f"{e.train_acc:.4f}", f"{e.eval_acc:.4f}"])
        return buf.getvalue()

    def manifest(self, model_cfg: ModelConfig, train_cfg: TrainConfig,
                 extra: dict | None = None) -> str:
        # wall clock stays out: manifests must be byte-identical across reruns
        doc = {
            "version": f"stl-vit-{__version__}",
            "seed": self.seed,
            "model_config": model_cfg.to_dict(),
            "train_config": train_cfg.to_dict(),
        }
        if extra:
            doc.update(extra)
        return json.dumps(doc, indent=1, sort_keys=True)


# ---------------------------------------------------------------------------
# optimizer and schedule


class AdamW:
    """Decoupled-weight-decay Adam with bias-corrected moments."""

    def __init__(self, params: dict, weight_decay: float = 0.05,
                 betas: tuple = (0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.weight_decay = weight_decay
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        self.m = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.v = {k: np.zeros_like(t.data) for k, t in params.items()}

    def step(self, lr: float, grad_clip: float | None = GRAD_CLIP_NORM):
        self.step_count += 1
        grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data))
                 for k, t in self.params.items()}
        if grad_clip is not None:
            total = np.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2))
                                for g in grads.values()))
            if total > grad_clip:
                scale = grad_clip / total
                grads = {k: g * scale for k, g in grads.items()}
        c1 = 1.0 - self.beta1 ** self.step_count
        c2 = 1.0 - self.beta2 ** self.step_count
        for k, t in self.params.items():
            g = grads[k]
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * (g * g)
            m_hat = self.m[k] / c1
            v_hat = self.v[k] / c2
            t.data -= lr * (m_hat / (np.sqrt(v_hat) + self.eps)
                            + self.weight_decay * t.data)


def adamw_step(params: dict, lr: float, state: AdamW | None = None,
               weight_decay: float = 0.05, betas: tuple = (0.9, 0.999),
               eps: float = 1e-8, grad_clip: float | None = None) -> AdamW:
    """Functional single-step wrapper around the AdamW state object."""
    if state is None:
        state = AdamW(params, weight_decay=weight_decay, betas=betas, eps=eps)
    state.step(lr, grad_clip=grad_clip)
    return state


def cosine_lr(step: int, total_steps: int, base_lr: float,
              floor_factor: float = 0.1, warmup_steps: int = 0) -> float:
    """Linear warmup to base_lr, cosine decay to floor_factor * base_lr."""
    if not 0 <= step <= total_steps:
        raise ValidationError(f"step {step} outside [0, {total_steps}]")
    if warmup_steps > 0 and step < warmup_steps:
        return base_lr * step / warmup_steps
    span = max(total_steps - warmup_steps, 1)
    t = (step - warmup_steps) / span
    return base_lr * (floor_factor + (1.0 - floor_factor) * 0.5 * (1.0 + np.cos(np.pi * t)))


# ---------------------------------------------------------------------------
# shared loop machinery


def _check_finite(value: float, what: str, epoch: int, step: int):
    if not np.isfinite(value):
        raise TrainingDiverged(f"{what} became {value} at epoch {epoch} step {step}",
                               epoch, step)


def _epoch_batches(n: int, batch_size: int, seed: int, epoch: int):
    order = stream(seed, Purpose.SHUFFLE, epoch).permutation(n)
    for start in range(0, n - batch_size + 1, batch_size):
        yield order[start:start + batch_size]


def _two_views(ds: ShapesDataset, idx: np.ndarray, epoch: int, cfg: TrainConfig,
               aug: AugmentConfig, model_cfg: ModelConfig) -> TwoViewBatch:
    return make_two_views(ds.images[idx], ds.labels[idx], idx, epoch, cfg.seed,
                          aug, model_cfg.num_classes, cfg.label_smoothing,
                          model_cfg.patch_size)


def _run_training(data, model_cfg, train_cfg, aug_cfg, loss_fn, eval_data=None,
                  model=None):
    """Common loop: `loss_fn(model, two_view_batch, step) -> (loss, cls, token)`
    returns the Tensor to optimize plus the reported component values."""
    train_ds, eval_ds = data, (eval_data if eval_data is not None else data)
    if len(train_ds) < train_cfg.batch_size:
        raise ValidationError(f"dataset of {len(train_ds)} samples is smaller than "
                              f"one batch ({train_cfg.batch_size})")
    if model is None:
        model = FanModel.init(model_cfg, train_cfg.seed)
    opt = AdamW(model.params, weight_decay=train_cfg.weight_decay)
    steps_per_epoch = len(train_ds) // train_cfg.batch_size
    total_steps = steps_per_epoch * train_cfg.epochs
    warmup_steps = steps_per_epoch * train_cfg.warmup_epochs

    t_start = time.perf_counter()
    report = TrainReport(epochs=[], seed=train_cfg.seed)
    with threadpool_limits(limits=1):
        step = 0
        for epoch in range(train_cfg.epochs):
            sum_cls = 0.0
            sum_token = 0.0
            for idx in _epoch_batches(len(train_ds), train_cfg.batch_size,
                                      train_cfg.seed, epoch):
                two = _two_views(train_ds, idx, epoch, train_cfg, aug_cfg, model_cfg)
                lr = cosine_lr(step, total_steps, train_cfg.base_lr,
                               train_cfg.floor_factor, warmup_steps)
                model.zero_grads()
                loss, cls_val, token_val = loss_fn(model, two, epoch, step)
                _check_finite(float(loss.data), "loss", epoch, step)
                loss.backward()
                opt.step(lr)
                sum_cls += cls_val
                sum_token += token_val
                step += 1
            # train accuracy on a fixed prefix: full-set recounts every epoch
            # would cost as much as the training itself at desk scale
            n_tr = min(len(train_ds), 1000)
            train_acc = accuracy(model, train_ds.images[:n_tr], train_ds.labels[:n_tr])
            eval_acc = accuracy(model, eval_ds.images, eval_ds.labels)
            report.epochs.append(EpochStats(
                epoch=epoch, lr=lr, loss_cls=sum_cls / steps_per_epoch,
                loss_token=sum_token / steps_per_epoch,
                train_acc=train_acc, eval_acc=eval_acc))
    report.wall_clock_sec = time.perf_counter() - t_start
    return model, report


# ---------------------------------------------------------------------------
# the three entry points


def train_baseline(data: ShapesDataset, model_cfg: ModelConfig, train_cfg: TrainConfig,
                   aug_cfg: AugmentConfig | None = None, eval_data=None):
    """Class-token cross entropy only, full strong augmentation."""
    aug_cfg = aug_cfg if aug_cfg is not None else AugmentConfig()

    def loss_fn(model, two, epoch, step):
        out = model.forward(two.student_view, mode="train",
                            step_rng=StepRNG(train_cfg.seed, step))
        cls_term = ad.cross_entropy(out.cls_logits,
                                    two.class_targets.astype(model_cfg.np_dtype))
        return cls_term, float(cls_term.data), 0.0

    return _run_training(data, model_cfg, train_cfg, aug_cfg, loss_fn, eval_data)


def train_labeler(data: ShapesDataset, model_cfg: ModelConfig, train_cfg: TrainConfig,
                  aug_cfg: AugmentConfig | None = None, eval_data=None):
    """Stage 1: dual class-token + pooled-token objective under full strong
    augmentation. Ablations: cls_only drops the pooled branch (reduces to the
    baseline); stop_grad_pooled reports the pooled loss but evaluates it
    outside the graph so no gradient flows from it at all."""
    aug_cfg = aug_cfg if aug_cfg is not None else AugmentConfig()
    ablation = train_cfg.labeler_ablation

    def loss_fn(model, two, epoch, step):
        out = model.forward(two.student_view, mode="train",
                            step_rng=StepRNG(train_cfg.seed, step))
        targets = two.class_targets.astype(model_cfg.np_dtype)
        if ablation == "cls_only":
            total, cls_term, _ = labeler_loss_terms(out, targets, alpha=0.0)
            return total, float(cls_term.data), 0.0
        if ablation == "stop_grad_pooled":
            total, cls_term, _ = labeler_loss_terms(out, targets, alpha=0.0)
            pooled_value = float(ad.cross_entropy(
                out.pooled_logits.detach(), targets).data)
            return total, float(cls_term.data), train_cfg.alpha * pooled_value
        total, cls_term, pooled_term = labeler_loss_terms(out, targets,
                                                          alpha=train_cfg.alpha)
        token_val = (train_cfg.alpha * float(pooled_term.data)
                     if pooled_term is not None else 0.0)
        return total, float(cls_term.data), token_val

    return _run_training(data, model_cfg, train_cfg, aug_cfg, loss_fn, eval_data)


def train_student(data: ShapesDataset, labeler: FanModel, model_cfg: ModelConfig,
                  train_cfg: TrainConfig, aug_cfg: AugmentConfig | None = None,
                  eval_data=None):
    """Stage 2: class loss on the fully-augmented view plus beta-weighted
    token loss against the frozen labeler's (composited) token labels."""
    aug_cfg = aug_cfg if aug_cfg is not None else AugmentConfig()
    if labeler.config.grid_size != model_cfg.grid_size:
        raise ValidationError(
            f"labeler token grid {labeler.config.grid_size}^2 does not match "
            f"student grid {model_cfg.grid_size}^2")
    frozen = {k: t.data.tobytes() for k, t in labeler.params.items()}

    def loss_fn(model, two, epoch, step):
        out = model.forward(two.student_view, mode="train",
                            step_rng=StepRNG(train_cfg.seed, step))
        cls_term = ad.cross_entropy(out.cls_logits,
                                    two.class_targets.astype(model_cfg.np_dtype))
        if train_cfg.beta == 0.0:
            return cls_term, float(cls_term.data), 0.0
        labels = generate_token_labels(
            labeler, two.teacher_view, data.labels[two.sample_ids],
            train_cfg.gumbel, mode=train_cfg.token_label_mode,
            seed=train_cfg.seed, epoch=epoch, sample_ids=two.sample_ids)
        if any(m is not None for m in two.mix_meta):
            partner = np.array([m.partner if m is not None else i
                                for i, m in enumerate(two.mix_meta)])
            labels = composite_labels(labels, labels.take(partner), two.mix_meta,
                                      model_cfg.patch_size)
        token_term = student_token_loss(out, labels, beta=train_cfg.beta,
                                        smoothing=train_cfg.label_smoothing)
        total = ad.add(cls_term, token_term)
        return total, float(cls_term.data), float(token_term.data)

    model, report = _run_training(data, model_cfg, train_cfg, aug_cfg, loss_fn,
                                  eval_data)
    after = {k: t.data.tobytes() for k, t in labeler.params.items()}
    assert after == frozen, "labeler weights changed during student training"
    return model, report


def derive_train_cfg(cfg: TrainConfig, **overrides) -> TrainConfig:
    return replace(cfg, **overrides)
