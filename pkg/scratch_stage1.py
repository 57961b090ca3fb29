"""Scratch: run the acceptance-protocol stage-1 labeler once and measure
emergence (fg token IoU) plus the cls-only control. Not part of the package."""
import sys
import time

import numpy as np

from stl_vit.data import gen_shapes
from stl_vit.labeling import GumbelConfig, generate_token_labels
from stl_vit.metrics import per_sample_iou
from stl_vit.model import ModelConfig
from stl_vit.training import TrainConfig, derive_train_cfg, train_labeler

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 0
ablation = sys.argv[2] if len(sys.argv) > 2 else "none"

train = gen_shapes(seed=100, samples=5000, num_classes=8, split="train")
test = gen_shapes(seed=100, samples=1000, num_classes=8, split="test")

model_cfg = ModelConfig()  # desk defaults: 32px, patch 8, D=64, depth 4, heads 4, K=8
train_cfg = TrainConfig(seed=seed, labeler_ablation=ablation)

t0 = time.time()
model, report = train_labeler(train, model_cfg, train_cfg, eval_data=test)
dt = time.time() - t0

labels = generate_token_labels(model, test.images, test.labels, GumbelConfig(),
                               mode="soft")
ious = per_sample_iou(labels, test.token_masks)

correct_fg = labels.foreground & test.token_masks
wrong_fg = labels.foreground & ~test.token_masks
conf_correct = labels.confidence[correct_fg].mean() if correct_fg.any() else float("nan")
conf_wrong = labels.confidence[wrong_fg].mean() if wrong_fg.any() else float("nan")

print(f"seed={seed} ablation={ablation} wall={dt/60:.1f}min")
print(f"eval_acc last5: {[round(e.eval_acc,1) for e in report.epochs[-5:]]}")
print(f"train_acc last: {report.epochs[-1].train_acc:.1f}")
print(f"mean fg-IoU: {ious.mean():.3f}")
print(f"conf correct-fg {conf_correct:.3f} vs wrong-fg {conf_wrong:.3f} gap {conf_correct-conf_wrong:.3f}")
