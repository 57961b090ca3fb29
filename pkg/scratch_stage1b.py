"""Scratch: criterion-6 protocol on the new generator, comparing inits."""
import sys
import time

import numpy as np

import stl_vit.model as M
from stl_vit.data import gen_shapes
from stl_vit.labeling import GumbelConfig, generate_token_labels
from stl_vit.metrics import per_sample_iou
from stl_vit.model import ModelConfig
from stl_vit.training import TrainConfig, train_labeler

init = sys.argv[1]  # "xavier" | "fixed002"
ablation = sys.argv[2] if len(sys.argv) > 2 else "none"
if init == "fixed002":
    M._weight_std = lambda fi, fo: 0.02

train = gen_shapes(seed=100, samples=5000, num_classes=8, split="train")
test = gen_shapes(seed=100, samples=1000, num_classes=8, split="test")

t0 = time.time()
model, report = train_labeler(train, ModelConfig(), TrainConfig(seed=0, labeler_ablation=ablation),
                              eval_data=test)
labels = generate_token_labels(model, test.images, test.labels, GumbelConfig(), mode="soft")
ious = per_sample_iou(labels, test.token_masks)
correct_fg = labels.foreground & test.token_masks
wrong_fg = labels.foreground & ~test.token_masks
cc = labels.confidence[correct_fg].mean() if correct_fg.any() else float("nan")
cw = labels.confidence[wrong_fg].mean() if wrong_fg.any() else float("nan")
print(f"init={init} abl={ablation} wall={(time.time()-t0)/60:.1f}min "
      f"eval={report.epochs[-1].eval_acc:.1f} iou={ious.mean():.3f} "
      f"conf_gap={cc-cw:.3f} (correct {cc:.3f} wrong {cw:.3f})")
print("eval trace:", [round(e.eval_acc, 1) for e in report.epochs[::3]])
