"""Scratch: reduced stage-1 protocol for fast emergence signal."""
import sys
import time

import numpy as np

from stl_vit.data import gen_shapes
from stl_vit.labeling import GumbelConfig, generate_token_labels
from stl_vit.metrics import per_sample_iou
from stl_vit.model import ModelConfig
from stl_vit.training import TrainConfig, train_labeler

epochs = int(sys.argv[1]) if len(sys.argv) > 1 else 12
samples = int(sys.argv[2]) if len(sys.argv) > 2 else 2000

train = gen_shapes(seed=100, samples=samples, num_classes=8, split="train")
test = gen_shapes(seed=100, samples=500, num_classes=8, split="test")
t0 = time.time()
model, report = train_labeler(train, ModelConfig(), TrainConfig(seed=0, epochs=epochs),
                              eval_data=test)
labels = generate_token_labels(model, test.images, test.labels, GumbelConfig(), mode="soft")
gt = test.token_masks
pred = labels.foreground
iou = per_sample_iou(labels, gt).mean()
correct = labels.foreground & gt
wrong = labels.foreground & ~gt
cc = labels.confidence[correct].mean() if correct.any() else float("nan")
cw = labels.confidence[wrong].mean() if wrong.any() else float("nan")
print(f"epochs={epochs} n={samples} wall={(time.time()-t0)/60:.1f}min "
      f"eval={report.epochs[-1].eval_acc:.1f} iou={iou:.3f} "
      f"flag_rate={pred.mean():.2f} (gt {gt.mean():.2f}) conf_gap={cc-cw:.3f}")
