"""Scratch: train + save one labeler, then dissect its token labels."""
import sys
import time

import numpy as np

from stl_vit.data import gen_shapes
from stl_vit.labeling import GumbelConfig, generate_token_labels
from stl_vit.metrics import per_sample_iou
from stl_vit.model import FanModel, ModelConfig
from stl_vit.training import TrainConfig, train_labeler

train = gen_shapes(seed=100, samples=5000, num_classes=8, split="train")
test = gen_shapes(seed=100, samples=1000, num_classes=8, split="test")

import pathlib
ckpt = pathlib.Path("/tmp/diag_labeler.stl")
if ckpt.exists():
    model = FanModel.load_bytes(ckpt.read_bytes())
    print("loaded cached labeler")
else:
    t0 = time.time()
    model, report = train_labeler(train, ModelConfig(), TrainConfig(seed=0), eval_data=test)
    ckpt.write_bytes(model.save_bytes())
    print(f"trained {time.time()-t0:.0f}s eval={report.epochs[-1].eval_acc:.1f}")

labels = generate_token_labels(model, test.images, test.labels, GumbelConfig(), mode="soft")
gt = test.token_masks
pred = labels.foreground

print(f"flagged-fg rate: {pred.mean():.3f}  (gt fg rate {gt.mean():.3f})")
print(f"precision {np.logical_and(pred, gt).sum()/max(pred.sum(),1):.3f} "
      f"recall {np.logical_and(pred, gt).sum()/gt.sum():.3f}")
print(f"IoU mean {per_sample_iou(labels, gt).mean():.3f}")
conf = labels.confidence
print(f"confidence: overall {conf.mean():.3f} | fg-gt {conf[gt].mean():.3f} | bg-gt {conf[~gt].mean():.3f}")
# where do bg tokens' argmaxes go?
bg_argmax_is_class = (labels.class_id == test.labels[:, None]) & ~gt
print(f"bg tokens labeled image-class: {bg_argmax_is_class.sum()/(~gt).sum():.3f}")
# distribution of per-token argmax over classes for bg tokens
vals, counts = np.unique(labels.class_id[~gt], return_counts=True)
print("bg argmax distribution:", dict(zip(vals.tolist(), (counts/counts.sum()).round(3).tolist())))
vals, counts = np.unique(labels.class_id[gt], return_counts=True)
print("fg argmax distribution:", dict(zip(vals.tolist(), (counts/counts.sum()).round(3).tolist())))
# per-token accuracy of fg tokens
fg_correct = (labels.class_id == test.labels[:, None])[gt].mean()
print(f"fg tokens argmax==class: {fg_correct:.3f}")
# confidence histogram deciles
print("conf deciles:", np.percentile(conf, [10,30,50,70,90]).round(3))
