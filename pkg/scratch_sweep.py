"""Scratch: reduced-protocol sweep to pick training hyperparameters."""
import itertools
import sys
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from stl_vit.data import gen_shapes
from stl_vit.labeling import GumbelConfig, generate_token_labels
from stl_vit.metrics import per_sample_iou
from stl_vit.model import ModelConfig
from stl_vit.training import TrainConfig, train_labeler


def run(job):
    lr, channel_attn, drop_path = job
    train = gen_shapes(seed=100, samples=2000, num_classes=8, split="train")
    test = gen_shapes(seed=100, samples=500, num_classes=8, split="test")
    model_cfg = ModelConfig(channel_attn=channel_attn, drop_path_rate=drop_path)
    train_cfg = TrainConfig(seed=0, epochs=12, base_lr=lr)
    model, report = train_labeler(train, model_cfg, train_cfg, eval_data=test)
    labels = generate_token_labels(model, test.images, test.labels, GumbelConfig(),
                                   mode="soft")
    iou = per_sample_iou(labels, test.token_masks).mean()
    return (f"lr={lr} ca={channel_attn} dp={drop_path}: "
            f"eval {report.epochs[-1].eval_acc:.1f} iou {iou:.3f}")


jobs = [(1e-3, True, 0.05), (2e-3, True, 0.05), (3e-3, True, 0.05),
        (2e-3, False, 0.05), (2e-3, True, 0.0)]
with ProcessPoolExecutor(max_workers=2) as pool:
    for line in pool.map(run, jobs):
        print(line, flush=True)
