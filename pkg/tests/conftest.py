"""Shared fixtures: the acceptance protocol's trained models, cached on disk.

Training 21 desk-scale models takes a while, so every (role, seed) model is
trained once and cached under .cache/training keyed by a hash of its full
configuration; cache entries survive across pytest runs and are rebuilt
automatically whenever the protocol or the code-relevant configs change.
Set STL_VIT_TEST_CACHE to relocate the cache.
"""

from __future__ import annotations

import hashlib
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import pytest

from stl_vit.augment import AugmentConfig
from stl_vit.data import gen_shapes
from stl_vit.metrics import RobustnessReport
from stl_vit.model import FanModel, ModelConfig
from stl_vit.training import TrainConfig, train_baseline, train_labeler, train_student

PROTOCOL_SEEDS = (0, 1, 2)
DATA_SEED = 100
TRAIN_SAMPLES = 5000
TEST_SAMPLES = 1000
CORRUPTION_SEED = 123

STUDENT_MODEL = ModelConfig()                       # 32px, patch 8, D=64, depth 4
SHALLOW_LABELER = ModelConfig(depth=2)              # heterogeneous-labeler check
AUG = AugmentConfig()


def _train_cfg(seed, **kw):
    return TrainConfig(seed=seed, **kw)


@dataclass(frozen=True)
class Job:
    name: str           # e.g. "labeler_s0"
    role: str           # baseline | labeler | labeler_cls | labeler_d2 | student
    seed: int
    token_mode: str = "hard"
    labeler_name: str | None = None


def protocol_jobs():
    jobs = []
    for s in PROTOCOL_SEEDS:
        jobs.append(Job(f"baseline_s{s}", "baseline", s))
        jobs.append(Job(f"labeler_s{s}", "labeler", s))
        jobs.append(Job(f"labeler_cls_s{s}", "labeler_cls", s))
        jobs.append(Job(f"labeler_d2_s{s}", "labeler_d2", s))
        jobs.append(Job(f"student_hard_s{s}", "student", s, "hard", f"labeler_s{s}"))
        jobs.append(Job(f"student_soft_s{s}", "student", s, "soft", f"labeler_s{s}"))
        jobs.append(Job(f"student_het_s{s}", "student", s, "hard", f"labeler_d2_s{s}"))
    return jobs


def _job_config(job: Job) -> dict:
    model_cfg = SHALLOW_LABELER if job.role == "labeler_d2" else STUDENT_MODEL
    train_kw = {}
    if job.role == "labeler_cls":
        train_kw["labeler_ablation"] = "cls_only"
    if job.role == "student":
        train_kw["token_label_mode"] = job.token_mode
    return {
        "role": job.role,
        "model": model_cfg.to_dict(),
        "train": _train_cfg(job.seed, **train_kw).to_dict(),
        "augment": AUG.to_dict(),
        "data": [DATA_SEED, TRAIN_SAMPLES, TEST_SAMPLES],
        "labeler": job.labeler_name,
    }


def _key(job: Job) -> str:
    digest = hashlib.sha256(json.dumps(_job_config(job), sort_keys=True).encode())
    return f"{job.name}-{digest.hexdigest()[:10]}"


def cache_root() -> Path:
    root = os.environ.get("STL_VIT_TEST_CACHE")
    if root:
        return Path(root)
    return Path(__file__).parent.parent / ".cache" / "training"


def _load_protocol_data():
    train = gen_shapes(DATA_SEED, TRAIN_SAMPLES, 8, split="train")
    test = gen_shapes(DATA_SEED, TEST_SAMPLES, 8, split="test")
    return train, test


def _run_job(job: Job) -> str:
    """Worker entry: train one model and persist it. Returns the cache key."""
    out = cache_root() / _key(job)
    if (out / "checkpoint.stl").exists():
        return _key(job)
    train_ds, test_ds = _load_protocol_data()
    model_cfg = SHALLOW_LABELER if job.role == "labeler_d2" else STUDENT_MODEL
    if job.role == "baseline":
        model, report = train_baseline(train_ds, model_cfg, _train_cfg(job.seed),
                                       AUG, test_ds)
    elif job.role == "labeler":
        model, report = train_labeler(train_ds, model_cfg, _train_cfg(job.seed),
                                      AUG, test_ds)
    elif job.role == "labeler_cls":
        model, report = train_labeler(train_ds, model_cfg,
                                      _train_cfg(job.seed, labeler_ablation="cls_only"),
                                      AUG, test_ds)
    elif job.role == "labeler_d2":
        model, report = train_labeler(train_ds, model_cfg, _train_cfg(job.seed),
                                      AUG, test_ds)
    elif job.role == "student":
        labeler_job = next(j for j in protocol_jobs() if j.name == job.labeler_name)
        labeler_dir = cache_root() / _key(labeler_job)
        labeler = FanModel.load_bytes((labeler_dir / "checkpoint.stl").read_bytes())
        cfg = _train_cfg(job.seed, token_label_mode=job.token_mode)
        model, report = train_student(train_ds, labeler, STUDENT_MODEL, cfg,
                                      AUG, test_ds)
    else:
        raise ValueError(job.role)
    out.mkdir(parents=True, exist_ok=True)
    (out / "checkpoint.stl").write_bytes(model.save_bytes())
    (out / "report.csv").write_text(report.to_csv())
    (out / "meta.json").write_text(json.dumps({
        "job": job.name,
        "wall_clock_sec": report.wall_clock_sec,
        "final_eval_acc": report.epochs[-1].eval_acc,
    }, indent=1))
    return _key(job)


def ensure_protocol_models(max_workers: int = 2) -> dict:
    """Train everything missing (labelers first, then students). Returns
    name -> cache directory."""
    jobs = protocol_jobs()
    wave1 = [j for j in jobs if j.role != "student"]
    wave2 = [j for j in jobs if j.role == "student"]
    for wave in (wave1, wave2):
        missing = [j for j in wave if not (cache_root() / _key(j) / "checkpoint.stl").exists()]
        if missing:
            with ProcessPoolExecutor(max_workers=max_workers) as pool:
                list(pool.map(_run_job, missing))
    return {j.name: cache_root() / _key(j) for j in jobs}


@pytest.fixture(scope="session")
def protocol_models():
    """name -> cache dir for all acceptance-protocol models (trains on miss)."""
    return ensure_protocol_models()


@pytest.fixture(scope="session")
def protocol_data():
    return _load_protocol_data()


def load_model(dirs: dict, name: str) -> FanModel:
    return FanModel.load_bytes((dirs[name] / "checkpoint.stl").read_bytes())


def load_meta(dirs: dict, name: str) -> dict:
    return json.loads((dirs[name] / "meta.json").read_text())


def cached_robustness(dirs: dict, name: str, test_ds) -> RobustnessReport:
    """Corrupted-grid evaluation of a cached model, itself cached."""
    from stl_vit.data import corrupt, corruption_grid
    from stl_vit.metrics import accuracy, retention

    path = dirs[name] / f"robustness_c{CORRUPTION_SEED}.json"
    if path.exists():
        return RobustnessReport.from_json(path.read_text())
    model = load_model(dirs, name)
    clean = accuracy(model, test_ds.images, test_ds.labels)
    per_cell = {}
    for spec in corruption_grid(seed=CORRUPTION_SEED):
        images = corrupt(test_ds.images, spec)
        per_cell[(spec.kind, spec.severity)] = accuracy(model, images, test_ds.labels)
    report = RobustnessReport(clean_acc=clean, per_cell=per_cell,
                              seeds=[CORRUPTION_SEED])
    report.retention = retention(clean, report.robust_acc)
    path.write_text(report.to_json())
    return report
