"""Command-line interface: the one human entry point for the full pipeline.

Subcommands cover dataset generation, the three training modes, clean and
corrupted evaluation, token-map visualization, and the autodiff verification
suite. Configuration comes from a JSON file with flag overrides (flag >
file > STL_SEED env default > built-in default). Every run directory gets a
manifest listing sha256 hashes of its inputs and outputs; wall-clock timing
goes to a separate file that is excluded from the manifest so reruns stay
byte-identical.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .augment import AugmentConfig
from .data import (CorruptionSpec, corrupt, corruption_grid, gen_shapes,
                   load_dataset, save_dataset)
from .errors import FormatError, ValidationError
from .labeling import (GumbelConfig, generate_token_labels, token_labels_to_csv)
from .metrics import (RobustnessReport, accuracy, confidence_histogram, mce,
                      render_token_map, retention)
from .model import FanModel, ModelConfig
from .training import (TrainConfig, derive_train_cfg, train_baseline,
                       train_labeler, train_student)

KNOWN_SECTIONS = {"model", "labeler_model", "train", "augment", "data_dir", "out"}


def _load_run_config(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise ValidationError(f"config file {path}: {e}") from e
    unknown = set(doc) - KNOWN_SECTIONS
    if unknown:
        raise ValidationError(f"config file {path}: unknown keys {sorted(unknown)}")
    return doc


def _resolve(doc: dict, seed_flag: int | None):
    model_cfg = ModelConfig.from_dict(doc.get("model", {}))
    labeler_cfg = (ModelConfig.from_dict(doc["labeler_model"])
                   if "labeler_model" in doc else model_cfg)
    train_d = dict(doc.get("train", {}))
    if seed_flag is not None:
        train_d["seed"] = seed_flag
    elif "seed" not in train_d and os.environ.get("STL_SEED"):
        train_d["seed"] = int(os.environ["STL_SEED"])
    train_cfg = TrainConfig.from_dict(train_d)
    aug_cfg = AugmentConfig.from_dict(doc.get("augment", {}))
    return model_cfg, labeler_cfg, train_cfg, aug_cfg


def _sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _write_manifest(out_dir: Path, command: str, inputs: list, extra: dict):
    outputs = {}
    for p in sorted(out_dir.rglob("*")):
        if p.is_file() and p.name not in ("manifest.json", "timing.txt"):
            outputs[str(p.relative_to(out_dir))] = _sha256(p)
    doc = {
        "version": f"stl-vit-{__version__}",
        "command": command,
        "inputs": {str(p): _sha256(Path(p)) for p in inputs if Path(p).is_file()},
        "outputs": outputs,
    }
    doc.update(extra)
    (out_dir / "manifest.json").write_text(json.dumps(doc, indent=1, sort_keys=True))


def _finish_training(out_dir: Path, model, report, model_cfg, train_cfg,
                     command: str, inputs: list, extra: dict | None = None):
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "checkpoint.stl").write_bytes(model.save_bytes())
    (out_dir / "report.csv").write_text(report.to_csv())
    (out_dir / "config.json").write_text(report.manifest(model_cfg, train_cfg,
                                                         extra or {}))
    (out_dir / "timing.txt").write_text(f"wall_clock_sec {report.wall_clock_sec:.3f}\n")
    _write_manifest(out_dir, command, inputs, {"seed": train_cfg.seed})
    print(f"{command}: final eval acc {report.epochs[-1].eval_acc:.2f}%, "
          f"artifacts in {out_dir}")


def _load_split(data_dir: str, split: str | None = None):
    p = Path(data_dir)
    if split is not None:
        p = p / split
    return load_dataset(p)


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args):
    out = Path(args.out)
    train = gen_shapes(args.seed, args.samples, args.classes, args.image_size,
                       args.image_size, args.patch_size, split="train")
    test = gen_shapes(args.seed, args.test_samples, args.classes, args.image_size,
                      args.image_size, args.patch_size, split="test")
    save_dataset(train, out / "train")
    save_dataset(test, out / "test")
    _write_manifest(out, "gen-data", [], {"seed": args.seed,
                                          "samples": args.samples,
                                          "test_samples": args.test_samples})
    print(f"gen-data: wrote {args.samples} train / {args.test_samples} test "
          f"samples to {out}")
    return 0


def cmd_train_baseline(args):
    doc = _load_run_config(args.config)
    model_cfg, _, train_cfg, aug_cfg = _resolve(doc, args.seed)
    data_dir = args.data or doc.get("data_dir")
    if data_dir is None:
        raise ValidationError("no dataset: pass --data or set data_dir in the config")
    train_ds = _load_split(data_dir, "train")
    test_ds = _load_split(data_dir, "test")
    model, report = train_baseline(train_ds, model_cfg, train_cfg, aug_cfg, test_ds)
    inputs = ([args.config] if args.config else [])
    _finish_training(Path(args.out), model, report, model_cfg, train_cfg,
                     "train-baseline", inputs)
    return 0


def cmd_train_labeler(args):
    doc = _load_run_config(args.config)
    _, labeler_cfg, train_cfg, aug_cfg = _resolve(doc, args.seed)
    if args.ablation:
        train_cfg = derive_train_cfg(train_cfg, labeler_ablation=args.ablation)
    data_dir = args.data or doc.get("data_dir")
    if data_dir is None:
        raise ValidationError("no dataset: pass --data or set data_dir in the config")
    train_ds = _load_split(data_dir, "train")
    test_ds = _load_split(data_dir, "test")
    model, report = train_labeler(train_ds, labeler_cfg, train_cfg, aug_cfg, test_ds)
    inputs = ([args.config] if args.config else [])
    _finish_training(Path(args.out), model, report, labeler_cfg, train_cfg,
                     "train-labeler", inputs,
                     {"ablation": train_cfg.labeler_ablation})
    return 0


def cmd_train_student(args):
    doc = _load_run_config(args.config)
    model_cfg, _, train_cfg, aug_cfg = _resolve(doc, args.seed)
    overrides = {}
    if args.token_mode:
        overrides["token_label_mode"] = args.token_mode
    if args.beta is not None:
        overrides["beta"] = args.beta
    if args.tau is not None:
        overrides["gumbel"] = GumbelConfig(tau=args.tau, hard=True,
                                           stream_id=train_cfg.gumbel.stream_id)
    if overrides:
        train_cfg = derive_train_cfg(train_cfg, **overrides)
    data_dir = args.data or doc.get("data_dir")
    if data_dir is None:
        raise ValidationError("no dataset: pass --data or set data_dir in the config")
    train_ds = _load_split(data_dir, "train")
    test_ds = _load_split(data_dir, "test")
    labeler = FanModel.load_bytes(Path(args.labeler).read_bytes())
    model, report = train_student(train_ds, labeler, model_cfg, train_cfg,
                                  aug_cfg, test_ds)
    inputs = ([args.config] if args.config else []) + [args.labeler]
    _finish_training(Path(args.out), model, report, model_cfg, train_cfg,
                     "train-student", inputs,
                     {"token_mode": train_cfg.token_label_mode,
                      "beta": train_cfg.beta, "tau": train_cfg.gumbel.tau})
    return 0


def cmd_eval(args):
    model = FanModel.load_bytes(Path(args.ckpt).read_bytes())
    ds = load_dataset(args.data)
    acc = accuracy(model, ds.images, ds.labels)
    print(f"accuracy {acc:.4f}")
    return 0


def cmd_corrupt_eval(args):
    model = FanModel.load_bytes(Path(args.ckpt).read_bytes())
    ds = load_dataset(args.data)
    clean = accuracy(model, ds.images, ds.labels)
    per_cell = {}
    for spec in corruption_grid(seed=args.corruption_seed):
        images = corrupt(ds.images, spec)
        per_cell[(spec.kind, spec.severity)] = accuracy(model, images, ds.labels)
    report = RobustnessReport(clean_acc=clean, per_cell=per_cell,
                              seeds=[args.corruption_seed])
    report.retention = retention(clean, report.robust_acc)
    if args.reference:
        ref = RobustnessReport.from_json(Path(args.reference).read_text())
        report.mce = mce(report, ref)
        report.reference = str(args.reference)
    text = report.to_json()
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "robustness.json").write_text(text)
        inputs = [args.ckpt] + ([args.reference] if args.reference else [])
        _write_manifest(out, "corrupt-eval", inputs,
                        {"corruption_seed": args.corruption_seed})
        print(f"corrupt-eval: clean {clean:.2f}%, robust {report.robust_acc:.2f}%, "
              f"retention {report.retention:.1f}%"
              + (f", mCE {report.mce:.1f}" if report.mce is not None else "")
              + f", report in {out}")
    else:
        print(text)
    return 0


def cmd_visualize_tokens(args):
    labeler = FanModel.load_bytes(Path(args.labeler).read_bytes())
    ds = load_dataset(args.data)
    n = min(args.samples, len(ds))
    images = ds.images[:n]
    mode = "hard" if args.style == "filtered" else "soft"
    labels = generate_token_labels(labeler, images, ds.labels[:n],
                                   GumbelConfig(tau=args.tau), mode=mode,
                                   seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i in range(n):
        blob = render_token_map(labels, style=args.style,
                                conf_threshold=args.threshold, sample=i)
        (out / f"token_map_{i:04d}.ppm").write_bytes(blob)
    (out / "confidence.csv").write_text(confidence_histogram([labels]))
    (out / "token_labels.csv").write_text(token_labels_to_csv(labels, np.arange(n)))
    _write_manifest(out, "visualize-tokens", [args.labeler],
                    {"style": args.style, "samples": n})
    print(f"visualize-tokens: wrote {n} {args.style} maps to {out}")
    return 0


def cmd_gradcheck(args):
    from . import autodiff as ad

    rng = np.random.default_rng(0)
    failures = []

    def check(name, f, x, tol=1e-5):
        err = ad.grad_check(f, x)
        status = "PASS" if err < tol else "FAIL"
        if status == "FAIL":
            failures.append(name)
        print(f"{status} {name}: max rel err {err:.3e} (tol {tol:g})")

    for trial in range(3):
        m, k, n = rng.integers(2, 6, size=3)
        b_const = ad.Tensor(rng.normal(size=(k, n)))
        x = ad.Tensor(rng.normal(size=(m, k)), requires_grad=True)
        check(f"matmul[{trial}]", lambda v: ad.sum_all(ad.matmul(v, b_const)), x)

        w = ad.Tensor(rng.normal(size=(m, k)))
        x2 = ad.Tensor(rng.normal(size=(m, k)), requires_grad=True)
        check(f"softmax[{trial}]", lambda v: ad.sum_all(ad.mul(ad.softmax(v), w)), x2)

        kk = int(rng.integers(2, 6))
        target = ad.one_hot(rng.integers(0, kk, size=int(m)), kk).data
        x3 = ad.Tensor(rng.normal(size=(int(m), kk)), requires_grad=True)
        check(f"cross_entropy[{trial}]", lambda v: ad.cross_entropy(v, target), x3)

        d = int(rng.integers(3, 9))
        gain = ad.Tensor(rng.normal(size=d))
        bias = ad.Tensor(rng.normal(size=d))
        wl = ad.Tensor(rng.normal(size=(int(m), d)))
        x4 = ad.Tensor(rng.normal(size=(int(m), d)), requires_grad=True)
        check(f"layernorm[{trial}]",
              lambda v: ad.sum_all(ad.mul(ad.layernorm(v, gain, bias), wl)), x4)

        x5 = ad.Tensor(rng.normal(size=(int(m), int(k))), requires_grad=True)
        check(f"gelu[{trial}]", lambda v: ad.sum_all(ad.gelu(v)), x5)

    # attention cores and a 2-block end-to-end model
    from .model import FanModel, ModelConfig

    for trial in range(3):
        d, t = 8, 3
        model = FanModel.init(ModelConfig(image_size=16, patch_size=8, embed_dim=d,
                                          depth=2, num_heads=2, num_classes=3,
                                          drop_path_rate=0.0, dtype="f64"), seed=trial)
        for name, p in model.params.items():
            if name.endswith(".weight"):
                p.data[:] = rng.normal(size=p.data.shape) * 0.3
        wx = ad.Tensor(rng.normal(size=(1, t, d)))
        xa = ad.Tensor(rng.normal(size=(1, t, d)), requires_grad=True)
        check(f"self_attention_block[{trial}]",
              lambda v: ad.sum_all(ad.mul(model._self_attention(
                  0, v, False, None, None), wx)), xa)
        xc = ad.Tensor(rng.normal(size=(1, t, d)), requires_grad=True)
        check(f"channel_attention_block[{trial}]",
              lambda v: ad.sum_all(ad.mul(model._channel_attention(
                  0, v, False, None, None), wx)), xc)

        img = rng.random((2, 3, 16, 16))
        target = ad.one_hot(rng.integers(0, 3, size=2), 3).data
        probe = model.params["patch_embed.weight"]
        probe.data[:] = rng.normal(size=probe.data.shape) * 0.1
        check(f"end_to_end_2block[{trial}]",
              lambda v: ad.cross_entropy(model.forward(img).cls_logits, target),
              probe)

    if failures:
        print(f"gradcheck: {len(failures)} FAILED: {failures}")
        return 1
    print("gradcheck: all checks passed")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stl-vit",
        description="Two-stage token-labeling training for a miniature "
                    "fully-attentional vision transformer.")
    parser.add_argument("--version", action="version", version=f"stl-vit {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic shapes dataset")
    p.add_argument("--seed", type=int, default=0, help="generator seed")
    p.add_argument("--samples", type=int, required=True, help="training samples")
    p.add_argument("--test-samples", type=int, default=None,
                   help="test samples (default: samples // 5)")
    p.add_argument("--classes", type=int, default=8, help="number of shape classes")
    p.add_argument("--image-size", type=int, default=32, help="square image size")
    p.add_argument("--patch-size", type=int, default=8, help="token patch size")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.set_defaults(fn=cmd_gen_data)

    def training_common(p):
        p.add_argument("--config", default=None, help="JSON run config")
        p.add_argument("--data", default=None, help="dataset directory (train/ + test/)")
        p.add_argument("--seed", type=int, default=None, help="training seed override")
        p.add_argument("--out", required=True, help="run output directory")

    p = sub.add_parser("train-baseline", help="train the class-loss-only baseline")
    training_common(p)
    p.set_defaults(fn=cmd_train_baseline)

    p = sub.add_parser("train-labeler", help="stage 1: train the token labeler")
    training_common(p)
    p.add_argument("--ablation", choices=["cls_only", "stop_grad_pooled"],
                   default=None, help="labeler training ablation")
    p.set_defaults(fn=cmd_train_labeler)

    p = sub.add_parser("train-student", help="stage 2: train a student against token labels")
    training_common(p)
    p.add_argument("--labeler", required=True, help="labeler checkpoint path")
    p.add_argument("--token-mode", choices=["soft", "hard"], default=None,
                   help="soft softmax targets or hard Gumbel labels")
    p.add_argument("--beta", type=float, default=None, help="token loss weight")
    p.add_argument("--tau", type=float, default=None, help="Gumbel temperature")
    p.set_defaults(fn=cmd_train_student)

    p = sub.add_parser("eval", help="top-1 accuracy of a checkpoint on a dataset")
    p.add_argument("--ckpt", required=True, help="checkpoint path")
    p.add_argument("--data", required=True, help="dataset split directory")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("corrupt-eval", help="robust accuracy, retention, and mCE")
    p.add_argument("--ckpt", required=True, help="checkpoint path")
    p.add_argument("--data", required=True, help="dataset split directory")
    p.add_argument("--corruption-seed", type=int, default=0,
                   help="seed of the corruption grid")
    p.add_argument("--reference", default=None,
                   help="reference robustness.json for mCE normalization")
    p.add_argument("--out", default=None, help="directory for robustness.json")
    p.set_defaults(fn=cmd_corrupt_eval)

    p = sub.add_parser("visualize-tokens", help="render token-label maps as PPM")
    p.add_argument("--labeler", required=True, help="labeler checkpoint path")
    p.add_argument("--data", required=True, help="dataset split directory")
    p.add_argument("--style", choices=["binary", "trinary", "filtered"],
                   default="binary", help="map style")
    p.add_argument("--samples", type=int, default=16, help="how many samples to render")
    p.add_argument("--threshold", type=float, default=0.5,
                   help="confidence split for trinary maps")
    p.add_argument("--tau", type=float, default=1.0, help="Gumbel temperature (filtered)")
    p.add_argument("--seed", type=int, default=0, help="Gumbel seed (filtered)")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(fn=cmd_visualize_tokens)

    p = sub.add_parser("gradcheck", help="run the autodiff verification suite")
    p.set_defaults(fn=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "command", None) == "gen-data" and args.test_samples is None:
        args.test_samples = max(args.samples // 5, 1)
    try:
        return args.fn(args)
    except (ValidationError, FormatError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # runtime failure
        print(f"runtime failure: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
