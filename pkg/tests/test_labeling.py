"""Token labeling: Gumbel sampling properties, losses, compositing."""

import numpy as np
import pytest

from stl_vit import ShapeError, ValidationError
from stl_vit import autodiff as ad
from stl_vit.augment import MixSpec
from stl_vit.labeling import (GumbelConfig, TokenLabelMap, composite_labels,
                              generate_token_labels, gumbel_sample,
                              gumbel_softmax, labeler_loss, labeler_loss_terms,
                              student_token_loss, token_labels_to_csv)
from stl_vit.model import FanModel, ModelConfig
from stl_vit.rng import Purpose, stream


def tiny_labeler(seed=0, depth=2, dtype="f64"):
    cfg = ModelConfig(image_size=32, patch_size=8, embed_dim=16, depth=depth,
                      num_heads=2, num_classes=8, drop_path_rate=0.0, dtype=dtype)
    return FanModel.init(cfg, seed=seed)


# ---------------------------------------------------------------------------
# gumbel_sample


def test_gumbel_analytic_point():
    # U = 1/e gives G = -ln(-ln(1/e)) = -ln(1) = 0
    class FixedRng:
        def random(self, shape):
            return np.full(shape, 1.0 / np.e)

    g = gumbel_sample((3,), FixedRng())
    assert np.allclose(g, 0.0, atol=1e-12)


def test_gumbel_mean_is_euler_mascheroni():
    rng = np.random.default_rng(0)
    g = gumbel_sample((1_000_000,), rng)
    assert abs(g.mean() - 0.5772156649) < 0.01


def test_gumbel_stream_determinism():
    a = gumbel_sample((4, 5), stream(3, Purpose.GUMBEL, 0, 0, 7))
    b = gumbel_sample((4, 5), stream(3, Purpose.GUMBEL, 0, 0, 7))
    assert np.array_equal(a, b)


# ---------------------------------------------------------------------------
# gumbel_softmax


def test_zero_noise_reduces_to_softmax():
    logits = np.array([[0.3, -1.2, 2.0]])
    soft = gumbel_softmax(logits, GumbelConfig(tau=1.0, hard=False),
                          noise=np.zeros((1, 3)))
    expected = np.exp(logits) / np.exp(logits).sum()
    assert np.allclose(soft, expected, atol=1e-12)


def test_symmetric_probs_stay_symmetric():
    logits = np.log(np.array([[0.5, 0.5]]))
    for tau in (0.1, 1.0, 5.0):
        y = gumbel_softmax(logits, GumbelConfig(tau=tau, hard=False),
                           noise=np.zeros((1, 2)))
        assert np.allclose(y, [[0.5, 0.5]], atol=1e-12)


def test_hard_mode_one_hot_with_tie_to_lowest_index():
    logits = np.array([[1.0, 1.0, 0.0]])
    y = gumbel_softmax(logits, GumbelConfig(tau=1.0, hard=True), noise=np.zeros((1, 3)))
    assert np.array_equal(y, [[1.0, 0.0, 0.0]])


def test_argmax_distribution_matches_softmax():
    # Gumbel-max property: argmax frequencies follow softmax(logits),
    # independent of tau
    logits = np.array([1.0, 2.0, 3.0])
    expected = np.exp(logits) / np.exp(logits).sum()
    rng = np.random.default_rng(42)
    n = 100_000
    noise = gumbel_sample((n, 3), rng)
    for tau in (0.1, 1.0, 5.0):
        y = gumbel_softmax(np.tile(logits, (n, 1)), GumbelConfig(tau=tau, hard=True),
                           noise=noise)
        freq = y.mean(axis=0)
        assert np.all(np.abs(freq - expected) < 0.01)


def test_tau_must_be_positive():
    with pytest.raises(ValidationError):
        GumbelConfig(tau=0.0)
    with pytest.raises(ValidationError):
        GumbelConfig(tau=-1.0)


# ---------------------------------------------------------------------------
# labeler loss


def test_labeler_loss_alpha_zero_is_class_loss_only():
    model = tiny_labeler()
    imgs = np.random.default_rng(1).random((2, 3, 32, 32))
    out = model.forward(imgs)
    total, cls_term, pooled = labeler_loss_terms(out, np.array([1, 4]), alpha=0.0)
    assert pooled is None
    assert total is cls_term
    direct = ad.cross_entropy(out.cls_logits, ad.smooth_labels(ad.one_hot([1, 4], 8), 0.0))
    assert total.item() == pytest.approx(direct.item(), abs=1e-12)


def test_labeler_loss_uniform_logits():
    model = tiny_labeler()
    # zero every head weight so logits are exactly uniform
    for name in ("class_head", "token_head"):
        model.params[f"{name}.weight"].data[:] = 0.0
        model.params[f"{name}.bias"].data[:] = 0.0
    imgs = np.random.default_rng(2).random((2, 3, 32, 32))
    out = model.forward(imgs)
    for alpha in (0.0, 1.0, 2.5):
        loss = labeler_loss(out, np.array([0, 7]), alpha=alpha, smoothing=0.0)
        assert loss.item() == pytest.approx((1 + alpha) * np.log(8), abs=1e-9)


def test_labeler_loss_gradient_is_sum_of_branch_gradients():
    model = tiny_labeler()
    imgs = np.random.default_rng(3).random((2, 3, 32, 32))
    y = np.array([2, 5])
    alpha = 0.7

    model.zero_grads()
    out = model.forward(imgs)
    labeler_loss(out, y, alpha=alpha).backward()
    combined = {k: t.grad.copy() for k, t in model.params.items() if t.grad is not None}

    model.zero_grads()
    out = model.forward(imgs)
    labeler_loss_terms(out, y, alpha=0.0)[1].backward()
    cls_grads = {k: (t.grad.copy() if t.grad is not None else None)
                 for k, t in model.params.items()}

    model.zero_grads()
    out = model.forward(imgs)
    pooled = ad.cross_entropy(out.pooled_logits,
                              ad.one_hot(y, 8).data.astype(np.float64))
    pooled.backward()
    pooled_grads = {k: (t.grad.copy() if t.grad is not None else None)
                    for k, t in model.params.items()}

    for k, g in combined.items():
        expect = np.zeros_like(g)
        if cls_grads[k] is not None:
            expect = expect + cls_grads[k]
        if pooled_grads[k] is not None:
            expect = expect + alpha * pooled_grads[k]
        assert np.allclose(g, expect, atol=1e-10), k


def test_labeler_loss_rejects_bad_class():
    model = tiny_labeler()
    out = model.forward(np.random.default_rng(4).random((1, 3, 32, 32)))
    with pytest.raises(ValidationError):
        labeler_loss(out, np.array([8]), alpha=1.0)


# ---------------------------------------------------------------------------
# token label generation


def test_generate_labels_soft_mode_is_plain_softmax():
    model = tiny_labeler()
    imgs = np.random.default_rng(5).random((3, 3, 32, 32))
    classes = np.array([0, 1, 2])
    m = generate_token_labels(model, imgs, classes, GumbelConfig(), mode="soft")
    m.validate()
    with ad.no_grad():
        logits = model.forward(imgs).token_logits.data
    z = np.exp(logits - logits.max(-1, keepdims=True))
    probs = z / z.sum(-1, keepdims=True)
    assert np.array_equal(m.target, probs)
    assert np.array_equal(m.confidence, probs.max(-1))


def test_generate_labels_retains_all_tokens():
    model = tiny_labeler()
    imgs = np.random.default_rng(6).random((2, 3, 32, 32))
    for mode in ("soft", "hard"):
        m = generate_token_labels(model, imgs, np.array([0, 1]), GumbelConfig(),
                                  mode=mode, seed=1)
        assert m.target.shape == (2, 16, 8)
        m.validate()


def test_generate_labels_foreground_partition():
    model = tiny_labeler()
    imgs = np.random.default_rng(7).random((2, 3, 32, 32))
    m = generate_token_labels(model, imgs, np.array([3, 3]), GumbelConfig(),
                              mode="soft")
    assert np.array_equal(m.foreground, m.class_id == 3)


def test_high_confidence_tokens_rarely_flip():
    # a 0.99-confidence binary token keeps its argmax in ~99% of draws
    logits = np.log(np.array([0.99, 0.01]))[None].repeat(10_000, 0)
    noise = gumbel_sample((10_000, 2), np.random.default_rng(8))
    y = gumbel_softmax(logits, GumbelConfig(tau=1.0, hard=True), noise=noise)
    flip_rate = 1.0 - y[:, 0].mean()
    assert flip_rate <= 0.01 + 0.01  # 1 - confidence plus slack


def test_zero_noise_hard_labels_equal_argmax():
    model = tiny_labeler()
    imgs = np.random.default_rng(9).random((2, 3, 32, 32))
    m = generate_token_labels(model, imgs, np.array([0, 0]), GumbelConfig(tau=1.0),
                              mode="hard", noise=np.zeros((2, 16, 8)))
    with ad.no_grad():
        logits = model.forward(imgs).token_logits.data
    assert np.array_equal(m.class_id, logits.argmax(-1))


def test_generate_labels_deterministic_per_stream():
    model = tiny_labeler()
    imgs = np.random.default_rng(10).random((2, 3, 32, 32))
    kw = dict(cfg=GumbelConfig(), mode="hard", seed=5, epoch=2,
              sample_ids=np.array([10, 11]))
    a = generate_token_labels(model, imgs, np.array([0, 1]), **kw)
    b = generate_token_labels(model, imgs, np.array([0, 1]), **kw)
    assert np.array_equal(a.target, b.target)


# ---------------------------------------------------------------------------
# compositing


def one_hot_map(ids, k=8, grid=(4, 4), conf=None):
    ids = np.asarray(ids)
    b, n = ids.shape
    target = np.eye(k)[ids]
    conf = np.full((b, n), 0.9) if conf is None else conf
    return TokenLabelMap(ids.astype(np.int64), conf, target,
                         np.zeros((b, n), dtype=bool), grid)


def test_composite_cutmix_empty_and_full():
    a = one_hot_map(np.zeros((1, 16), dtype=int))
    b = one_hot_map(np.ones((1, 16), dtype=int))
    full = composite_labels(a, b, [MixSpec("cutmix", 0.0, 0, (0, 0, 32, 32))], 8)
    assert np.array_equal(full.class_id, b.class_id)
    empty = composite_labels(a, b, [None], 8)
    assert np.array_equal(empty.class_id, a.class_id)


def test_composite_cutmix_region_tokens():
    a = one_hot_map(np.zeros((1, 16), dtype=int))
    b = one_hot_map(np.ones((1, 16), dtype=int))
    # region = top-left 2x2 patches
    out = composite_labels(a, b, [MixSpec("cutmix", 0.75, 0, (0, 0, 16, 16))], 8)
    grid_ids = out.class_id.reshape(4, 4)
    assert grid_ids[:2, :2].sum() == 4
    assert grid_ids.sum() == 4


def test_composite_cutmix_rejects_unaligned_region():
    a = one_hot_map(np.zeros((1, 16), dtype=int))
    with pytest.raises(ValidationError):
        composite_labels(a, a, [MixSpec("cutmix", 0.5, 0, (3, 0, 16, 16))], 8)


def test_composite_mixup_blend():
    a = one_hot_map(np.zeros((1, 16), dtype=int))
    b = one_hot_map(np.full((1, 16), 2))
    out = composite_labels(a, b, [MixSpec("mixup", 0.5, 0, None)], 8)
    out.validate()
    assert np.allclose(out.target[0, :, 0], 0.5)
    assert np.allclose(out.target[0, :, 2], 0.5)
    assert np.allclose(out.confidence, 0.9)


def test_composite_grid_mismatch():
    a = one_hot_map(np.zeros((1, 16), dtype=int), grid=(4, 4))
    b = one_hot_map(np.zeros((1, 16), dtype=int), grid=(2, 8))
    with pytest.raises(ShapeError):
        composite_labels(a, b, [None], 8)


# ---------------------------------------------------------------------------
# student token loss


def test_student_token_loss_beta_zero_is_exactly_zero():
    model = tiny_labeler()
    out = model.forward(np.random.default_rng(11).random((1, 3, 32, 32)))
    labels = one_hot_map(np.zeros((1, 16), dtype=int))
    loss = student_token_loss(out, labels, beta=0.0)
    assert loss.item() == 0.0


def test_student_token_loss_uniform_logits():
    model = tiny_labeler()
    model.params["token_head.weight"].data[:] = 0.0
    model.params["token_head.bias"].data[:] = 0.0
    out = model.forward(np.random.default_rng(12).random((1, 3, 32, 32)))
    labels = one_hot_map(np.zeros((1, 16), dtype=int))
    loss = student_token_loss(out, labels, beta=1.0, smoothing=0.0)
    assert loss.item() == pytest.approx(np.log(8), abs=1e-9)


def test_student_token_loss_matches_scalar_loop():
    rng = np.random.default_rng(13)
    b, n, k = 2, 4, 3
    logits = rng.normal(size=(b, n, k))
    ids = rng.integers(0, k, size=(b, n))
    target = np.eye(k)[ids]
    labels = TokenLabelMap(ids, np.full((b, n), 0.5), target,
                           np.zeros((b, n), dtype=bool), (2, 2))

    class FakeOut:
        token_logits = ad.Tensor(logits)

    beta, eps = 1.7, 0.1
    got = student_token_loss(FakeOut(), labels, beta=beta, smoothing=eps).item()

    total = 0.0
    for i in range(b):
        for t in range(n):
            row = logits[i, t]
            lse = np.log(np.exp(row - row.max()).sum()) + row.max()
            tgt = target[i, t] * (1 - eps) + eps / k
            total += -(tgt * (row - lse)).sum()
    assert got == pytest.approx(beta * total / (b * n), abs=1e-12)


def test_student_token_loss_grid_mismatch():
    model = tiny_labeler()
    out = model.forward(np.random.default_rng(14).random((1, 3, 32, 32)))
    labels = one_hot_map(np.zeros((1, 9), dtype=int), grid=(3, 3))
    with pytest.raises(ShapeError):
        student_token_loss(out, labels, beta=1.0)


# ---------------------------------------------------------------------------
# CSV export


def test_csv_export_layout():
    m = one_hot_map(np.arange(16)[None] % 8)
    text = token_labels_to_csv(m, sample_ids=[7])
    lines = text.strip().split("\n")
    assert lines[0] == "sample_id,token_row,token_col,class_id,confidence,is_foreground"
    assert len(lines) == 17
    assert lines[1].startswith("7,0,0,0,0.9")
    assert lines[16].startswith("7,3,3,7,0.9")
