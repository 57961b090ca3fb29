"""Model: patch handling, block behavior, head linearity, checkpoint format."""

import numpy as np
import pytest

from stl_vit import FormatError, ShapeError, StateError
from stl_vit import autodiff as ad
from stl_vit.model import (FanModel, ModelConfig, StepRNG, extract_patches,
                           param_shapes)


def small_cfg(**kw):
    base = dict(image_size=32, patch_size=8, embed_dim=16, depth=2, num_heads=2,
                num_classes=4, channel_attn=True, drop_path_rate=0.0, dtype="f64")
    base.update(kw)
    return ModelConfig(**base)


def rand_images(rng, b=2, c=3, s=32):
    return rng.random((b, c, s, s))


# ---------------------------------------------------------------------------
# patch embedding


def test_patch_count():
    cfg = small_cfg()
    assert cfg.num_tokens == 16
    model = FanModel.init(cfg, seed=0)
    out = model.embed_patches(np.zeros((1, 3, 32, 32)))
    assert out.data.shape == (1, 16, 16)


def test_zero_image_zero_projection_gives_positional_embeddings():
    cfg = small_cfg()
    model = FanModel.init(cfg, seed=0)
    model.params["patch_embed.weight"].data[:] = 0.0
    model.params["pos_embed"].data[:] = np.arange(16 * 16, dtype=np.float64).reshape(16, 16)
    out = model.embed_patches(np.zeros((2, 3, 32, 32)))
    assert np.array_equal(out.data[0], model.params["pos_embed"].data)
    assert np.array_equal(out.data[1], model.params["pos_embed"].data)


def test_patch_extraction_matches_index_arithmetic():
    # ramp image: value encodes (channel, row, col) uniquely
    img = np.arange(3 * 32 * 32, dtype=np.float64).reshape(1, 3, 32, 32)
    patches = extract_patches(img, 8)
    assert patches.shape == (1, 16, 192)
    for tok in range(16):
        tr, tc = divmod(tok, 4)
        expected = img[0, :, tr * 8:(tr + 1) * 8, tc * 8:(tc + 1) * 8].reshape(-1)
        assert np.array_equal(patches[0, tok], expected)


def test_patch_embed_size_mismatch():
    model = FanModel.init(small_cfg(), seed=0)
    with pytest.raises(ShapeError):
        model.embed_patches(np.zeros((1, 3, 16, 16)))


# ---------------------------------------------------------------------------
# attention blocks


def test_single_token_attention_weight_is_one():
    # image_size == patch_size gives a single patch token; with the class
    # token the sequence has length 2, so shrink further by calling the
    # block on a length-1 sequence directly.
    cfg = small_cfg()
    model = FanModel.init(cfg, seed=1)
    x = ad.Tensor(np.random.default_rng(0).normal(size=(1, 1, 16)))
    sink = []
    model._self_attention(0, x, training=False, step_rng=None, attn_sink=sink)
    _, _, attn = sink[0]
    assert attn.shape == (1, 2, 1, 1)
    assert np.all(attn == 1.0)


def test_attention_rows_sum_to_one():
    cfg = small_cfg()
    model = FanModel.init(cfg, seed=2)
    rng = np.random.default_rng(3)
    sink = []
    model.forward(rand_images(rng), mode="eval", attn_sink=sink)
    kinds = {kind for kind, _, _ in sink}
    assert kinds == {"self", "channel"}
    for _, _, attn in sink:
        assert np.allclose(attn.sum(axis=-1), 1.0, atol=1e-6)


def test_permutation_equivariance_without_positions():
    cfg = small_cfg(channel_attn=False)
    model = FanModel.init(cfg, seed=4)
    assert np.all(model.params["pos_embed"].data == 0.0)

    rng = np.random.default_rng(5)
    img = rand_images(rng, b=1)
    perm = rng.permutation(16)
    # permute the 8x8 patches of the image according to perm
    patches = extract_patches(img, 8).reshape(1, 16, 3, 8, 8)
    permuted = patches[:, perm]
    img2 = np.zeros_like(img)
    for tok in range(16):
        tr, tc = divmod(tok, 4)
        img2[0, :, tr * 8:(tr + 1) * 8, tc * 8:(tc + 1) * 8] = permuted[0, tok]

    out1 = model.forward(img, mode="eval")
    out2 = model.forward(img2, mode="eval")
    assert np.allclose(out2.token_logits.data[0], out1.token_logits.data[0][perm], atol=1e-10)
    assert np.allclose(out2.cls_logits.data, out1.cls_logits.data, atol=1e-10)


def test_channel_attention_disabled_changes_structure():
    with_ca = set(param_shapes(small_cfg(channel_attn=True)))
    without = set(param_shapes(small_cfg(channel_attn=False)))
    assert {n for n in with_ca - without if "chattn" in n} == with_ca - without


def test_channel_attention_matches_scalar_oracle():
    # D=2, N=1 sequence (no class token): evaluate the block by hand.
    cfg = ModelConfig(image_size=8, patch_size=8, embed_dim=2, depth=1, num_heads=1,
                      num_classes=2, channel_attn=True, drop_path_rate=0.0, dtype="f64")
    model = FanModel.init(cfg, seed=6)
    rng = np.random.default_rng(7)
    for name in ("blocks.0.chattn_q", "blocks.0.chattn_k", "blocks.0.chattn_v",
                 "blocks.0.chattn_proj"):
        model.params[f"{name}.weight"].data[:] = rng.normal(size=model.params[f"{name}.weight"].data.shape)
        model.params[f"{name}.bias"].data[:] = rng.normal(size=model.params[f"{name}.bias"].data.shape)
    x = ad.Tensor(rng.normal(size=(1, 2, 2)))  # (B, T=2, D=2)
    got = model._channel_attention(0, x, training=False, step_rng=None, attn_sink=None).data

    # scalar re-implementation
    gain = model.params["blocks.0.chattn_norm.gain"].data
    bias = model.params["blocks.0.chattn_norm.bias"].data
    h = np.empty_like(x.data[0])
    for t in range(2):
        row = x.data[0, t]
        mu = row.mean()
        var = row.var()
        h[t] = gain * (row - mu) / np.sqrt(var + 1e-5) + bias
    q = (h @ model.params["blocks.0.chattn_q.weight"].data + model.params["blocks.0.chattn_q.bias"].data).T
    k = (h @ model.params["blocks.0.chattn_k.weight"].data + model.params["blocks.0.chattn_k.bias"].data).T
    v = (h @ model.params["blocks.0.chattn_v.weight"].data + model.params["blocks.0.chattn_v.bias"].data).T
    w = np.exp(k - k.max(axis=1, keepdims=True))
    w = w / w.sum(axis=1, keepdims=True)
    context = (w @ v.T) / np.sqrt(2.0)
    out_t = context @ q                       # (D, T)
    out = out_t.T @ model.params["blocks.0.chattn_proj.weight"].data + model.params["blocks.0.chattn_proj.bias"].data
    expected = x.data[0] + out
    assert np.allclose(got[0], expected, atol=1e-12)


def test_self_attention_block_gradient():
    # gradient of the block output w.r.t. its input sequence (D=8, N=3)
    cfg = ModelConfig(image_size=8, patch_size=8, embed_dim=8, depth=1, num_heads=2,
                      num_classes=2, channel_attn=False, drop_path_rate=0.0, dtype="f64")
    model = FanModel.init(cfg, seed=8)
    rng = np.random.default_rng(9)
    for name, p in model.params.items():
        if name.endswith(".weight"):
            p.data[:] = rng.normal(size=p.data.shape) * 0.3
    x = ad.Tensor(rng.normal(size=(1, 3, 8)), requires_grad=True)
    w = rng.normal(size=(1, 3, 8))

    def f(v):
        out = model._self_attention(0, v, training=False, step_rng=None, attn_sink=None)
        return ad.sum_all(ad.mul(out, ad.Tensor(w)))

    assert ad.grad_check(f, x) < 1e-5


def test_channel_attention_block_gradient():
    cfg = ModelConfig(image_size=8, patch_size=8, embed_dim=4, depth=1, num_heads=1,
                      num_classes=2, channel_attn=True, drop_path_rate=0.0, dtype="f64")
    model = FanModel.init(cfg, seed=10)
    rng = np.random.default_rng(11)
    for name, p in model.params.items():
        if name.endswith(".weight"):
            p.data[:] = rng.normal(size=p.data.shape) * 0.3
    x = ad.Tensor(rng.normal(size=(1, 3, 4)), requires_grad=True)
    w = rng.normal(size=(1, 3, 4))

    def f(v):
        out = model._channel_attention(0, v, training=False, step_rng=None, attn_sink=None)
        return ad.sum_all(ad.mul(out, ad.Tensor(w)))

    assert ad.grad_check(f, x) < 1e-5


# ---------------------------------------------------------------------------
# forward contract


def test_forward_shapes():
    cfg = ModelConfig(image_size=32, patch_size=8, embed_dim=64, depth=2, num_heads=4,
                      num_classes=8, drop_path_rate=0.0, dtype="f64")
    model = FanModel.init(cfg, seed=12)
    out = model.forward(rand_images(np.random.default_rng(13), b=3), mode="eval")
    assert out.cls_logits.data.shape == (3, 8)
    assert out.token_logits.data.shape == (3, 16, 8)
    assert out.token_embeddings.data.shape == (3, 16, 64)
    assert out.pooled_logits.data.shape == (3, 8)


def test_identical_images_identical_rows():
    model = FanModel.init(small_cfg(), seed=14)
    img = rand_images(np.random.default_rng(15), b=1)
    batch = np.concatenate([img, img], axis=0)
    out = model.forward(batch, mode="eval")
    assert np.array_equal(out.cls_logits.data[0], out.cls_logits.data[1])
    assert np.array_equal(out.token_logits.data[0], out.token_logits.data[1])


def test_eval_forward_is_pure():
    model = FanModel.init(small_cfg(), seed=16)
    img = rand_images(np.random.default_rng(17))
    a = model.forward(img, mode="eval")
    b = model.forward(img, mode="eval")
    assert np.array_equal(a.cls_logits.data, b.cls_logits.data)
    assert np.array_equal(a.token_logits.data, b.token_logits.data)


def test_head_commutes_with_token_average():
    model = FanModel.init(small_cfg(dtype="f32"), seed=18)
    out = model.forward(rand_images(np.random.default_rng(19), b=4).astype(np.float32),
                        mode="eval")
    mean_of_logits = out.token_logits.data.mean(axis=1)
    assert np.allclose(out.pooled_logits.data, mean_of_logits, atol=1e-6)


def test_forward_requires_params():
    model = FanModel(small_cfg())
    with pytest.raises(StateError):
        model.forward(np.zeros((1, 3, 32, 32)))


def test_drop_path_requires_rng_in_training():
    model = FanModel.init(small_cfg(drop_path_rate=0.1), seed=20)
    img = rand_images(np.random.default_rng(21))
    with pytest.raises(Exception):
        model.forward(img, mode="train", step_rng=None)
    out = model.forward(img, mode="train", step_rng=StepRNG(seed=0, step=0))
    assert np.all(np.isfinite(out.cls_logits.data))


def test_end_to_end_gradient_through_patch_embedding():
    cfg = ModelConfig(image_size=16, patch_size=8, embed_dim=8, depth=2, num_heads=2,
                      num_classes=3, channel_attn=True, drop_path_rate=0.0, dtype="f64")
    model = FanModel.init(cfg, seed=22)
    rng = np.random.default_rng(23)
    img = rng.random((2, 3, 16, 16))
    target = ad.one_hot([0, 2], 3).data
    probe = model.params["patch_embed.weight"]
    probe.data[:] = rng.normal(size=probe.data.shape) * 0.05

    def f(_):
        out = model.forward(img, mode="eval")
        return ad.cross_entropy(out.cls_logits, target)

    assert ad.grad_check(f, probe, eps=1e-5) < 1e-4


# ---------------------------------------------------------------------------
# checkpoints


def test_checkpoint_roundtrip_bit_exact():
    model = FanModel.init(small_cfg(dtype="f32"), seed=24)
    blob = model.save_bytes()
    loaded = FanModel.load_bytes(blob)
    img = rand_images(np.random.default_rng(25)).astype(np.float32)
    a = model.forward(img, mode="eval")
    b = loaded.forward(img, mode="eval")
    assert np.array_equal(a.cls_logits.data, b.cls_logits.data)
    assert np.array_equal(a.token_logits.data, b.token_logits.data)
    # and the reserialization is byte-identical
    assert loaded.save_bytes() == blob


def test_checkpoint_truncated():
    blob = FanModel.init(small_cfg(), seed=26).save_bytes()
    with pytest.raises(FormatError):
        FanModel.load_bytes(blob[:len(blob) // 2])


def test_checkpoint_bad_magic():
    blob = FanModel.init(small_cfg(), seed=27).save_bytes()
    with pytest.raises(FormatError):
        FanModel.load_bytes(b"NOTMAGIC" + blob[8:])


def test_checkpoint_foreign_endianness_rejected():
    blob = bytearray(FanModel.init(small_cfg(), seed=28).save_bytes())
    # byte-swap the config length field as a big-endian writer would produce
    import struct

    (cfg_len,) = struct.unpack("<I", blob[8:12])
    blob[8:12] = struct.pack(">I", cfg_len)
    with pytest.raises(FormatError):
        FanModel.load_bytes(bytes(blob))


def test_checkpoint_shape_mismatch():
    a = FanModel.init(small_cfg(), seed=29)
    b = FanModel.init(small_cfg(embed_dim=32), seed=29)
    # graft b's params onto a's config by rewriting the config json
    blob = b.save_bytes()
    import json
    import struct

    (cfg_len,) = struct.unpack("<I", blob[8:12])
    cfg = json.loads(blob[12:12 + cfg_len])
    cfg["embed_dim"] = a.config.embed_dim
    new_cfg = json.dumps(cfg, sort_keys=True).encode()
    forged = blob[:8] + struct.pack("<I", len(new_cfg)) + new_cfg + blob[12 + cfg_len:]
    with pytest.raises(FormatError):
        FanModel.load_bytes(forged)
