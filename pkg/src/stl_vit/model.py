"""Miniature fully-attentional vision transformer.

One model class serves as both the token labeler and the student: it emits a
class-token logit vector, per-patch-token logits from a single weight-shared
linear head, and the pre-head patch embeddings. Uses a plain linear patch
stem; the channel-attention block is a simplified stand-in (softmax over the
token axis of the transposed token matrix, then cross-channel aggregation),
since the original block's internals are defined outside this project.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, fields

import numpy as np
from scipy.special import ndtri

from . import autodiff as ad
from .errors import FormatError, ShapeError, StateError, ValidationError
from .rng import Purpose, stream

CHECKPOINT_MAGIC = b"STLCKPT1"
_DTYPE_TAGS = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_TAG_FOR = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_MAX_NAME = 1024
_MAX_RANK = 8


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 32
    patch_size: int = 8
    embed_dim: int = 64
    depth: int = 4
    num_heads: int = 4
    num_classes: int = 8
    channel_attn: bool = True
    channel_attn_every: int = 1
    drop_path_rate: float = 0.05
    mlp_ratio: float = 2.0
    in_channels: int = 3
    dtype: str = "f32"

    def __post_init__(self):
        if self.image_size <= 0 or self.patch_size <= 0:
            raise ValidationError("image_size and patch_size must be positive")
        if self.image_size % self.patch_size != 0:
            raise ValidationError(
                f"patch_size {self.patch_size} must divide image_size {self.image_size}")
        if self.embed_dim % self.num_heads != 0:
            raise ValidationError(
                f"num_heads {self.num_heads} must divide embed_dim {self.embed_dim}")
        if not 0.0 <= self.drop_path_rate < 1.0:
            raise ValidationError("drop_path_rate must be in [0, 1)")
        if self.mlp_ratio <= 0:
            raise ValidationError("mlp_ratio must be positive")
        if self.num_classes < 2:
            raise ValidationError("num_classes must be >= 2")
        if self.channel_attn_every < 1:
            raise ValidationError("channel_attn_every must be >= 1")
        if self.dtype not in ("f32", "f64"):
            raise ValidationError(f"dtype must be 'f32' or 'f64', got {self.dtype!r}")

    @property
    def grid_size(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_tokens(self) -> int:
        return self.grid_size * self.grid_size

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "f32" else np.float64

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class ModelOutput:
    """Outputs of one forward pass (consistent batch across all fields)."""

    cls_logits: ad.Tensor          # (B, K)
    token_logits: ad.Tensor        # (B, N, K)
    token_embeddings: ad.Tensor    # (B, N, D), after the final norm, before the head
    pooled_logits: ad.Tensor       # (B, K), token head applied to the mean patch embedding


@dataclass
class StepRNG:
    """Per-step randomness for stochastic branches (drop path)."""

    seed: int
    step: int

    def branch(self, branch_id: int) -> np.random.Generator:
        return stream(self.seed, Purpose.DROP_PATH, self.step, branch_id)


def extract_patches(images: np.ndarray, patch_size: int) -> np.ndarray:
    """(B, C, H, W) -> (B, N, C*ps*ps), patches in row-major grid order."""
    b, c, h, w = images.shape
    g_h, g_w = h // patch_size, w // patch_size
    x = images.reshape(b, c, g_h, patch_size, g_w, patch_size)
    x = x.transpose(0, 2, 4, 1, 3, 5)
    return x.reshape(b, g_h * g_w, c * patch_size * patch_size)


def _trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Truncated normal at +/- 2 std, sampled by inverse CDF (deterministic)."""
    lo, hi = 0.02275013194817921, 0.9772498680518208  # Phi(-2), Phi(2)
    u = rng.uniform(lo, hi, size=shape)
    return ndtri(u) * std


def _weight_std(fan_in: int, fan_out: int) -> float:
    # width-aware scale: a fixed 0.02 (common at embed dims in the hundreds)
    # starves attention logits at desk widths and training stalls
    return float(np.sqrt(2.0 / (fan_in + fan_out)))


def param_shapes(config: ModelConfig) -> dict[str, tuple]:
    """Name -> shape for every parameter, in canonical (checkpoint) order."""
    d = config.embed_dim
    hidden = int(round(config.mlp_ratio * d))
    patch_dim = config.in_channels * config.patch_size ** 2
    shapes: dict[str, tuple] = {}

    def lin(name, fan_in, fan_out):
        shapes[f"{name}.weight"] = (fan_in, fan_out)
        shapes[f"{name}.bias"] = (fan_out,)

    def norm(name):
        shapes[f"{name}.gain"] = (d,)
        shapes[f"{name}.bias"] = (d,)

    lin("patch_embed", patch_dim, d)
    shapes["pos_embed"] = (config.num_tokens, d)
    shapes["cls_token"] = (1, 1, d)
    for i in range(config.depth):
        norm(f"blocks.{i}.attn_norm")
        for proj in ("q", "k", "v"):
            lin(f"blocks.{i}.attn_{proj}", d, d)
        lin(f"blocks.{i}.attn_proj", d, d)
        norm(f"blocks.{i}.mlp_norm")
        lin(f"blocks.{i}.mlp_fc1", d, hidden)
        lin(f"blocks.{i}.mlp_fc2", hidden, d)
        if config.channel_attn and (i + 1) % config.channel_attn_every == 0:
            norm(f"blocks.{i}.chattn_norm")
            for proj in ("q", "k", "v"):
                lin(f"blocks.{i}.chattn_{proj}", d, d)
            lin(f"blocks.{i}.chattn_proj", d, d)
    norm("final_norm")
    lin("class_head", d, config.num_classes)
    lin("token_head", d, config.num_classes)
    return shapes


class FanModel:
    """Transformer encoder with class + shared per-token heads."""

    def __init__(self, config: ModelConfig, params: dict | None = None):
        self.config = config
        self.params = params
        # per-block stochastic-depth rates: standard linear ramp up to the cap
        if config.depth > 1:
            self.drop_path_rates = [config.drop_path_rate * i / (config.depth - 1)
                                    for i in range(config.depth)]
        else:
            self.drop_path_rates = [config.drop_path_rate]

    # -- construction ------------------------------------------------------

    @classmethod
    def init(cls, config: ModelConfig, seed: int) -> "FanModel":
        rng = stream(seed, Purpose.PARAM_INIT)
        dt = config.np_dtype
        params: dict[str, ad.Tensor] = {}
        for name, shape in param_shapes(config).items():
            if name.endswith(".weight"):
                arr = _trunc_normal(rng, shape, std=_weight_std(shape[0], shape[1]))
            elif name.endswith(".gain"):
                arr = np.ones(shape)
            else:  # biases, positional embeddings, class token start at zero
                arr = np.zeros(shape)
            params[name] = ad.Tensor(np.ascontiguousarray(arr, dtype=dt), requires_grad=True)
        return cls(config, params)

    def _require_params(self):
        if self.params is None:
            raise StateError("model has no parameters; call FanModel.init or load a checkpoint")

    def num_parameters(self) -> int:
        self._require_params()
        return sum(t.data.size for t in self.params.values())

    def zero_grads(self):
        self._require_params()
        for t in self.params.values():
            t.zero_grad()

    def clone(self) -> "FanModel":
        self._require_params()
        params = {k: ad.Tensor(t.data.copy(), requires_grad=True) for k, t in self.params.items()}
        return FanModel(self.config, params)

    # -- forward pieces ------------------------------------------------------

    def embed_patches(self, images: np.ndarray) -> ad.Tensor:
        """Patchify + project + add positional embeddings -> (B, N, D)."""
        self._require_params()
        cfg = self.config
        b, c, h, w = images.shape
        if h != cfg.image_size or w != cfg.image_size or c != cfg.in_channels:
            raise ShapeError(
                f"expected images (B, {cfg.in_channels}, {cfg.image_size}, {cfg.image_size}), "
                f"got {images.shape}")
        patches = ad.Tensor(extract_patches(np.asarray(images, dtype=cfg.np_dtype), cfg.patch_size))
        tokens = ad.linear(patches, self.params["patch_embed.weight"],
                           self.params["patch_embed.bias"])
        pos = ad.reshape(self.params["pos_embed"], (1, cfg.num_tokens, cfg.embed_dim))
        return ad.add(tokens, ad.expand_batch(pos, b))

    def _self_attention(self, i: int, x: ad.Tensor, training: bool,
                        step_rng: StepRNG | None, attn_sink: list | None) -> ad.Tensor:
        cfg = self.config
        h = ad.layernorm(x, self.params[f"blocks.{i}.attn_norm.gain"],
                         self.params[f"blocks.{i}.attn_norm.bias"])
        probs = [] if attn_sink is not None else None
        p = self.params
        ctx = ad.multi_head_attention(
            h, p[f"blocks.{i}.attn_q.weight"], p[f"blocks.{i}.attn_q.bias"],
            p[f"blocks.{i}.attn_k.weight"], p[f"blocks.{i}.attn_k.bias"],
            p[f"blocks.{i}.attn_v.weight"], p[f"blocks.{i}.attn_v.bias"],
            cfg.num_heads, attn_out=probs)
        if attn_sink is not None:
            attn_sink.append(("self", i, probs[0]))
        out = ad.linear(ctx, p[f"blocks.{i}.attn_proj.weight"],
                        p[f"blocks.{i}.attn_proj.bias"])
        out = self._drop_path(out, i, 0, training, step_rng)
        x = ad.add(x, out)

        h2 = ad.layernorm(x, self.params[f"blocks.{i}.mlp_norm.gain"],
                          self.params[f"blocks.{i}.mlp_norm.bias"])
        m = ad.linear(h2, self.params[f"blocks.{i}.mlp_fc1.weight"],
                      self.params[f"blocks.{i}.mlp_fc1.bias"])
        m = ad.linear(ad.gelu(m), self.params[f"blocks.{i}.mlp_fc2.weight"],
                      self.params[f"blocks.{i}.mlp_fc2.bias"])
        m = self._drop_path(m, i, 1, training, step_rng)
        return ad.add(x, m)

    def _channel_attention(self, i: int, x: ad.Tensor, training: bool,
                           step_rng: StepRNG | None, attn_sink: list | None) -> ad.Tensor:
        # Stand-in block: project tokens, transpose to channel-major (B, D, T),
        # soft-select tokens per channel, aggregate cross-channel context, and
        # re-expand along the query path. Softmax is over the token axis.
        h = ad.layernorm(x, self.params[f"blocks.{i}.chattn_norm.gain"],
                         self.params[f"blocks.{i}.chattn_norm.bias"])
        probs = [] if attn_sink is not None else None
        p = self.params
        out = ad.channel_token_attention(
            h, p[f"blocks.{i}.chattn_q.weight"], p[f"blocks.{i}.chattn_q.bias"],
            p[f"blocks.{i}.chattn_k.weight"], p[f"blocks.{i}.chattn_k.bias"],
            p[f"blocks.{i}.chattn_v.weight"], p[f"blocks.{i}.chattn_v.bias"],
            attn_out=probs)
        if attn_sink is not None:
            attn_sink.append(("channel", i, probs[0]))
        out = ad.linear(out, p[f"blocks.{i}.chattn_proj.weight"],
                        p[f"blocks.{i}.chattn_proj.bias"])
        out = self._drop_path(out, i, 2, training, step_rng)
        return ad.add(x, out)

    def _drop_path(self, branch: ad.Tensor, block: int, sub: int, training: bool,
                   step_rng: StepRNG | None) -> ad.Tensor:
        rate = self.drop_path_rates[block]
        if not training or rate == 0.0:
            return ad.drop_path(branch, rate, None, training=False)
        if step_rng is None:
            raise ValidationError("training forward with drop_path_rate > 0 requires a StepRNG")
        return ad.drop_path(branch, rate, step_rng.branch(block * 4 + sub), training=True)

    def forward(self, images: np.ndarray, mode: str = "eval",
                step_rng: StepRNG | None = None, attn_sink: list | None = None) -> ModelOutput:
        self._require_params()
        if mode not in ("train", "eval"):
            raise ValidationError(f"mode must be 'train' or 'eval', got {mode!r}")
        cfg = self.config
        training = mode == "train"
        b = images.shape[0]

        tokens = self.embed_patches(images)
        cls = ad.expand_batch(self.params["cls_token"], b)
        x = ad.concat([cls, tokens], axis=1)
        for i in range(cfg.depth):
            x = self._self_attention(i, x, training, step_rng, attn_sink)
            if cfg.channel_attn and (i + 1) % cfg.channel_attn_every == 0:
                x = self._channel_attention(i, x, training, step_rng, attn_sink)
        x = ad.layernorm(x, self.params["final_norm.gain"], self.params["final_norm.bias"])

        cls_emb = ad.reshape(ad.narrow(x, 1, 0, 1), (b, cfg.embed_dim))
        token_emb = ad.narrow(x, 1, 1, cfg.num_tokens)
        cls_logits = ad.linear(cls_emb, self.params["class_head.weight"],
                               self.params["class_head.bias"])
        token_logits = ad.linear(token_emb, self.params["token_head.weight"],
                                 self.params["token_head.bias"])
        pooled_logits = ad.linear(ad.mean_axis(token_emb, 1), self.params["token_head.weight"],
                                  self.params["token_head.bias"])
        return ModelOutput(cls_logits, token_logits, token_emb, pooled_logits)

    # -- serialization -------------------------------------------------------

    def save_bytes(self) -> bytes:
        self._require_params()
        buf = io.BytesIO()
        buf.write(CHECKPOINT_MAGIC)
        cfg_json = json.dumps(self.config.to_dict(), sort_keys=True).encode("utf-8")
        buf.write(struct.pack("<I", len(cfg_json)))
        buf.write(cfg_json)
        for name, tensor in self.params.items():
            arr = tensor.data
            name_b = name.encode("utf-8")
            buf.write(struct.pack("<I", len(name_b)))
            buf.write(name_b)
            buf.write(struct.pack("<B", _TAG_FOR[arr.dtype]))
            buf.write(struct.pack("<I", arr.ndim))
            for extent in arr.shape:
                buf.write(struct.pack("<I", extent))
            buf.write(np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<")).tobytes())
        return buf.getvalue()

    @classmethod
    def load_bytes(cls, data: bytes) -> "FanModel":
        view = memoryview(data)
        pos = 0

        def take(n, what):
            nonlocal pos
            if pos + n > len(view):
                raise FormatError(f"checkpoint truncated while reading {what}")
            chunk = view[pos:pos + n]
            pos += n
            return chunk

        if bytes(take(8, "magic")) != CHECKPOINT_MAGIC:
            raise FormatError("bad checkpoint magic (not an STLCKPT1 file)")
        (cfg_len,) = struct.unpack("<I", take(4, "config length"))
        if cfg_len > 1 << 20:
            raise FormatError("unreasonable config length (foreign endianness or corruption)")
        try:
            config = ModelConfig.from_dict(json.loads(bytes(take(cfg_len, "config"))))
        except (json.JSONDecodeError, UnicodeDecodeError, TypeError) as e:
            raise FormatError(f"unparseable checkpoint config: {e}") from e

        params: dict[str, ad.Tensor] = {}
        while pos < len(view):
            (name_len,) = struct.unpack("<I", take(4, "name length"))
            if name_len == 0 or name_len > _MAX_NAME:
                raise FormatError(f"implausible parameter name length {name_len}")
            name = bytes(take(name_len, "name")).decode("utf-8")
            (tag,) = struct.unpack("<B", take(1, "dtype tag"))
            if tag not in _DTYPE_TAGS:
                raise FormatError(f"unknown dtype tag {tag}")
            (rank,) = struct.unpack("<I", take(4, "rank"))
            if rank > _MAX_RANK:
                raise FormatError(f"implausible rank {rank}")
            shape = tuple(struct.unpack("<I", take(4, "extent"))[0] for _ in range(rank))
            dtype = _DTYPE_TAGS[tag]
            count = int(np.prod(shape, dtype=np.int64)) if shape else 1
            raw = take(count * dtype.itemsize, f"payload of {name}")
            arr = np.frombuffer(raw, dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))
            params[name] = ad.Tensor(arr, requires_grad=True)

        expected = param_shapes(config)
        if set(params) != set(expected):
            missing = sorted(set(expected) - set(params))
            extra = sorted(set(params) - set(expected))
            raise FormatError(f"parameter set mismatch (missing={missing}, extra={extra})")
        for name, shape in expected.items():
            if params[name].data.shape != shape:
                raise FormatError(
                    f"shape mismatch for {name}: {params[name].data.shape} vs {shape}")
        return cls(config, params)
