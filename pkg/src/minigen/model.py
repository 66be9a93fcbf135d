"""Transformer LM and encoder-decoder built from one block implementation."""

from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Iterator

import numpy as np

from . import numcore as nc
from .errors import PreconditionError
from .numcore import Tensor

LM = "LM"
ENCDEC = "ENCDEC"
VARIANTS = (LM, ENCDEC)

# additive attention mask value; exp() of it underflows to exactly 0 in both dtypes
MASK_VALUE = -1e9
INIT_STD = 0.02


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int = 2
    d_model: int = 64
    num_heads: int = 4
    d_ff: int = 256
    context_length: int = 128
    vocab_size: int = 100
    encoder_bidirectional: bool = False
    dropout_rate: float = 0.0
    pre_norm: bool = False
    tie_embeddings: bool = True
    share_encdec_embeddings: bool = True
    output_bias: bool = False

    def __post_init__(self):
        for name in ("num_layers", "d_model", "num_heads", "d_ff", "context_length", "vocab_size"):
            if getattr(self, name) < 1:
                raise PreconditionError(f"{name} must be positive")
        if self.d_model % self.num_heads:
            raise PreconditionError(f"d_model {self.d_model} not divisible by num_heads {self.num_heads}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise PreconditionError("dropout_rate must be in [0, 1)")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.num_heads

    @classmethod
    def desk(cls, **overrides) -> "ModelConfig":
        return cls(**{**dict(num_layers=2, d_model=64, num_heads=4, d_ff=256, context_length=128), **overrides})

    @classmethod
    def full(cls, **overrides) -> "ModelConfig":
        """Full-size 12-layer shape; too large to train here, used for parameter accounting."""
        base = dict(num_layers=12, d_model=768, num_heads=12, d_ff=3072, context_length=512, vocab_size=63807)
        return cls(**{**base, **overrides})

    @classmethod
    def full_small(cls, **overrides) -> "ModelConfig":
        """4-layer variant with a bidirectional encoder."""
        return cls.full(**{"num_layers": 4, "encoder_bidirectional": True, **overrides})

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)

    def with_(self, **changes) -> "ModelConfig":
        return replace(self, **changes)


# ---------------------------------------------------------------------------
# parameter layout
# ---------------------------------------------------------------------------


def _attention_shapes(prefix: str, d: int) -> dict[str, tuple[int, ...]]:
    out = {}
    for proj in ("q", "k", "v", "o"):
        out[f"{prefix}.{proj}.w"] = (d, d)
        out[f"{prefix}.{proj}.b"] = (d,)
    return out


def block_shapes(prefix: str, cfg: ModelConfig, cross: bool = False) -> dict[str, tuple[int, ...]]:
    d, f = cfg.d_model, cfg.d_ff
    shapes = _attention_shapes(f"{prefix}.attn", d)
    shapes.update({f"{prefix}.ln1.g": (d,), f"{prefix}.ln1.b": (d,)})
    if cross:
        shapes.update(_attention_shapes(f"{prefix}.cross", d))
        shapes.update({f"{prefix}.cross.ln.g": (d,), f"{prefix}.cross.ln.b": (d,)})
    shapes.update(
        {
            f"{prefix}.ff.w1": (d, f),
            f"{prefix}.ff.b1": (f,),
            f"{prefix}.ff.w2": (f, d),
            f"{prefix}.ff.b2": (d,),
            f"{prefix}.ln2.g": (d,),
            f"{prefix}.ln2.b": (d,),
        }
    )
    return shapes


def _embedding_shapes(prefix: str, cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    return {f"{prefix}tok_emb": (cfg.vocab_size, cfg.d_model), f"{prefix}pos_emb": (cfg.context_length, cfg.d_model)}


def _stack_shapes(prefix: str, cfg: ModelConfig, cross: bool) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {}
    for i in range(cfg.num_layers):
        shapes.update(block_shapes(f"{prefix}layers.{i}", cfg, cross=cross))
    if cfg.pre_norm:
        shapes.update({f"{prefix}final_ln.g": (cfg.d_model,), f"{prefix}final_ln.b": (cfg.d_model,)})
    return shapes


def _head_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {}
    if not cfg.tie_embeddings:
        shapes["out_proj.w"] = (cfg.d_model, cfg.vocab_size)
    if cfg.output_bias:
        shapes["out_proj.b"] = (cfg.vocab_size,)
    return shapes


def param_shapes(cfg: ModelConfig, variant: str = LM) -> dict[str, tuple[int, ...]]:
    """Every parameter tensor name and shape, in canonical order."""
    if variant == LM:
        shapes = _embedding_shapes("", cfg)
        shapes.update(_stack_shapes("", cfg, cross=False))
    elif variant == ENCDEC:
        shapes = _embedding_shapes("", cfg)
        if not cfg.share_encdec_embeddings:
            shapes.update(_embedding_shapes("encoder.", cfg))
        shapes.update(_stack_shapes("encoder.", cfg, cross=False))
        shapes.update(_stack_shapes("decoder.", cfg, cross=True))
    else:
        raise PreconditionError(f"unknown variant {variant!r}")
    shapes.update(_head_shapes(cfg))
    return shapes


def is_cross_attention(name: str) -> bool:
    return ".cross." in name


def lm_name_for(name: str) -> str | None:
    """Map an encoder-decoder tensor name to the LM tensor it mirrors (None for cross-attention)."""
    if is_cross_attention(name):
        return None
    for prefix in ("encoder.", "decoder."):
        if name.startswith(prefix):
            return name[len(prefix) :]
    return name


def stack_of(name: str) -> str:
    """'encoder', 'decoder', 'embeddings', or 'head'. The LM's single stack counts as a decoder."""
    if name.endswith("_emb"):
        return "embeddings"
    if name.startswith("encoder."):
        return "encoder"
    if name.startswith(("decoder.", "layers.", "final_ln.")):
        return "decoder"
    return "head"


def name_seed(seed: int, name: str) -> list[int]:
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    return [int(seed), int.from_bytes(digest[:8], "little")]


def init_tensor(name: str, shape: tuple[int, ...], seed: int, dtype=np.float32) -> np.ndarray:
    """Deterministic per-name initial value: N(0, 0.02) matrices, zero biases, unit gains."""
    last = name.rsplit(".", 1)[-1]
    if name.endswith(".g"):
        return np.ones(shape, dtype=dtype)
    if len(shape) == 1 and last.startswith("b"):
        return np.zeros(shape, dtype=dtype)
    rng = np.random.default_rng(name_seed(seed, name))
    return (rng.standard_normal(shape) * INIT_STD).astype(dtype)


@dataclass
class WeightSet:
    config: ModelConfig
    variant: str
    tensors: dict[str, Tensor] = field(default_factory=dict)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def items(self):
        return self.tensors.items()

    @property
    def dtype(self):
        return next(iter(self.tensors.values())).dtype

    @property
    def output_projection(self) -> Tensor:
        """[d, V] view of the logit projection source (tied: the token embedding itself)."""
        return self.tensors["tok_emb"] if self.config.tie_embeddings else self.tensors["out_proj.w"]

    def parameters(self) -> list[Tensor]:
        return list(self.tensors.values())

    def num_params(self) -> int:
        return int(sum(t.data.size for t in self.tensors.values()))

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.zero_grad()

    def copy(self) -> "WeightSet":
        return WeightSet(
            self.config,
            self.variant,
            {k: Tensor(v.data, requires_grad=v.requires_grad) for k, v in self.tensors.items()},
        )

    def astype(self, dtype) -> "WeightSet":
        return WeightSet(
            self.config,
            self.variant,
            {k: Tensor(v.data.astype(dtype), requires_grad=v.requires_grad) for k, v in self.tensors.items()},
        )

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.tensors.items()}


def init_weights(cfg: ModelConfig, seed: int, variant: str = LM, dtype=np.float32) -> WeightSet:
    tensors = {
        name: Tensor(init_tensor(name, shape, seed, dtype), requires_grad=True)
        for name, shape in param_shapes(cfg, variant).items()
    }
    return WeightSet(cfg, variant, tensors)


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------


def causal_mask(t: int, dtype) -> np.ndarray:
    return np.triu(np.full((t, t), MASK_VALUE, dtype=dtype), k=1)


def _attention_bias(
    q_len: int,
    k_len: int,
    causal: bool,
    key_pad: np.ndarray | None,
    dtype,
) -> np.ndarray | None:
    """Additive [B|1, 1, q_len, k_len] mask, or None if nothing is masked."""
    bias = None
    if causal:
        bias = causal_mask(k_len, dtype)[k_len - q_len :][None, None]
    if key_pad is not None and key_pad.any():
        pad_bias = np.where(key_pad, MASK_VALUE, 0.0).astype(dtype)[:, None, None, :]
        bias = pad_bias if bias is None else bias + pad_bias
    return bias


def _dropout(x: Tensor, rate: float, rng) -> Tensor:
    return nc.dropout(x, rate, rng) if rng is not None else x


def _split_heads(x: Tensor, h: int) -> Tensor:
    b, t, d = x.shape
    return nc.transpose(nc.reshape(x, (b, t, h, d // h)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    b, h, t, dh = x.shape
    return nc.reshape(nc.transpose(x, (0, 2, 1, 3)), (b, t, h * dh))


def attention(
    w: WeightSet,
    prefix: str,
    x: Tensor,
    memory: Tensor,
    bias: np.ndarray | None,
    rng=None,
) -> Tensor:
    """Multi-head scaled dot-product attention of ``x`` over ``memory``."""
    cfg = w.config
    h = cfg.num_heads
    q = _split_heads(x @ w[f"{prefix}.q.w"] + w[f"{prefix}.q.b"], h)
    k = _split_heads(memory @ w[f"{prefix}.k.w"] + w[f"{prefix}.k.b"], h)
    v = _split_heads(memory @ w[f"{prefix}.v.w"] + w[f"{prefix}.v.b"], h)
    scores = nc.scale(q @ nc.transpose(k, (0, 1, 3, 2)), 1.0 / math.sqrt(cfg.head_dim))
    if bias is not None:
        scores = scores + Tensor(bias)
    probs = _dropout(nc.softmax(scores, axis=-1), cfg.dropout_rate, rng)
    out = _merge_heads(probs @ v)
    return out @ w[f"{prefix}.o.w"] + w[f"{prefix}.o.b"]


def _sublayer(w: WeightSet, ln: str, x: Tensor, fn, rng) -> Tensor:
    cfg = w.config
    if cfg.pre_norm:
        y = fn(nc.layer_norm(x, w[f"{ln}.g"], w[f"{ln}.b"]))
        return x + _dropout(y, cfg.dropout_rate, rng)
    y = fn(x)
    return nc.layer_norm(x + _dropout(y, cfg.dropout_rate, rng), w[f"{ln}.g"], w[f"{ln}.b"])


def block(
    w: WeightSet,
    prefix: str,
    x: Tensor,
    self_bias: np.ndarray | None,
    memory: Tensor | None = None,
    cross_bias: np.ndarray | None = None,
    rng=None,
) -> Tensor:
    x = _sublayer(w, f"{prefix}.ln1", x, lambda z: attention(w, f"{prefix}.attn", z, z, self_bias, rng), rng)
    if memory is not None:
        x = _sublayer(
            w, f"{prefix}.cross.ln", x, lambda z: attention(w, f"{prefix}.cross", z, memory, cross_bias, rng), rng
        )

    def ff(z):
        return nc.gelu(z @ w[f"{prefix}.ff.w1"] + w[f"{prefix}.ff.b1"]) @ w[f"{prefix}.ff.w2"] + w[f"{prefix}.ff.b2"]

    return _sublayer(w, f"{prefix}.ln2", x, ff, rng)


def _as_batch(ids) -> tuple[np.ndarray, bool]:
    ids = np.asarray(ids)
    if ids.dtype.kind not in "iu":
        if ids.size == 0:
            ids = ids.astype(np.int64)
        else:
            raise PreconditionError("token ids must be integers")
    if ids.ndim == 1:
        return ids[None, :], True
    if ids.ndim == 2:
        return ids, False
    raise PreconditionError(f"ids must be 1-D or 2-D, got shape {ids.shape}")


def _check_ids(cfg: ModelConfig, ids: np.ndarray, what: str) -> None:
    t = ids.shape[1]
    if t == 0:
        raise PreconditionError(f"{what} is empty")
    if t > cfg.context_length:
        raise PreconditionError(f"{what} length {t} exceeds context_length {cfg.context_length}")
    if ids.min() < 0 or ids.max() >= cfg.vocab_size:
        raise PreconditionError(f"{what} contains ids outside [0, {cfg.vocab_size})")


def _embed(w: WeightSet, ids: np.ndarray, prefix: str, rng) -> Tensor:
    t = ids.shape[1]
    x = nc.embedding(w[f"{prefix}tok_emb"], ids) + nc.embedding(w[f"{prefix}pos_emb"], np.arange(t))
    return _dropout(x, w.config.dropout_rate, rng)


def _stack(w: WeightSet, prefix: str, x: Tensor, self_bias, memory=None, cross_bias=None, rng=None) -> Tensor:
    cfg = w.config
    for i in range(cfg.num_layers):
        x = block(w, f"{prefix}layers.{i}", x, self_bias, memory, cross_bias, rng)
    if cfg.pre_norm:
        x = nc.layer_norm(x, w[f"{prefix}final_ln.g"], w[f"{prefix}final_ln.b"])
    return x


def _project(w: WeightSet, h: Tensor) -> Tensor:
    if w.config.tie_embeddings:
        logits = h @ nc.transpose(w["tok_emb"], (1, 0))
    else:
        logits = h @ w["out_proj.w"]
    if w.config.output_bias:
        logits = logits + w["out_proj.b"]
    return logits


def _take_last(h: Tensor, positions: np.ndarray | None) -> Tensor:
    """Select one row per batch element (default: the final position)."""
    b, t, d = h.shape
    if positions is None:
        positions = np.full(b, t - 1)
    flat = nc.reshape(h, (b * t, d))
    return nc.reshape(nc.embedding(flat, np.arange(b) * t + np.asarray(positions)), (b, 1, d))


def lm_forward(
    w: WeightSet,
    ids,
    pad_mask: np.ndarray | None = None,
    rng: np.random.Generator | None = None,
    last_only: bool = False,
    last_positions: np.ndarray | None = None,
) -> Tensor:
    """Causal LM logits. Row t predicts token t+1.

    ``ids`` is [T] or [B, T]; output is [T, V] or [B, T, V] to match.
    ``rng`` enables dropout (training). ``last_only`` returns only the row
    used for next-token prediction.
    """
    if w.variant != LM:
        raise PreconditionError("lm_forward needs LM weights")
    batch, squeeze = _as_batch(ids)
    _check_ids(w.config, batch, "input")
    t = batch.shape[1]
    bias = _attention_bias(t, t, True, pad_mask, w.dtype)
    h = _stack(w, "", _embed(w, batch, "", rng), bias, rng=rng)
    if last_only:
        h = _take_last(h, last_positions)
    logits = _project(w, h)
    return nc.reshape(logits, logits.shape[1:]) if squeeze else logits


def _enc_prefix(w: WeightSet) -> str:
    return "" if w.config.share_encdec_embeddings else "encoder."


def encode(w: WeightSet, src, src_pad: np.ndarray | None = None, rng=None) -> Tensor:
    """Encoder states [B, S, d] (or [S, d] for 1-D input)."""
    if w.variant != ENCDEC:
        raise PreconditionError("encode needs encoder-decoder weights")
    batch, squeeze = _as_batch(src)
    _check_ids(w.config, batch, "source")
    s = batch.shape[1]
    bias = _attention_bias(s, s, not w.config.encoder_bidirectional, src_pad, w.dtype)
    h = _stack(w, "encoder.", _embed(w, batch, _enc_prefix(w), rng), bias, rng=rng)
    return nc.reshape(h, h.shape[1:]) if squeeze else h


def decode_step(
    w: WeightSet,
    memory: Tensor,
    tgt,
    src_pad: np.ndarray | None = None,
    tgt_pad: np.ndarray | None = None,
    rng=None,
    last_only: bool = False,
    last_positions: np.ndarray | None = None,
) -> Tensor:
    """Decoder logits given precomputed encoder states ``memory`` [B, S, d]."""
    batch, squeeze = _as_batch(tgt)
    _check_ids(w.config, batch, "target")
    t = batch.shape[1]
    if memory.ndim == 2:
        memory = nc.reshape(memory, (1,) + memory.shape)
    if memory.shape[0] != batch.shape[0]:
        raise PreconditionError(f"encoder batch {memory.shape[0]} != decoder batch {batch.shape[0]}")
    self_bias = _attention_bias(t, t, True, tgt_pad, w.dtype)
    cross_bias = _attention_bias(t, memory.shape[1], False, src_pad, w.dtype)
    h = _stack(w, "decoder.", _embed(w, batch, "", rng), self_bias, memory, cross_bias, rng)
    if last_only:
        h = _take_last(h, last_positions)
    logits = _project(w, h)
    return nc.reshape(logits, logits.shape[1:]) if squeeze else logits


def encdec_forward(
    w: WeightSet,
    src,
    tgt,
    src_pad: np.ndarray | None = None,
    tgt_pad: np.ndarray | None = None,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Teacher-forced decoder logits [T, V] (or [B, T, V]); row t predicts tgt[t+1]."""
    src_b, squeeze = _as_batch(src)
    tgt_b, _ = _as_batch(tgt)
    memory = encode(w, src_b, src_pad, rng)
    logits = decode_step(w, memory, tgt_b, src_pad, tgt_pad, rng)
    return nc.reshape(logits, logits.shape[1:]) if squeeze else logits
