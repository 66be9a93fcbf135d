"""Initialising target models from a pre-trained LM, and parameter accounting."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .errors import PreconditionError
from .model import (
    ENCDEC,
    INIT_STD,
    LM,
    ModelConfig,
    WeightSet,
    init_tensor,
    is_cross_attention,
    lm_name_for,
    name_seed,
    param_shapes,
    stack_of,
)
from .numcore import Tensor

PRETRAINED = "pretrained"
RANDOM = "random"


class TransferStrategy(str, enum.Enum):
    LM_DIRECT = "LM_DIRECT"
    ENCODER_ONLY = "ENCODER_ONLY"
    DECODER_ONLY = "DECODER_ONLY"
    BOTH = "BOTH"
    NONE = "NONE"


_STACKS_COPIED = {
    TransferStrategy.LM_DIRECT: {"decoder"},
    TransferStrategy.ENCODER_ONLY: {"encoder"},
    TransferStrategy.DECODER_ONLY: {"decoder"},
    TransferStrategy.BOTH: {"encoder", "decoder"},
    TransferStrategy.NONE: set(),
}


@dataclass
class TransferReport:
    strategy: TransferStrategy
    variant: str
    provenance: dict[str, str]
    random_rows: dict[str, list[int]] = field(default_factory=dict)
    pretrained_params: int = 0
    random_params: int = 0

    def to_dict(self) -> dict:
        return {
            "strategy": self.strategy.value,
            "variant": self.variant,
            "provenance": dict(self.provenance),
            "random_rows": {k: list(v) for k, v in self.random_rows.items()},
            "pretrained_params": self.pretrained_params,
            "random_params": self.random_params,
        }


def default_variant(strategy: TransferStrategy) -> str:
    return LM if strategy == TransferStrategy.LM_DIRECT else ENCDEC


def check_compatible(source: ModelConfig, target: ModelConfig) -> None:
    for dim in (
        "d_model",
        "num_heads",
        "num_layers",
        "d_ff",
        "vocab_size",
        "context_length",
        "pre_norm",
        "tie_embeddings",
        "output_bias",
    ):
        a, b = getattr(source, dim), getattr(target, dim)
        if a != b:
            raise PreconditionError(f"incompatible {dim}: pretrained {a} vs target {b}")


def delim_row(seed: int, d_model: int, dtype) -> np.ndarray:
    rng = np.random.default_rng(name_seed(seed, "tok_emb/<delim>"))
    return (rng.standard_normal(d_model) * INIT_STD).astype(dtype)


def apply_transfer(
    strategy: TransferStrategy | str,
    pretrained_lm: WeightSet | None,
    target_config: ModelConfig,
    seed: int,
    delim_id: int,
    variant: str | None = None,
    dtype=None,
) -> tuple[WeightSet, TransferReport]:
    """Build target weights per ``strategy``.

    Non-copied tensors get exactly the values ``init_weights(target_config,
    seed)`` would give them. The ``delim_id`` embedding row is always freshly
    drawn since the delimiter never occurs during pre-training.
    """
    strategy = TransferStrategy(strategy)
    variant = variant or default_variant(strategy)
    if variant == LM and strategy not in (TransferStrategy.LM_DIRECT, TransferStrategy.NONE):
        raise PreconditionError(f"strategy {strategy.value} needs the encoder-decoder variant")
    if variant == ENCDEC and strategy == TransferStrategy.LM_DIRECT:
        raise PreconditionError("LM_DIRECT targets the LM variant")
    copied = _STACKS_COPIED[strategy]
    if copied:
        if pretrained_lm is None:
            raise PreconditionError(f"strategy {strategy.value} needs pre-trained LM weights")
        if pretrained_lm.variant != LM:
            raise PreconditionError("pre-trained weights must be an LM")
        check_compatible(pretrained_lm.config, target_config)
        if not 0 <= delim_id < target_config.vocab_size:
            raise PreconditionError(f"delim_id {delim_id} outside vocabulary")
        dtype = dtype or pretrained_lm.dtype
    dtype = dtype or np.float32

    tensors: dict[str, Tensor] = {}
    provenance: dict[str, str] = {}
    random_rows: dict[str, list[int]] = {}
    for name, shape in param_shapes(target_config, variant).items():
        stack = stack_of(name)
        if variant == LM:
            take = bool(copied)
        elif stack in ("encoder", "decoder"):
            take = stack in copied and not is_cross_attention(name)
        else:
            # embeddings and output head travel with either stack
            take = bool(copied)
        if take:
            value = pretrained_lm[lm_name_for(name)].data.astype(dtype, copy=True)
            if name.endswith("tok_emb"):
                value[delim_id] = delim_row(seed, target_config.d_model, dtype)
                random_rows[name] = [delim_id]
            provenance[name] = PRETRAINED
        else:
            value = init_tensor(name, shape, seed, dtype)
            provenance[name] = RANDOM
        tensors[name] = Tensor(value, requires_grad=True)

    pre = rnd = 0
    for name, t in tensors.items():
        if provenance[name] == PRETRAINED:
            rows = len(random_rows.get(name, ()))
            rnd += rows * t.shape[1] if rows else 0
            pre += t.data.size - (rows * t.shape[1] if rows else 0)
        else:
            rnd += t.data.size
    report = TransferReport(strategy, variant, provenance, random_rows, pre, rnd)
    return WeightSet(target_config, variant, tensors), report


def count_params(config: ModelConfig, variant: str = LM) -> int:
    """Exact trainable-parameter count; tied tensors appear once in the layout."""
    return int(sum(int(np.prod(s)) for s in param_shapes(config, variant).values()))


def count_breakdown(config: ModelConfig, variant: str = LM) -> dict[str, int]:
    out: dict[str, int] = {}
    for name, shape in param_shapes(config, variant).items():
        key = "cross_attention" if is_cross_attention(name) else stack_of(name)
        out[key] = out.get(key, 0) + int(np.prod(shape))
    return out
