"""LM pre-training, summarization fine-tuning, perplexity, checkpoints."""

from __future__ import annotations

import csv
import enum
import hashlib
import json
import math
import struct
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import numcore as nc
from .data import (
    ExamplePair,
    PackedExample,
    Seq2SeqExample,
    chunk_stream,
    epoch_batches,
    pack,
    pack_seq2seq,
    pad_batch,
)
from .errors import DegenerateInputError, DivergenceError, PreconditionError
from .model import ENCDEC, LM, ModelConfig, WeightSet, encdec_forward, lm_forward
from .numcore import Tensor
from .tokenizer import Tokenizer


class Mode(str, enum.Enum):
    PRETRAIN = "PRETRAIN"
    FINETUNE_SCRATCH = "FINETUNE_SCRATCH"
    FINETUNE_PRETRAINED = "FINETUNE_PRETRAINED"


_MODE_DEFAULTS = {
    Mode.PRETRAIN: dict(learning_rate=2.5e-4, epochs=1),
    Mode.FINETUNE_SCRATCH: dict(learning_rate=2e-4, epochs=12),
    Mode.FINETUNE_PRETRAINED: dict(learning_rate=5e-5, epochs=6),
}


@dataclass
class TrainConfig:
    mode: Mode = Mode.FINETUNE_SCRATCH
    learning_rate: float = 2e-4
    epochs: int = 12
    batch_size: int = 16
    warmup_steps: int = 0
    grad_clip_norm: float = 1.0
    dropout_rate: float = 0.1
    seed: int = 0
    max_steps: int | None = None
    holdout_fraction: float = 0.05
    max_article_tokens: int | None = 400
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        self.mode = Mode(self.mode)
        if self.learning_rate <= 0 or self.epochs < 0 or self.batch_size < 1:
            raise PreconditionError("learning_rate > 0, epochs >= 0 and batch_size >= 1 required")
        if self.grad_clip_norm is not None and self.grad_clip_norm <= 0:
            raise PreconditionError("grad_clip_norm must be positive")

    @classmethod
    def for_mode(cls, mode: Mode | str, **overrides) -> "TrainConfig":
        mode = Mode(mode)
        return cls(**{"mode": mode, **_MODE_DEFAULTS[mode], **overrides})

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mode"] = self.mode.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise PreconditionError(f"unknown TrainConfig fields: {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


class Adam:
    """Adaptive moments with linear warmup, then constant learning rate."""

    def __init__(self, params: dict[str, Tensor], lr: float, beta1=0.9, beta2=0.999, eps=1e-8, warmup_steps=0):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.warmup_steps = warmup_steps
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def lr_at(self, step: int) -> float:
        if self.warmup_steps > 0:
            return self.lr * min(1.0, (step + 1) / self.warmup_steps)
        return self.lr

    def step(self) -> float:
        lr = self.lr_at(self.step_count)
        self.step_count += 1
        t = self.step_count
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**t
        c2 = 1.0 - b2**t
        for k, p in self.params.items():
            g = p.grad
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.data.dtype)
        return lr


def global_grad_norm(params: Sequence[Tensor]) -> float:
    return math.sqrt(math.fsum(float(np.sum(p.grad.astype(np.float64) ** 2)) for p in params))


def clip_grad_norm(params: Sequence[Tensor], max_norm: float) -> float:
    """Rescale grads so their global norm is <= max_norm; returns the pre-clip norm."""
    norm = global_grad_norm(params)
    if norm <= max_norm:
        return norm
    factor = max_norm / norm
    originals = [p.grad.copy() for p in params]
    while True:
        for p, g in zip(params, originals):
            p.grad = (g * factor).astype(g.dtype)
        if global_grad_norm(params) <= max_norm:
            return norm
        factor = np.nextafter(factor * (1 - 1e-7), 0.0)


# ---------------------------------------------------------------------------
# tasks: how a batch of examples turns into a loss
# ---------------------------------------------------------------------------


def _shift(ids: np.ndarray, mask: np.ndarray, pad: np.ndarray, pad_id: int) -> tuple[np.ndarray, np.ndarray]:
    """Targets/weights aligned with logits rows: row t predicts ids[t+1]."""
    targets = np.full_like(ids, pad_id)
    targets[:, :-1] = ids[:, 1:]
    weights = np.zeros_like(mask)
    weights[:, :-1] = mask[:, 1:] * ~pad[:, 1:]
    return targets, weights


class LMTask:
    """Packed sequences for the decoder-only model (pre-training windows or summarization)."""

    variant = LM

    def __init__(self, examples: Sequence[PackedExample], pad_id: int):
        self.examples = list(examples)
        self.pad_id = pad_id

    def __len__(self) -> int:
        return len(self.examples)

    @property
    def lengths(self) -> list[int]:
        return [len(e) for e in self.examples]

    def _arrays(self, idx):
        exs = [self.examples[i] for i in idx]
        ids, pad = pad_batch([e.ids for e in exs], self.pad_id)
        mask, _ = pad_batch([e.loss_mask for e in exs], 0)
        targets, weights = _shift(ids, mask, pad, self.pad_id)
        return ids, pad, targets, weights

    def logits(self, w: WeightSet, idx, rng=None):
        ids, pad, targets, weights = self._arrays(idx)
        return lm_forward(w, ids, pad_mask=pad, rng=rng), targets, weights

    def loss(self, w: WeightSet, idx, rng=None) -> Tensor:
        logits, targets, weights = self.logits(w, idx, rng)
        return nc.masked_cross_entropy(logits, targets, weights)


class Seq2SeqTask:
    variant = ENCDEC

    def __init__(self, examples: Sequence[Seq2SeqExample], pad_id: int):
        self.examples = list(examples)
        self.pad_id = pad_id

    def __len__(self) -> int:
        return len(self.examples)

    @property
    def lengths(self) -> list[int]:
        return [len(e.src) + len(e.tgt) for e in self.examples]

    def logits(self, w: WeightSet, idx, rng=None):
        exs = [self.examples[i] for i in idx]
        src, src_pad = pad_batch([e.src for e in exs], self.pad_id)
        tgt, tgt_pad = pad_batch([e.tgt for e in exs], self.pad_id)
        mask, _ = pad_batch([e.loss_mask for e in exs], 0)
        targets, weights = _shift(tgt, mask, tgt_pad, self.pad_id)
        return encdec_forward(w, src, tgt, src_pad, tgt_pad, rng=rng), targets, weights

    def loss(self, w: WeightSet, idx, rng=None) -> Tensor:
        logits, targets, weights = self.logits(w, idx, rng)
        return nc.masked_cross_entropy(logits, targets, weights)


def make_summarization_task(
    pairs: Sequence[ExamplePair],
    tokenizer: Tokenizer,
    config: ModelConfig,
    variant: str,
    max_article_tokens: int | None = 400,
):
    if variant == LM:
        return LMTask([pack(p, tokenizer, config.context_length, max_article_tokens) for p in pairs], tokenizer.pad_id)
    return Seq2SeqTask(
        [pack_seq2seq(p, tokenizer, config.context_length, max_article_tokens) for p in pairs], tokenizer.pad_id
    )


def make_lm_task(documents: Sequence[str], tokenizer: Tokenizer, context_length: int) -> LMTask:
    """Documents joined with <eos> into one stream, cut into contiguous windows."""
    stream: list[int] = []
    for doc in documents:
        stream.extend(tokenizer.encode(doc))
        stream.append(tokenizer.eos_id)
    windows = chunk_stream(stream, context_length)
    return LMTask([PackedExample(w, np.ones_like(w)) for w in windows], tokenizer.pad_id)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def _row_nll(logits: np.ndarray, targets: np.ndarray, weights: np.ndarray) -> np.ndarray:
    flat = logits.reshape(-1, logits.shape[-1]).astype(np.float64)
    sel = np.flatnonzero(weights.reshape(-1))
    z = flat[sel]
    z = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    return lse - z[np.arange(len(sel)), targets.reshape(-1)[sel]]


def eval_nll(w: WeightSet, task, batch_size: int = 32) -> tuple[float, int]:
    """Total negative log-likelihood (nats) and number of scored positions."""
    if len(task) == 0:
        raise DegenerateInputError("empty evaluation set")
    parts: list[float] = []
    count = 0
    with nc.no_grad():
        for start in range(0, len(task), batch_size):
            idx = list(range(start, min(start + batch_size, len(task))))
            logits, targets, weights = task.logits(w, idx)
            nll = _row_nll(logits.data, targets, weights)
            parts.extend(nll.tolist())
            count += len(nll)
    if count == 0:
        raise DegenerateInputError("evaluation set has no scored positions")
    return math.fsum(parts), count


def eval_perplexity(w: WeightSet, task, batch_size: int = 32) -> float:
    """exp(mean NLL) over the task's scored positions.

    LM windows score every next-token position; summarization tasks score the
    summary and <eos> only, so ``masked`` evaluation is a property of the task.
    """
    total, count = eval_nll(w, task, batch_size)
    return math.exp(total / count)


# ---------------------------------------------------------------------------
# trainer
# ---------------------------------------------------------------------------


def unique_params(w: WeightSet) -> dict[str, Tensor]:
    out: dict[str, Tensor] = {}
    seen: set[int] = set()
    for k, t in w.items():
        if id(t) not in seen:
            seen.add(id(t))
            out[k] = t
    return out


@dataclass
class LogRow:
    step: int
    split: str
    loss: float
    perplexity: float
    lr: float
    wall_clock_s: float


LOG_COLUMNS = ["step", "split", "loss", "perplexity", "lr", "wall_clock_s"]


def write_log(rows: Sequence[LogRow], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(LOG_COLUMNS)
        for r in rows:
            writer.writerow([r.step, r.split, repr(r.loss), repr(r.perplexity), repr(r.lr), f"{r.wall_clock_s:.3f}"])


class Trainer:
    """Single-owner loop over one WeightSet; batch order and dropout derive from (seed, step)."""

    def __init__(self, weights: WeightSet, task, config: TrainConfig, optimizer: Adam | None = None, step: int = 0):
        if len(task) == 0:
            raise DegenerateInputError("no training examples")
        self.weights = weights
        self.task = task
        self.config = config
        self.params = unique_params(weights)
        self.optimizer = optimizer or Adam(
            self.params, config.learning_rate, config.beta1, config.beta2, config.eps, config.warmup_steps
        )
        self.step = step
        self._lengths = task.lengths
        self._epoch_cache: tuple[int, list[np.ndarray]] | None = None
        self._dropout = config.dropout_rate

    @property
    def steps_per_epoch(self) -> int:
        return math.ceil(len(self.task) / self.config.batch_size)

    @property
    def total_steps(self) -> int:
        total = self.steps_per_epoch * self.config.epochs
        if self.config.max_steps is not None:
            total = min(total, self.config.max_steps)
        return total

    def batch_indices(self, step: int) -> np.ndarray:
        epoch, pos = divmod(step, self.steps_per_epoch)
        if self._epoch_cache is None or self._epoch_cache[0] != epoch:
            self._epoch_cache = (epoch, epoch_batches(self._lengths, self.config.batch_size, self.config.seed, epoch))
        return self._epoch_cache[1][pos]

    def _rng(self, step: int):
        if self._dropout <= 0:
            return None
        return np.random.default_rng([self.config.seed, step, 0xD0])

    def train_step(self) -> tuple[float, float]:
        """One optimizer update; returns (loss, lr)."""
        w = self.weights
        if w.config.dropout_rate != self._dropout:
            w = WeightSet(w.config.with_(dropout_rate=self._dropout), w.variant, w.tensors)
        idx = self.batch_indices(self.step)
        for p in self.params.values():
            p.zero_grad()
        loss = self.task.loss(w, idx, rng=self._rng(self.step))
        value = float(loss.data)
        if not math.isfinite(value):
            raise DivergenceError(self.step, value)
        nc.backward(loss)
        if self.config.grad_clip_norm is not None:
            clip_grad_norm(list(self.params.values()), self.config.grad_clip_norm)
        lr = self.optimizer.step()
        self.step += 1
        if not nc.parameters_finite(self.params.values()):
            raise DivergenceError(self.step, value)
        return value, lr

    def run(self, n_steps: int | None = None, on_step: Callable[[int, float, float], None] | None = None) -> list[float]:
        end = self.total_steps if n_steps is None else self.step + n_steps
        losses = []
        while self.step < end:
            loss, lr = self.train_step()
            losses.append(loss)
            if on_step:
                on_step(self.step, loss, lr)
        return losses


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

_MAGIC = "minigen-checkpoint"


@dataclass
class Checkpoint:
    weights: WeightSet
    step: int = 0
    tokenizer_hash: str = ""
    manifest_hash: str = ""
    optimizer: Adam | None = None
    train_config: dict = field(default_factory=dict)

    @property
    def config(self) -> ModelConfig:
        return self.weights.config


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> str:
    """Write the checkpoint; returns the sha256 of the file."""
    w = ckpt.weights
    arrays: list[tuple[str, np.ndarray]] = [(k, t.data) for k, t in w.items()]
    opt_meta = None
    if ckpt.optimizer is not None:
        opt = ckpt.optimizer
        opt_meta = dict(
            step_count=opt.step_count, lr=opt.lr, beta1=opt.beta1, beta2=opt.beta2, eps=opt.eps, warmup_steps=opt.warmup_steps
        )
        arrays += [(f"opt.m/{k}", a) for k, a in opt.m.items()]
        arrays += [(f"opt.v/{k}", a) for k, a in opt.v.items()]
    header = {
        "format": _MAGIC,
        "version": 1,
        "variant": w.variant,
        "config": w.config.to_dict(),
        "tensors": [[k, list(a.shape)] for k, a in arrays],
        "tokenizer_hash": ckpt.tokenizer_hash,
        "manifest_hash": ckpt.manifest_hash,
        "step": ckpt.step,
        "optimizer": opt_meta,
        "train_config": ckpt.train_config,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    digest = hashlib.sha256()
    with open(path, "wb") as fh:
        for chunk in (struct.pack("<Q", len(blob)), blob):
            fh.write(chunk)
            digest.update(chunk)
        for _, a in arrays:
            raw = np.ascontiguousarray(a, dtype="<f4").tobytes()
            fh.write(raw)
            digest.update(raw)
    return digest.hexdigest()


def load_checkpoint(path: str | Path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise PreconditionError(f"{path}: not a checkpoint")
    (n,) = struct.unpack("<Q", raw[:8])
    try:
        header = json.loads(raw[8 : 8 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise PreconditionError(f"{path}: corrupt checkpoint header") from exc
    if header.get("format") != _MAGIC:
        raise PreconditionError(f"{path}: not a checkpoint")
    offset = 8 + n
    expected = offset + 4 * sum(int(np.prod(s)) if s else 1 for _, s in header["tensors"])
    if expected != len(raw):
        raise PreconditionError(f"{path}: size does not match header")
    arrays: dict[str, np.ndarray] = {}
    for name, shape in header["tensors"]:
        count = int(np.prod(shape)) if shape else 1
        a = np.frombuffer(raw, dtype="<f4", count=count, offset=offset).reshape(shape).astype(np.float32)
        offset += 4 * count
        arrays[name] = a
    cfg = ModelConfig.from_dict(header["config"])
    tensors = {k: Tensor(a, requires_grad=True) for k, a in arrays.items() if not k.startswith("opt.")}
    weights = WeightSet(cfg, header["variant"], tensors)
    opt = None
    meta = header.get("optimizer")
    if meta:
        params = unique_params(weights)
        opt = Adam(params, meta["lr"], meta["beta1"], meta["beta2"], meta["eps"], meta["warmup_steps"])
        opt.step_count = meta["step_count"]
        opt.m = {k: arrays[f"opt.m/{k}"].copy() for k in params}
        opt.v = {k: arrays[f"opt.v/{k}"].copy() for k in params}
    return Checkpoint(
        weights,
        step=header["step"],
        tokenizer_hash=header["tokenizer_hash"],
        manifest_hash=header["manifest_hash"],
        optimizer=opt,
        train_config=header.get("train_config", {}),
    )


def resume_trainer(ckpt: Checkpoint, task, config: TrainConfig | None = None) -> Trainer:
    config = config or TrainConfig.from_dict(
        {**ckpt.train_config, "mode": ckpt.train_config.get("mode", Mode.FINETUNE_SCRATCH.value)}
    )
    trainer = Trainer(ckpt.weights, task, config, optimizer=None, step=ckpt.step)
    if ckpt.optimizer is not None:
        trainer.optimizer = ckpt.optimizer
        trainer.optimizer.params = trainer.params
    return trainer


def trainer_checkpoint(trainer: Trainer, tokenizer_hash: str = "", manifest_hash: str = "") -> Checkpoint:
    return Checkpoint(
        trainer.weights,
        step=trainer.step,
        tokenizer_hash=tokenizer_hash,
        manifest_hash=manifest_hash,
        optimizer=trainer.optimizer,
        train_config=trainer.config.to_dict(),
    )


# ---------------------------------------------------------------------------
# top-level procedures
# ---------------------------------------------------------------------------


@dataclass
class PretrainResult:
    checkpoint: Checkpoint
    heldout_perplexity: list[float]
    train_loss: list[float]
    log: list[LogRow]


def split_heldout(task: LMTask, fraction: float) -> tuple[LMTask, LMTask]:
    n = len(task)
    if n < 2:
        raise DegenerateInputError("need at least two windows to hold one out")
    n_eval = min(n - 1, max(1, int(round(n * fraction))))
    return LMTask(task.examples[: n - n_eval], task.pad_id), LMTask(task.examples[n - n_eval :], task.pad_id)


def pretrain(
    documents: Sequence[str],
    tokenizer: Tokenizer,
    model_config: ModelConfig,
    config: TrainConfig,
    init_seed: int | None = None,
    dtype=np.float32,
) -> PretrainResult:
    """Next-token training on contiguous windows; held-out perplexity after every epoch.

    ``heldout_perplexity[0]`` is the untrained model, so the list has
    ``epochs + 1`` entries.
    """
    from .model import init_weights

    task = make_lm_task(documents, tokenizer, model_config.context_length)
    train_task, heldout = split_heldout(task, config.holdout_fraction)
    seed = config.seed if init_seed is None else init_seed
    weights = init_weights(model_config, seed, LM, dtype=dtype)
    trainer = Trainer(weights, train_task, config)
    t0 = time.perf_counter()
    log: list[LogRow] = []
    curve = [eval_perplexity(weights, heldout)]
    log.append(LogRow(0, "heldout", math.log(curve[0]), curve[0], 0.0, 0.0))
    epoch_losses = []
    for _ in range(config.epochs):
        n = trainer.steps_per_epoch
        if config.max_steps is not None:
            n = min(n, config.max_steps - trainer.step)
        if n <= 0:
            break
        losses = trainer.run(n)
        mean_loss = math.fsum(losses) / len(losses)
        epoch_losses.append(mean_loss)
        now = time.perf_counter() - t0
        log.append(LogRow(trainer.step, "train", mean_loss, math.exp(mean_loss), trainer.optimizer.lr_at(trainer.step), now))
        ppl = eval_perplexity(weights, heldout)
        curve.append(ppl)
        log.append(LogRow(trainer.step, "heldout", math.log(ppl), ppl, trainer.optimizer.lr_at(trainer.step), now))
    ckpt = trainer_checkpoint(trainer, tokenizer.fingerprint())
    return PretrainResult(ckpt, curve, epoch_losses, log)


@dataclass
class FinetuneResult:
    checkpoint: Checkpoint
    epoch_losses: list[float]
    log: list[LogRow]
    train_time_s: float


def finetune(
    pairs: Sequence[ExamplePair],
    indices: Sequence[int],
    config: TrainConfig,
    weights: WeightSet,
    tokenizer: Tokenizer,
) -> FinetuneResult:
    """Optimise every parameter on the chosen pairs (masked target-only loss for the LM)."""
    if len(indices) == 0:
        raise DegenerateInputError("empty training subset")
    if max(indices) >= len(pairs) or min(indices) < 0:
        raise PreconditionError("subset index out of range")
    chosen = [pairs[i] for i in indices]
    task = make_summarization_task(chosen, tokenizer, weights.config, weights.variant, config.max_article_tokens)
    trainer = Trainer(weights, task, config)
    t0 = time.perf_counter()
    log: list[LogRow] = []
    epoch_losses: list[float] = []
    for _ in range(config.epochs):
        n = trainer.steps_per_epoch
        if config.max_steps is not None:
            n = min(n, config.max_steps - trainer.step)
        if n <= 0:
            break
        losses = trainer.run(n)
        mean_loss = math.fsum(losses) / len(losses)
        epoch_losses.append(mean_loss)
        log.append(
            LogRow(
                trainer.step,
                "train",
                mean_loss,
                math.exp(mean_loss),
                trainer.optimizer.lr_at(trainer.step),
                time.perf_counter() - t0,
            )
        )
    elapsed = time.perf_counter() - t0
    return FinetuneResult(trainer_checkpoint(trainer, tokenizer.fingerprint()), epoch_losses, log, elapsed)
