"""Greedy and beam-search generation for both model variants."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import numcore as nc
from .errors import DegenerateInputError, PreconditionError
from .model import ENCDEC, LM, WeightSet, decode_step, encode, lm_forward
from .numcore import Tensor

DEFAULT_MAX_LEN = 120


@dataclass
class Hypothesis:
    ids: list[int]
    score: float
    finished: bool = False

    def sort_key(self):
        return (-self.score, self.ids)


@dataclass
class BeamResult:
    best: Hypothesis
    beam: list[Hypothesis] = field(default_factory=list)


def _log_softmax_rows(logits: np.ndarray) -> np.ndarray:
    z = logits.astype(np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


class _Scorer:
    """Next-token log-probabilities for a batch of equal-length continuations."""

    def __init__(self, w: WeightSet, source: Sequence[int], delim_id: int, max_len: int, max_article_tokens: int | None):
        if max_len < 1:
            raise DegenerateInputError("generation budget must be >= 1")
        self.w = w
        ctx = w.config.context_length
        source = [int(t) for t in source]
        if max_article_tokens is not None:
            source = source[:max_article_tokens]
        if w.variant == LM:
            # cut the article up front so at least `reserve` tokens fit and the
            # context never slides; the reserve is capped so the article always
            # keeps half the window, whatever max_len is
            reserve = min(max_len, (ctx - 1) // 2)
            keep = ctx - 1 - reserve
            self.prefix = np.asarray(source[:keep] + [delim_id], dtype=np.int64)
            self.budget = min(max_len, ctx - len(self.prefix))
            self.memory = None
        elif w.variant == ENCDEC:
            src = source[:ctx]
            if not src:
                raise DegenerateInputError("empty source")
            self.prefix = np.asarray([delim_id], dtype=np.int64)
            self.budget = min(max_len, ctx - 1)
            with nc.no_grad():
                self.memory = encode(w, np.asarray(src, dtype=np.int64)[None, :])
        else:
            raise PreconditionError(f"unknown variant {w.variant!r}")
        if self.budget < 1:
            raise DegenerateInputError("source leaves no room to generate")

    def __call__(self, continuations: Sequence[Sequence[int]]) -> np.ndarray:
        b = len(continuations)
        seqs = np.stack([np.concatenate([self.prefix, np.asarray(c, dtype=np.int64)]) for c in continuations])
        with nc.no_grad():
            if self.memory is None:
                logits = lm_forward(self.w, seqs, last_only=True)
            else:
                memory = Tensor(np.repeat(self.memory.data, b, axis=0))
                logits = decode_step(self.w, memory, seqs, last_only=True)
        return _log_softmax_rows(logits.data[:, 0, :])


def _banned_mask(vocab: int, banned: Iterable[int]) -> np.ndarray:
    m = np.zeros(vocab, dtype=bool)
    for t in banned:
        m[int(t)] = True
    return m


def greedy_decode(
    w: WeightSet,
    source: Sequence[int],
    eos_id: int,
    delim_id: int,
    max_len: int = DEFAULT_MAX_LEN,
    banned: Iterable[int] = (),
    max_article_tokens: int | None = None,
) -> Hypothesis:
    """Pick the arg-max token each step (lowest id on ties) until <eos> or the budget."""
    scorer = _Scorer(w, source, delim_id, max_len, max_article_tokens)
    ban = _banned_mask(w.config.vocab_size, banned)
    ids: list[int] = []
    score = 0.0
    for _ in range(scorer.budget):
        lp = scorer([ids])[0]
        lp[ban] = -np.inf
        tok = int(np.argmax(lp))
        ids.append(tok)
        score += float(lp[tok])
        if tok == eos_id:
            return Hypothesis(ids, score, True)
    return Hypothesis(ids, score, False)


def beam_search(
    w: WeightSet,
    source: Sequence[int],
    eos_id: int,
    delim_id: int,
    beam_size: int = 2,
    max_len: int = DEFAULT_MAX_LEN,
    banned: Iterable[int] = (),
    length_normalize: bool = False,
    max_article_tokens: int | None = None,
) -> BeamResult:
    """Plain log-probability beam search.

    Each step expands every live hypothesis over the vocabulary and keeps the
    top ``beam_size`` candidates; candidates ending in <eos> leave the beam as
    finished. Ranking is by score, then by the id sequence (lexicographic).
    """
    if beam_size < 1:
        raise PreconditionError("beam_size must be >= 1")
    scorer = _Scorer(w, source, delim_id, max_len, max_article_tokens)
    ban = _banned_mask(w.config.vocab_size, banned)
    live = [Hypothesis([], 0.0)]
    done: list[Hypothesis] = []
    for _ in range(scorer.budget):
        # live hypotheses share a length, so comparing parents' rank then token is lexicographic
        live.sort(key=lambda h: h.ids)
        lp = scorer([h.ids for h in live])
        lp[:, ban] = -np.inf
        parent_scores = np.array([h.score for h in live])
        total = parent_scores[:, None] + lp
        vocab = total.shape[1]
        parent = np.repeat(np.arange(len(live)), vocab)
        tok = np.tile(np.arange(vocab), len(live))
        flat = total.reshape(-1)
        ok = np.isfinite(flat)
        parent, tok, flat = parent[ok], tok[ok], flat[ok]
        order = np.lexsort((tok, parent, -flat))[:beam_size]
        new_live = []
        for j in order:
            h = Hypothesis(live[parent[j]].ids + [int(tok[j])], float(flat[j]))
            if tok[j] == eos_id:
                h.finished = True
                done.append(h)
            else:
                new_live.append(h)
        live = new_live
        if not live:
            break
        if done and max(h.score for h in done) > max(h.score for h in live):
            # extensions only lose probability mass, so nothing live can win;
            # unfinished prefixes are not valid outputs, so drop them
            live = []
            break
    ranked = done + live
    if length_normalize:
        ranked.sort(key=lambda h: (-h.score / max(1, len(h.ids)), h.ids))
    else:
        ranked.sort(key=Hypothesis.sort_key)
    return BeamResult(ranked[0], ranked[:beam_size])


def score_sequence(
    w: WeightSet,
    source: Sequence[int],
    generated: Sequence[int],
    delim_id: int,
    max_len: int = DEFAULT_MAX_LEN,
    max_article_tokens: int | None = None,
) -> float:
    """Teacher-forced sum of log-probabilities of ``generated`` in one forward pass."""
    scorer = _Scorer(w, source, delim_id, max_len, max_article_tokens)
    gen = np.asarray(generated, dtype=np.int64)
    if len(gen) == 0:
        return 0.0
    seq = np.concatenate([scorer.prefix, gen[:-1]])
    with nc.no_grad():
        if scorer.memory is None:
            logits = lm_forward(w, seq)
        else:
            logits = decode_step(w, scorer.memory, seq)
    lp = _log_softmax_rows(logits.data[len(scorer.prefix) - 1 :])
    return math.fsum(lp[np.arange(len(gen)), gen].tolist())


def decode_corpus(
    w: WeightSet,
    sources: Sequence[Sequence[int]],
    eos_id: int,
    delim_id: int,
    beam_size: int = 2,
    max_len: int = DEFAULT_MAX_LEN,
    banned: Iterable[int] = (),
    max_article_tokens: int | None = None,
) -> list[Hypothesis]:
    banned = tuple(banned)
    out = []
    for src in sources:
        if beam_size == 1:
            out.append(greedy_decode(w, src, eos_id, delim_id, max_len, banned, max_article_tokens))
        else:
            out.append(beam_search(w, src, eos_id, delim_id, beam_size, max_len, banned, False, max_article_tokens).best)
    return out


def strip_eos(ids: Sequence[int], eos_id: int) -> list[int]:
    ids = list(ids)
    return ids[: ids.index(eos_id)] if eos_id in ids else ids


def write_predictions(records: Iterable[dict], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r in records:
            fh.write(json.dumps({"id": r["id"], "prediction": r["prediction"], "score": r["score"]}, ensure_ascii=False) + "\n")


def read_predictions(path: str | Path) -> list[dict]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                rec = json.loads(line)
                if not {"id", "prediction"} <= rec.keys():
                    raise PreconditionError(f"{path}: prediction record needs id and prediction")
                out.append(rec)
    return out
