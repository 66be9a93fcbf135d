"""Pair datasets, source+delimiter+target packing, nested subsets, synthetic tasks."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import DegenerateInputError, PreconditionError
from .tokenizer import Tokenizer

DEFAULT_FRACTIONS = (0.01, 0.02, 0.05, 0.10, 0.20, 0.50, 1.0)
MAX_ARTICLE_TOKENS = 400
MAX_SUMMARY_TOKENS = 100


def normalize_text(text: str) -> str:
    return " ".join(text.split())


@dataclass(frozen=True)
class ExamplePair:
    article: str
    summary: str

    def __post_init__(self):
        object.__setattr__(self, "article", normalize_text(self.article))
        object.__setattr__(self, "summary", normalize_text(self.summary))
        if not self.article or not self.summary:
            raise DegenerateInputError("article and summary must be non-empty")


@dataclass
class PackedExample:
    """``ids`` with a 0/1 ``loss_mask``; mask[t] == 1 means ids[t] is a prediction target."""

    ids: np.ndarray
    loss_mask: np.ndarray

    def __len__(self) -> int:
        return len(self.ids)


@dataclass
class Seq2SeqExample:
    """Encoder input plus decoder sequence ``<delim> summary <eos>`` with the same mask convention."""

    src: np.ndarray
    tgt: np.ndarray
    loss_mask: np.ndarray

    def __len__(self) -> int:
        return max(len(self.src), len(self.tgt))


# ---------------------------------------------------------------------------
# JSON-lines pair files
# ---------------------------------------------------------------------------


def dumps_pair(pair: ExamplePair) -> str:
    return json.dumps({"article": pair.article, "summary": pair.summary}, ensure_ascii=False)


def save_pairs(pairs: Iterable[ExamplePair], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for p in pairs:
            fh.write(dumps_pair(p) + "\n")


def load_pairs(path: str | Path) -> list[ExamplePair]:
    pairs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                pairs.append(ExamplePair(rec["article"], rec["summary"]))
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise PreconditionError(f"{path}:{lineno}: bad record ({exc})") from exc
    return pairs


def load_documents(path: str | Path) -> list[str]:
    """Plain-text corpus, one document per blank-line-separated block."""
    text = Path(path).read_text(encoding="utf-8")
    return split_documents(text)


def split_documents(text: str) -> list[str]:
    docs, current = [], []
    for line in text.splitlines():
        if line.strip():
            current.append(line.strip())
        elif current:
            docs.append(" ".join(current))
            current = []
    if current:
        docs.append(" ".join(current))
    return docs


# ---------------------------------------------------------------------------
# packing
# ---------------------------------------------------------------------------


def pack_ids(
    article_ids: Sequence[int],
    summary_ids: Sequence[int],
    delim_id: int,
    eos_id: int,
    context_length: int,
    max_article_tokens: int | None = MAX_ARTICLE_TOKENS,
) -> PackedExample:
    """article ++ <delim> ++ summary ++ <eos>, trimming the article's tail to fit."""
    if len(summary_ids) == 0:
        raise DegenerateInputError("summary encodes to no tokens")
    budget = context_length - len(summary_ids) - 2
    if budget < 0:
        raise DegenerateInputError(
            f"summary of {len(summary_ids)} tokens plus 2 specials exceeds context_length {context_length}"
        )
    if max_article_tokens is not None:
        budget = min(budget, max_article_tokens)
    article = list(article_ids)[:budget]
    ids = article + [delim_id] + list(summary_ids) + [eos_id]
    mask = [0] * (len(article) + 1) + [1] * (len(summary_ids) + 1)
    return PackedExample(np.asarray(ids, dtype=np.int64), np.asarray(mask, dtype=np.int64))


def pack(
    example: ExamplePair,
    tokenizer: Tokenizer,
    context_length: int,
    max_article_tokens: int | None = MAX_ARTICLE_TOKENS,
) -> PackedExample:
    return pack_ids(
        tokenizer.encode(example.article),
        tokenizer.encode(example.summary),
        tokenizer.delim_id,
        tokenizer.eos_id,
        context_length,
        max_article_tokens,
    )


def pack_seq2seq_ids(
    article_ids: Sequence[int],
    summary_ids: Sequence[int],
    delim_id: int,
    eos_id: int,
    context_length: int,
    max_article_tokens: int | None = MAX_ARTICLE_TOKENS,
) -> Seq2SeqExample:
    if len(summary_ids) == 0:
        raise DegenerateInputError("summary encodes to no tokens")
    if len(summary_ids) + 2 > context_length:
        raise DegenerateInputError(f"summary does not fit context_length {context_length}")
    if len(article_ids) == 0:
        raise DegenerateInputError("article encodes to no tokens")
    budget = context_length if max_article_tokens is None else min(context_length, max_article_tokens)
    src = np.asarray(list(article_ids)[:budget], dtype=np.int64)
    tgt = np.asarray([delim_id] + list(summary_ids) + [eos_id], dtype=np.int64)
    mask = np.asarray([0] + [1] * (len(summary_ids) + 1), dtype=np.int64)
    return Seq2SeqExample(src, tgt, mask)


def pack_seq2seq(
    example: ExamplePair,
    tokenizer: Tokenizer,
    context_length: int,
    max_article_tokens: int | None = MAX_ARTICLE_TOKENS,
) -> Seq2SeqExample:
    return pack_seq2seq_ids(
        tokenizer.encode(example.article),
        tokenizer.encode(example.summary),
        tokenizer.delim_id,
        tokenizer.eos_id,
        context_length,
        max_article_tokens,
    )


# ---------------------------------------------------------------------------
# nested subsets
# ---------------------------------------------------------------------------


@dataclass
class SubsetSpec:
    n: int
    seed: int = 0
    fractions: tuple[float, ...] = DEFAULT_FRACTIONS

    def __post_init__(self):
        if self.n < 1:
            raise PreconditionError("dataset size must be >= 1")
        for f in self.fractions:
            if not 0.0 < f <= 1.0:
                raise PreconditionError(f"fraction {f} outside (0, 1]")

    def size(self, fraction: float) -> int:
        # exact decimal arithmetic: floor(0.29 * 100) must be 29
        return max(1, math.floor(Fraction(str(fraction)) * self.n))


def make_subsets(spec: SubsetSpec) -> dict[float, list[int]]:
    """One seeded permutation; every subset is a prefix of it, so subsets nest."""
    order = np.random.default_rng(spec.seed).permutation(spec.n)
    return {f: [int(i) for i in order[: spec.size(f)]] for f in spec.fractions}


def subset_filename(fraction: float, seed: int) -> str:
    return f"subset_{fraction:g}_{seed}.idx"


def write_subsets(subsets: dict[float, list[int]], seed: int, directory: str | Path) -> list[Path]:
    paths = []
    for f, idx in subsets.items():
        p = Path(directory) / subset_filename(f, seed)
        p.write_text("".join(f"{i}\n" for i in idx), encoding="utf-8")
        paths.append(p)
    return paths


def read_subset(path: str | Path) -> list[int]:
    return [int(line) for line in Path(path).read_text(encoding="utf-8").split()]


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------


def epoch_batches(lengths: Sequence[int], batch_size: int, seed: int, epoch: int, bucket_batches: int = 8) -> list[np.ndarray]:
    """Index batches for one epoch, bucketed by length, reproducible from (seed, epoch).

    The shuffled order is cut into windows of ``bucket_batches`` batches; each
    window is sorted by length before being split, and the final batch order
    is shuffled again.
    """
    n = len(lengths)
    if n == 0:
        raise DegenerateInputError("no examples to batch")
    rng = np.random.default_rng([int(seed), int(epoch), 0x5EED])
    order = rng.permutation(n)
    lengths = np.asarray(lengths)
    window = batch_size * bucket_batches
    batches = []
    for start in range(0, n, window):
        chunk = order[start : start + window]
        chunk = chunk[np.argsort(lengths[chunk], kind="stable")]
        batches.extend(chunk[i : i + batch_size] for i in range(0, len(chunk), batch_size))
    perm = rng.permutation(len(batches))
    return [batches[i] for i in perm]


def pad_batch(seqs: Sequence[np.ndarray], pad_id: int) -> tuple[np.ndarray, np.ndarray]:
    """Right-pad to a [B, T] array; also returns the boolean pad mask."""
    t = max(len(s) for s in seqs)
    out = np.full((len(seqs), t), pad_id, dtype=np.int64)
    pad = np.ones((len(seqs), t), dtype=bool)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
        pad[i, : len(s)] = False
    return out, pad


def chunk_stream(ids: Sequence[int], window: int) -> list[np.ndarray]:
    """Contiguous windows of ``window`` tokens; a shorter tail window is kept if it has >= 2 tokens."""
    ids = np.asarray(ids, dtype=np.int64)
    out = [ids[i : i + window] for i in range(0, len(ids), window)]
    return [c for c in out if len(c) >= 2]


# ---------------------------------------------------------------------------
# synthetic salient-token task
# ---------------------------------------------------------------------------


@dataclass
class SynthParams:
    """Articles of ``article_len`` words; ``k`` entities are marked salient.

    Fillers and entities are disjoint pseudo-word vocabularies. Articles may
    also carry ``n_distractors`` unmarked entities. Pre-training documents use
    the same body generator without markers, and with probability
    ``recap_prob`` end by restating their entities in order, giving the
    unlabeled text the recurring-mention structure that makes copying a
    useful skill to learn.

    The defaults are short dense bodies: a 2-layer model picks up the
    "next entity after this one" pattern within a few thousand steps there,
    while longer, sparser bodies stall at the unigram plateau.
    """

    n_fillers: int = 120
    n_entities: int = 80
    article_len: int = 8
    k: int = 3
    n_distractors: int = 0
    marker: str = "@@"
    pretrain_tokens: int = 1_000_000
    recap_prob: float = 1.0

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SynthCorpus:
    pairs: list[ExamplePair]
    pretrain_documents: list[str]
    fillers: list[str]
    entities: list[str]

    @property
    def pretrain_text(self) -> str:
        return "\n\n".join(self.pretrain_documents) + "\n"

    def pretrain_token_count(self) -> int:
        return sum(len(d.split()) for d in self.pretrain_documents)


_CONSONANTS = "bdfgklmnprstvz"
_VOWELS = "aeiou"


def _pseudo_words(rng: np.random.Generator, count: int, syllables: tuple[int, int], taken: set[str]) -> list[str]:
    words: list[str] = []
    while len(words) < count:
        n = int(rng.integers(syllables[0], syllables[1] + 1))
        w = "".join(_CONSONANTS[rng.integers(len(_CONSONANTS))] + _VOWELS[rng.integers(len(_VOWELS))] for _ in range(n))
        if w not in taken:
            taken.add(w)
            words.append(w)
    return words


def extract_summary(article: str, marker: str = "@@") -> str:
    """Reference rule of the synthetic task: the word after each marker, in order."""
    toks = article.split()
    return " ".join(toks[i + 1] for i in range(len(toks) - 1) if toks[i] == marker)


def is_subsequence(needle: Sequence[str], haystack: Sequence[str]) -> bool:
    it = iter(haystack)
    return all(any(x == y for y in it) for x in needle)


def _body(rng, params: SynthParams, fillers, entities, n_entities: int) -> tuple[list[str], list[int]]:
    words = [fillers[i] for i in rng.integers(len(fillers), size=params.article_len)]
    slots = np.sort(rng.choice(params.article_len, size=n_entities, replace=False))
    picks = rng.choice(len(entities), size=n_entities, replace=False)
    for s, e in zip(slots, picks):
        words[s] = entities[e]
    return words, [int(s) for s in slots]


def synth_task(n_examples: int, seed: int, params: SynthParams | None = None) -> SynthCorpus:
    params = params or SynthParams()
    n_ent = params.k + params.n_distractors
    if params.k < 1 or n_ent > params.article_len:
        raise PreconditionError(f"k={params.k} (+{params.n_distractors} distractors) exceeds article length {params.article_len}")
    if n_ent > params.n_entities:
        raise PreconditionError("not enough distinct entities for one article")
    vocab_rng = np.random.default_rng([seed, 1])
    taken = {params.marker}
    fillers = _pseudo_words(vocab_rng, params.n_fillers, (1, 2), taken)
    entities = _pseudo_words(vocab_rng, params.n_entities, (3, 3), taken)

    rng = np.random.default_rng([seed, 2])
    pairs = []
    for _ in range(n_examples):
        words, slots = _body(rng, params, fillers, entities, n_ent)
        salient = sorted(rng.choice(slots, size=params.k, replace=False).tolist())
        out = []
        for i, w in enumerate(words):
            if i in salient:
                out.append(params.marker)
            out.append(w)
        pairs.append(ExamplePair(" ".join(out), " ".join(words[i] for i in salient)))

    rng = np.random.default_rng([seed, 3])
    docs: list[str] = []
    total = 0
    while total < params.pretrain_tokens:
        words, slots = _body(rng, params, fillers, entities, n_ent)
        if rng.random() < params.recap_prob:
            words = words + [words[s] for s in slots]
        docs.append(" ".join(words))
        total += len(words)
    return SynthCorpus(pairs, docs, fillers, entities)
