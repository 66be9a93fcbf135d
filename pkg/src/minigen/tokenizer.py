"""Byte-pair-encoding subword tokenizer.

Words are whitespace-delimited. Each word becomes a sequence of character
symbols followed by an end-of-word sentinel, and merges never cross words.
Equal pair counts are broken lexicographically on (left, right), with the
sentinel ordered after every character.
"""

from __future__ import annotations

import hashlib
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

from .errors import DegenerateInputError, PreconditionError

PAD = "<pad>"
DELIM = "<delim>"
EOS = "<eos>"
UNK = "<unk>"
END_OF_WORD = "</w>"
SPECIALS = (PAD, DELIM, EOS)

_HEADER = "minigen-bpe v1"


_SENTINEL_CODE = 0x110000  # one past the largest code point


def symbol_key(symbol: str) -> tuple[int, ...]:
    """Sort key: code-point order, with the sentinel acting as a character above all others."""
    if symbol.endswith(END_OF_WORD):
        return tuple(map(ord, symbol[: -len(END_OF_WORD)])) + (_SENTINEL_CODE,)
    return tuple(map(ord, symbol))


def pair_key(pair: tuple[str, str]) -> tuple:
    return (symbol_key(pair[0]), symbol_key(pair[1]))


def pretokenize(text: str, lowercase: bool = False) -> list[str]:
    if lowercase:
        text = text.lower()
    return text.split()


def word_symbols(word: str, alphabet: set[str] | None = None) -> list[str]:
    chars = list(word)
    if alphabet is not None:
        chars = [c if c in alphabet else UNK for c in chars]
    return chars + [END_OF_WORD]


def merge_word(symbols: list[str], pair: tuple[str, str]) -> list[str]:
    """Replace non-overlapping occurrences of ``pair``, scanning left to right."""
    left, right = pair
    out: list[str] = []
    i = 0
    n = len(symbols)
    while i < n:
        if i + 1 < n and symbols[i] == left and symbols[i + 1] == right:
            out.append(left + right)
            i += 2
        else:
            out.append(symbols[i])
            i += 1
    return out


@dataclass
class Vocabulary:
    """Bijective token <-> id map.

    Layout: specials, then base symbols (``<unk>``, sentinel, sorted
    characters), then merged symbols in rank order.
    """

    tokens: list[str]
    index: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise PreconditionError("vocabulary tokens must be unique")

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.index

    def id(self, token: str) -> int:
        return self.index[token]

    def token(self, idx: int) -> str:
        return self.tokens[idx]


class Tokenizer:
    def __init__(self, base_symbols: list[str], merges: list[tuple[str, str]], lowercase: bool = False):
        self.base_symbols = list(base_symbols)
        self.merges = [tuple(m) for m in merges]
        self.lowercase = lowercase
        self.ranks = {m: r for r, m in enumerate(self.merges)}
        self.alphabet = {s for s in self.base_symbols if s not in (UNK, END_OF_WORD)}
        self.vocab = Vocabulary(list(SPECIALS) + self.base_symbols + [a + b for a, b in self.merges])
        # surface text and word-final flag per id, derived structurally so that
        # decode never has to parse symbol strings
        self._surface: list[str] = []
        self._ends_word: list[bool] = []
        for tok in self.vocab.tokens[: len(SPECIALS)]:
            self._surface.append(tok)
            self._ends_word.append(True)
        for sym in self.base_symbols:
            self._surface.append("" if sym == END_OF_WORD else sym)
            self._ends_word.append(sym == END_OF_WORD)
        for a, b in self.merges:
            ia, ib = self.vocab.id(a), self.vocab.id(b)
            self._surface.append(self._surface[ia] + self._surface[ib])
            self._ends_word.append(self._ends_word[ib])
        self._cache: dict[str, list[int]] = {}

    @property
    def pad_id(self) -> int:
        return self.vocab.id(PAD)

    @property
    def delim_id(self) -> int:
        return self.vocab.id(DELIM)

    @property
    def eos_id(self) -> int:
        return self.vocab.id(EOS)

    @property
    def unk_id(self) -> int:
        return self.vocab.id(UNK)

    @property
    def special_ids(self) -> frozenset[int]:
        return frozenset(self.vocab.id(t) for t in SPECIALS)

    def __len__(self) -> int:
        return len(self.vocab)

    def _encode_word(self, word: str) -> list[int]:
        cached = self._cache.get(word)
        if cached is not None:
            return cached
        symbols = word_symbols(word, self.alphabet)
        while len(symbols) > 1:
            best = None
            best_rank = None
            for pair in zip(symbols, symbols[1:]):
                r = self.ranks.get(pair)
                if r is not None and (best_rank is None or r < best_rank):
                    best, best_rank = pair, r
            if best is None:
                break
            symbols = merge_word(symbols, best)
        ids = [self.vocab.id(s) for s in symbols]
        self._cache[word] = ids
        return ids

    def encode(self, text: str) -> list[int]:
        out: list[int] = []
        for word in pretokenize(text, self.lowercase):
            out.extend(self._encode_word(word))
        return out

    def decode(self, ids: Iterable[int]) -> str:
        words: list[str] = []
        current: list[str] = []
        n = len(self.vocab)
        for i in ids:
            i = int(i)
            if not 0 <= i < n:
                raise PreconditionError(f"unknown token id {i}")
            current.append(self._surface[i])
            if self._ends_word[i]:
                words.append("".join(current))
                current = []
        if current:
            words.append("".join(current))
        return " ".join(w for w in words if w)

    def fingerprint(self) -> str:
        return hashlib.sha256(self.dumps().encode("utf-8")).hexdigest()

    def dumps(self) -> str:
        lines = [f"{_HEADER} base={len(self.base_symbols)} merges={len(self.merges)} lowercase={int(self.lowercase)}"]
        lines.extend(self.base_symbols)
        lines.extend(f"{a}\t{b}" for a, b in self.merges)
        return "\n".join(lines) + "\n"

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")

    @classmethod
    def loads(cls, text: str) -> "Tokenizer":
        lines = text.split("\n")
        header = lines[0].split()
        if " ".join(header[:2]) != _HEADER:
            raise PreconditionError("not a minigen tokenizer file")
        fields = dict(item.split("=") for item in header[2:])
        nb, nm = int(fields["base"]), int(fields["merges"])
        base = lines[1 : 1 + nb]
        merges = [tuple(line.split("\t")) for line in lines[1 + nb : 1 + nb + nm]]
        if len(base) != nb or len(merges) != nm or any(len(m) != 2 for m in merges):
            raise PreconditionError("truncated or malformed tokenizer file")
        return cls(base, merges, lowercase=bool(int(fields.get("lowercase", "0"))))

    @classmethod
    def load(cls, path: str | Path) -> "Tokenizer":
        return cls.loads(Path(path).read_text(encoding="utf-8"))


def _word_counts(corpus: str | Iterable[str], lowercase: bool) -> Counter:
    counts: Counter = Counter()
    chunks: Iterator[str] = iter([corpus]) if isinstance(corpus, str) else iter(corpus)
    for chunk in chunks:
        counts.update(pretokenize(chunk, lowercase))
    return counts


def _base_symbols(words: Iterable[str]) -> list[str]:
    chars = sorted({c for w in words for c in w})
    return [UNK, END_OF_WORD] + chars


def train_bpe(corpus: str | Iterable[str], num_merges: int, lowercase: bool = False) -> Tokenizer:
    """Learn up to ``num_merges`` merges; stops early when no pair remains.

    A pair whose concatenation already names a symbol is never merged, which
    keeps the vocabulary a bijection.
    """
    if num_merges < 0:
        raise PreconditionError("num_merges must be >= 0")
    counts = _word_counts(corpus, lowercase)
    if not counts:
        raise DegenerateInputError("BPE training corpus is empty")
    base = _base_symbols(counts)
    known = set(SPECIALS) | set(base)

    words = [word_symbols(w) for w in counts]
    freqs = [counts[w] for w in counts]
    pair_counts: Counter = Counter()
    where: dict[tuple[str, str], set[int]] = defaultdict(set)
    for wi, syms in enumerate(words):
        for pair in zip(syms, syms[1:]):
            pair_counts[pair] += freqs[wi]
            where[pair].add(wi)

    merges: list[tuple[str, str]] = []
    while len(merges) < num_merges:
        best = None
        best_sort = None
        for pair, c in pair_counts.items():
            if c <= 0 or pair[0] + pair[1] in known:
                continue
            sort = (-c, pair_key(pair))
            if best_sort is None or sort < best_sort:
                best, best_sort = pair, sort
        if best is None:
            break
        merges.append(best)
        known.add(best[0] + best[1])
        for wi in sorted(where.pop(best, ())):
            old = words[wi]
            new = merge_word(old, best)
            if new == old:
                continue
            f = freqs[wi]
            for pair in zip(old, old[1:]):
                pair_counts[pair] -= f
            for pair in zip(new, new[1:]):
                pair_counts[pair] += f
                where[pair].add(wi)
            words[wi] = new
        pair_counts.pop(best, None)
    return Tokenizer(base, merges, lowercase=lowercase)
