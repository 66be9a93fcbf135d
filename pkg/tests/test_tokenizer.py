from collections import Counter

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from minigen.errors import DegenerateInputError, PreconditionError
from minigen.tokenizer import END_OF_WORD, SPECIALS, UNK, Tokenizer, train_bpe

SENTINEL = "</w>"


# --- independent recounting oracle -------------------------------------------


def _oracle_key(sym: str):
    # compare as character lists where the end-of-word sentinel is one
    # character larger than any real one
    chars = [c for c in sym[: -len(SENTINEL)]] + [chr(0x10FFFF) + "~"] if sym.endswith(SENTINEL) else list(sym)
    return chars


def _apply(symbols, pair):
    out, i = [], 0
    while i < len(symbols):
        if i + 1 < len(symbols) and (symbols[i], symbols[i + 1]) == pair:
            out.append(pair[0] + pair[1])
            i += 2
        else:
            out.append(symbols[i])
            i += 1
    return out


def oracle_merges(corpus: str, num_merges: int) -> list[tuple[str, str]]:
    """Recount every adjacent pair from scratch on each iteration."""
    counts = Counter(corpus.split())
    chars = {c for w in counts for c in w}
    known = set(SPECIALS) | {UNK, SENTINEL} | chars
    merges = []
    segs = {w: list(w) + [SENTINEL] for w in counts}
    for _ in range(num_merges):
        pairs = Counter()
        for w, c in counts.items():
            for p in zip(segs[w], segs[w][1:]):
                pairs[p] += c
        cands = [(-c, _oracle_key(p[0]), _oracle_key(p[1]), p) for p, c in pairs.items() if p[0] + p[1] not in known]
        if not cands:
            break
        best = min(cands)[3]
        merges.append(best)
        known.add(best[0] + best[1])
        segs = {w: _apply(sy, best) for w, sy in segs.items()}
    return merges


def random_corpus(rng, n_chars: int, alphabet="abcde", max_word=7) -> str:
    words, total = [], 0
    while total < n_chars:
        w = "".join(rng.choice(list(alphabet), size=int(rng.integers(1, max_word + 1))))
        words.append(w)
        total += len(w) + 1
    return " ".join(words)


# --- examples ----------------------------------------------------------------


def test_first_merge_most_frequent():
    tok = train_bpe("ab ab ab c", 1)
    assert tok.merges == [("a", "b")]


def test_tie_break_lexicographic():
    tok = train_bpe("ab ba", 1)
    assert tok.merges == [("a", "b")]


def test_zero_merges_is_characters_plus_specials():
    tok = train_bpe("hello world", 0)
    assert tok.merges == []
    assert tok.vocab.tokens == list(SPECIALS) + [UNK, END_OF_WORD] + sorted(set("helloworld"))


def test_encode_after_single_merge():
    tok = Tokenizer([UNK, END_OF_WORD, "a", "b", "c"], [("a", "b")])
    v = tok.vocab
    # the sentinel stays a separate symbol until some merge absorbs it
    assert tok.encode("abc") == [v.id("ab"), v.id("c"), v.id(END_OF_WORD)]
    tok2 = Tokenizer([UNK, END_OF_WORD, "a", "b", "c"], [("a", "b"), ("c", END_OF_WORD)])
    assert tok2.encode("abc") == [tok2.vocab.id("ab"), tok2.vocab.id("c" + END_OF_WORD)]


def test_empty_round_trip():
    tok = train_bpe("a b", 2)
    assert tok.encode("") == []
    assert tok.decode([]) == ""


def test_errors():
    with pytest.raises(DegenerateInputError):
        train_bpe("   \n ", 3)
    with pytest.raises(PreconditionError):
        train_bpe("abc", -1)
    tok = train_bpe("abc", 1)
    with pytest.raises(PreconditionError):
        tok.decode([len(tok)])
    with pytest.raises(PreconditionError):
        tok.decode([-1])


def test_unknown_characters_map_to_unk():
    tok = train_bpe("aaa bbb", 3)
    ids = tok.encode("aXb")
    assert tok.unk_id in ids
    assert tok.decode(ids) == f"a{UNK}b"


# --- merge table / vocabulary invariants --------------------------------------


@pytest.mark.parametrize("seed", range(6))
def test_merges_match_recounting_oracle(seed):
    rng = np.random.default_rng(seed)
    corpus = random_corpus(rng, 2000 + 400 * seed, alphabet="abcdef"[: 3 + seed % 4])
    n = 40
    assert train_bpe(corpus, n).merges == oracle_merges(corpus, n)


def test_merges_match_oracle_on_1e5_chars():
    rng = np.random.default_rng(99)
    corpus = random_corpus(rng, 100_000, alphabet="abcdefgh", max_word=9)
    assert len(corpus) >= 100_000
    n = 150
    assert train_bpe(corpus, n).merges == oracle_merges(corpus, n)


def test_vocabulary_invariants():
    rng = np.random.default_rng(5)
    tok = train_bpe(random_corpus(rng, 5000), 80)
    v = tok.vocab
    assert len(v) == len(tok.base_symbols) + len(tok.merges) + len(SPECIALS)
    assert len(set(v.tokens)) == len(v.tokens)
    assert all(v.token(v.id(t)) == t for t in v.tokens)
    merged = [a + b for a, b in tok.merges]
    assert not set(merged) & set(SPECIALS)
    assert [v.id(m) for m in merged] == list(range(len(v) - len(merged), len(v)))


def test_stops_when_no_pair_remains():
    tok = train_bpe("ab", 50)
    assert tok.merges == [("a", "b"), ("ab", END_OF_WORD)]


def test_file_round_trip(tmp_path):
    tok = train_bpe("the cat sat on the mat\nthe end", 12, lowercase=True)
    path = tmp_path / "tok.bpe"
    tok.save(path)
    text = path.read_text(encoding="utf-8")
    assert text.splitlines()[0] == f"minigen-bpe v1 base={len(tok.base_symbols)} merges=12 lowercase=1"
    again = Tokenizer.load(path)
    assert again.merges == tok.merges and again.base_symbols == tok.base_symbols and again.lowercase
    assert again.fingerprint() == tok.fingerprint()
    assert again.encode("The Cat") == tok.encode("the cat")


def test_lowercase_flag():
    assert train_bpe("Ab ab", 0, lowercase=False).base_symbols[2:] == ["A", "a", "b"]
    assert train_bpe("Ab ab", 0, lowercase=True).base_symbols[2:] == ["a", "b"]


# --- round trip ----------------------------------------------------------------

_TRAIN = "lorem ipsum dolor sit amet consectetur adipiscing elit sed do eiusmod tempor"
_TOK = train_bpe(_TRAIN, 40)
_ALPHA = sorted(set(_TRAIN.replace(" ", "")))


@given(st.lists(st.text(alphabet=_ALPHA, min_size=1, max_size=12), max_size=12))
def test_round_trip_property(words):
    text = " ".join(words)
    ids = _TOK.encode(text)
    assert _TOK.decode(ids) == text
    assert not set(ids) & _TOK.special_ids


def test_round_trip_1e4_random_strings():
    rng = np.random.default_rng(0)
    for _ in range(10_000):
        n = int(rng.integers(0, 6))
        text = " ".join("".join(rng.choice(_ALPHA, size=int(rng.integers(1, 10)))) for _ in range(n))
        assert _TOK.decode(_TOK.encode(text)) == text


@given(st.text(max_size=40))
def test_encode_never_emits_specials(text):
    tok = train_bpe("<pad> <delim> <eos> pad delim eos <<>>", 60)
    assert not set(tok.encode(text)) & tok.special_ids
