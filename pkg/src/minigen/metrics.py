"""ROUGE-1/2/L and n-gram source-overlap profiles over whitespace tokens."""

from __future__ import annotations

import csv
import math
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .errors import DegenerateInputError, PreconditionError

VARIANTS = ("rouge1", "rouge2", "rougeL")


def metric_tokens(text: str) -> list[str]:
    return text.lower().split()


@dataclass(frozen=True)
class Score:
    precision: float
    recall: float
    f1: float
    # set when a side is too short for the n-gram order (the score is then 0)
    degenerate: bool = False


def f_measure(p: float, r: float) -> float:
    return 2 * p * r / (p + r) if p + r > 0 else 0.0


def ngrams(tokens: Sequence[str], n: int) -> list[tuple[str, ...]]:
    return [tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1)]


def rouge_n(candidate: Sequence[str], reference: Sequence[str], n: int) -> Score:
    if n < 1:
        raise PreconditionError("n must be >= 1")
    cand = Counter(ngrams(candidate, n))
    ref = Counter(ngrams(reference, n))
    if not cand or not ref:
        return Score(0.0, 0.0, 0.0, degenerate=True)
    overlap = sum((cand & ref).values())
    p = overlap / sum(cand.values())
    r = overlap / sum(ref.values())
    return Score(p, r, f_measure(p, r))


def lcs_length(a: Sequence, b: Sequence) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(candidate: Sequence[str], reference: Sequence[str]) -> Score:
    """Summary-level LCS over the whole token sequences (no sentence splitting)."""
    if not candidate or not reference:
        return Score(0.0, 0.0, 0.0, degenerate=True)
    lcs = lcs_length(candidate, reference)
    p = lcs / len(candidate)
    r = lcs / len(reference)
    return Score(p, r, f_measure(p, r))


def rouge_all(candidate: str, reference: str) -> dict[str, Score]:
    c, r = metric_tokens(candidate), metric_tokens(reference)
    return {"rouge1": rouge_n(c, r, 1), "rouge2": rouge_n(c, r, 2), "rougeL": rouge_l(c, r)}


def overlap_profile(summary: Sequence[str], article: Sequence[str], n_max: int = 10) -> dict[int, float | None]:
    """Per order n, the share of summary n-grams (with multiplicity) found anywhere in the article.

    Orders longer than the summary map to None rather than 0.
    """
    if n_max < 1:
        raise PreconditionError("n_max must be >= 1")
    out: dict[int, float | None] = {}
    for n in range(1, n_max + 1):
        grams = ngrams(summary, n)
        if not grams:
            out[n] = None
            continue
        present = set(ngrams(article, n))
        out[n] = sum(g in present for g in grams) / len(grams)
    return out


def mean_profile(profiles: Iterable[Mapping[int, float | None]]) -> dict[int, float | None]:
    """Average each order over the examples where it is defined."""
    acc: dict[int, list[float]] = {}
    orders: set[int] = set()
    for prof in profiles:
        for n, v in prof.items():
            orders.add(n)
            if v is not None:
                acc.setdefault(n, []).append(v)
    return {n: (math.fsum(acc[n]) / len(acc[n]) if n in acc else None) for n in sorted(orders)}


def aggregate(scores: Sequence[Mapping[str, Score]]) -> dict[str, Score]:
    """Arithmetic mean of precision, recall and F1 per variant (order-independent via fsum)."""
    if not scores:
        raise DegenerateInputError("cannot aggregate an empty corpus")
    out = {}
    for v in scores[0]:
        n = len(scores)
        out[v] = Score(
            math.fsum(s[v].precision for s in scores) / n,
            math.fsum(s[v].recall for s in scores) / n,
            math.fsum(s[v].f1 for s in scores) / n,
        )
    return out


def x100(value: float) -> str:
    """Report convention: percentage with two decimals."""
    return f"{100 * value:.2f}"


REPORT_COLUMNS = ["id", "r1_f", "r2_f", "rl_f"]


def write_report(ids: Sequence, scores: Sequence[Mapping[str, Score]], path: str | Path) -> dict[str, Score]:
    agg = aggregate(scores)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(REPORT_COLUMNS)
        for i, s in zip(ids, scores):
            w.writerow([i, x100(s["rouge1"].f1), x100(s["rouge2"].f1), x100(s["rougeL"].f1)])
        w.writerow(["aggregate", x100(agg["rouge1"].f1), x100(agg["rouge2"].f1), x100(agg["rougeL"].f1)])
    return agg


PROFILE_COLUMNS = ["n", "fraction", "system"]


def write_profiles(series: Mapping[str, Mapping[int, float | None]], path: str | Path) -> None:
    """Long-format CSV; undefined orders are omitted rather than written as 0."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(PROFILE_COLUMNS)
        for system, prof in series.items():
            for n, v in sorted(prof.items()):
                if v is not None:
                    w.writerow([n, f"{v:.6f}", system])
