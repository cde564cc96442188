"""Retrieval and text-overlap metrics, and report aggregation.

HR@1 doubles as prediction accuracy: it is the fraction of rows whose
top-scored candidate is the true response. token_f1 is multiset unigram
overlap F1. BLEU-4 is sentence-level with modified n-gram precisions for
n = 1..4, brevity penalty, and add-one smoothing applied to zero counts for
n >= 2; the report averages it over examples.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import asdict, dataclass
from typing import Sequence

from .errors import InputError


@dataclass
class MetricReport:
    hr1: float
    hr5: float
    mrr: float
    f1: float
    bleu4: float
    n_examples: int

    def __post_init__(self):
        for name in ("hr1", "hr5", "mrr", "f1", "bleu4"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise InputError(f"MetricReport.{name}={v} outside [0, 1]")
        if self.hr1 > self.hr5 + 1e-12:
            raise InputError("MetricReport: hr1 cannot exceed hr5")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    def table(self) -> str:
        rows = [("hr@1", self.hr1), ("hr@5", self.hr5), ("mrr", self.mrr),
                ("f1", self.f1), ("bleu4", self.bleu4)]
        lines = [f"{'metric':<10}{'value':>10}", "-" * 20]
        lines += [f"{k:<10}{v:>10.4f}" for k, v in rows]
        lines.append(f"{'examples':<10}{self.n_examples:>10d}")
        return "\n".join(lines)


def hit_rate_at_k(rank_of_true: Sequence[int], k: int) -> float:
    if not rank_of_true:
        raise InputError("hit_rate_at_k: empty rank list")
    if any(r < 1 for r in rank_of_true):
        raise InputError("hit_rate_at_k: ranks are 1-based positives")
    return sum(1 for r in rank_of_true if r <= k) / len(rank_of_true)


def mrr(rank_of_true: Sequence[int]) -> float:
    if not rank_of_true:
        raise InputError("mrr: empty rank list")
    if any(r < 1 for r in rank_of_true):
        raise InputError("mrr: ranks are 1-based positives")
    return sum(1.0 / r for r in rank_of_true) / len(rank_of_true)


def token_f1(predicted: Sequence, truth: Sequence) -> float:
    if not predicted and not truth:
        return 1.0
    if not predicted or not truth:
        return 0.0
    overlap = sum((Counter(predicted) & Counter(truth)).values())
    if overlap == 0:
        return 0.0
    precision = overlap / len(predicted)
    recall = overlap / len(truth)
    return 2 * precision * recall / (precision + recall)


def bleu4(predicted: Sequence, truth: Sequence) -> float:
    if not predicted and not truth:
        return 1.0
    if not predicted or not truth:
        return 0.0
    log_sum = 0.0
    for n in range(1, 5):
        pred_ngrams = Counter(tuple(predicted[i:i + n])
                              for i in range(len(predicted) - n + 1))
        true_ngrams = Counter(tuple(truth[i:i + n])
                              for i in range(len(truth) - n + 1))
        num = sum((pred_ngrams & true_ngrams).values())
        den = sum(pred_ngrams.values())
        if n == 1:
            if num == 0:
                return 0.0
        elif num == 0:
            num, den = num + 1, den + 1  # add-one smoothing on zero counts
        if den == 0:
            num, den = 1, 1  # no n-grams at all on a short sentence
        log_sum += math.log(num / den)
    bp = 1.0 if len(predicted) >= len(truth) else \
        math.exp(1.0 - len(truth) / len(predicted))
    return bp * math.exp(log_sum / 4.0)


def evaluate(dialogues, params, cfg, *, strict: bool = False,
             expected_candidates: int = 20, cache=None) -> MetricReport:
    """Rank every dialogue and aggregate all five metrics.

    Text metrics compare the top-ranked candidate's tokens against the true
    response's tokens. Strict mode enforces the validation protocol shape
    (a fixed candidate count per dialogue). With a cache, scoring goes
    through the cached embeddings instead of fresh encoding.
    """
    from . import fusion  # local import: metrics stays importable standalone

    if not dialogues:
        raise InputError("evaluate: no dialogues")
    ranks, f1s, bleus = [], [], []
    for d in dialogues:
        if strict and len(d.candidates) != expected_candidates:
            from .errors import DataError
            raise DataError(f"dialogue {d.id}: expected {expected_candidates} "
                            f"candidates, found {len(d.candidates)}")
        if cache is not None:
            from . import cache as cache_mod
            row = cache_mod.score_with_cache(d, cache, params, cfg,
                                             strict=strict)
        else:
            row = fusion.rank(d, params, cfg)
        ranks.append(row.rank_of(d.true_index))
        top = row.ranking[0]
        f1s.append(token_f1(d.candidates[top], d.candidates[d.true_index]))
        bleus.append(bleu4(d.candidates[top], d.candidates[d.true_index]))
    n = len(dialogues)
    return MetricReport(hr1=hit_rate_at_k(ranks, 1), hr5=hit_rate_at_k(ranks, 5),
                        mrr=mrr(ranks), f1=sum(f1s) / n, bleu4=sum(bleus) / n,
                        n_examples=n)
