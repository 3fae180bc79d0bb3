"""Corpus BLEU-4, token accuracy and the evaluation report."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import astuple, dataclass, fields
from typing import Optional, Sequence

import numpy as np

from .errors import ContractError
from .model import PAD_ID

MAX_ORDER = 4


def ngrams(seq: Sequence, n: int) -> Counter:
    return Counter(tuple(seq[i:i + n]) for i in range(len(seq) - n + 1))


def modified_precision(candidates, references, n: int) -> tuple:
    """Corpus totals ``(clipped matches, candidate n-grams)`` for order ``n``."""
    matched = total = 0
    for cand, ref in zip(candidates, references):
        c, r = ngrams(cand, n), ngrams(ref, n)
        matched += sum(min(k, r[g]) for g, k in c.items())
        total += sum(c.values())
    return matched, total


def bleu4(candidates: Sequence[Sequence], references: Sequence[Sequence]) -> float:
    """Unsmoothed corpus BLEU with n-gram orders 1..4 and a brevity penalty.

    Orders for which the candidates contain no n-grams at all are left out
    of the geometric mean.
    """
    if len(candidates) == 0:
        raise ContractError("bleu4 needs at least one candidate")
    if len(candidates) != len(references):
        raise ContractError(f"{len(candidates)} candidates but {len(references)} references")
    c_len = sum(len(c) for c in candidates)
    r_len = sum(len(r) for r in references)
    if c_len == 0:
        return 0.0
    logs = []
    for n in range(1, MAX_ORDER + 1):
        matched, total = modified_precision(candidates, references, n)
        if total == 0:
            continue
        if matched == 0:
            return 0.0
        logs.append(math.log(matched / total))
    bp = 1.0 if c_len > r_len else math.exp(1.0 - r_len / c_len)
    return bp * math.exp(sum(logs) / len(logs))


def token_accuracy(logits: np.ndarray, targets: np.ndarray, mask: Optional[np.ndarray] = None) -> float:
    """Fraction of counted positions whose argmax equals the target.

    ``mask`` marks positions to count; it defaults to ``targets != PAD``.
    """
    logits = np.asarray(logits)
    targets = np.asarray(targets)
    if logits.shape[:-1] != targets.shape:
        raise ContractError(f"logits {logits.shape} do not match targets {targets.shape}")
    mask = targets != PAD_ID if mask is None else np.asarray(mask, dtype=bool)
    n = int(mask.sum())
    if n == 0:
        raise ContractError("no non-pad positions to score")
    return float(((logits.argmax(axis=-1) == targets) & mask).sum() / n)


@dataclass(frozen=True)
class EvalReport:
    bleu: float
    token_accuracy: float
    exact_match: float
    loss: float
    n_samples: int

    def to_text(self) -> str:
        return "".join(f"{f.name}={getattr(self, f.name)!r}\n" for f in fields(self))

    @staticmethod
    def csv_header() -> str:
        return ",".join(f.name for f in fields(EvalReport))

    def to_csv_row(self) -> str:
        return ",".join(repr(v) for v in astuple(self))
