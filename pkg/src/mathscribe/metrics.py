"""Evaluation metrics: token edit distance, exact-match rate, perplexity."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch

from .data import EmptyDataset, TrainingSet, assemble_batch

__all__ = [
    "EmptyReference",
    "EmptyList",
    "edit_distance",
    "wer",
    "exprate",
    "perplexity",
    "EvalReport",
    "evaluate_pairs",
]


class EmptyReference(ValueError):
    pass


class EmptyList(ValueError):
    pass


def edit_distance(ref: Sequence, hyp: Sequence) -> int:
    """Levenshtein distance with unit insert/delete/substitute costs."""
    m, n = len(ref), len(hyp)
    if m == 0:
        return n
    if n == 0:
        return m
    prev = list(range(n + 1))
    for i in range(1, m + 1):
        cur = [i] + [0] * n
        for j in range(1, n + 1):
            sub = prev[j - 1] + (ref[i - 1] != hyp[j - 1])
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, sub)
        prev = cur
    return prev[n]


def wer(ref: Sequence, hyp: Sequence) -> float:
    """Token-level edit distance normalized by the reference length."""
    if len(ref) == 0:
        raise EmptyReference("reference sequence is empty")
    return edit_distance(ref, hyp) / len(ref)


def exprate(pairs: Sequence[tuple[Sequence, Sequence]]) -> float:
    """Percentage of pairs whose sequences match exactly."""
    if len(pairs) == 0:
        raise EmptyList("no (reference, hypothesis) pairs")
    exact = sum(1 for ref, hyp in pairs if list(ref) == list(hyp))
    return 100.0 * exact / len(pairs)


def perplexity(model, dataset: TrainingSet, batch_size: int = 8, per_formula: bool = False) -> float:
    """Exponential of the teacher-forced cross entropy.

    The default averages per token over the whole set; ``per_formula``
    instead averages the per-formula perplexities.  ``model`` must provide
    ``sequence_nll(images, targets, extents) -> (nll_sum, token_count)``.
    """
    if len(dataset) == 0:
        raise EmptyDataset("cannot evaluate perplexity on an empty dataset")
    if hasattr(model, "eval"):
        model.eval()
    if per_formula:
        step = 1
    else:
        step = batch_size
    total_nll = 0.0
    total_tokens = 0
    values: list[float] = []
    with torch.no_grad():
        for start in range(0, len(dataset), step):
            picks = [(0, i) for i in range(start, min(start + step, len(dataset)))]
            batch = assemble_batch([dataset], picks, dataset.vocab)
            nll, count = model.sequence_nll(batch.images, batch.targets, batch.extents)
            total_nll += float(nll)
            total_tokens += count
            if per_formula and count:
                values.append(float(torch.exp(nll / count)))
    if per_formula:
        return sum(values) / len(values)
    return float(torch.exp(torch.tensor(total_nll / max(1, total_tokens))))


@dataclass(frozen=True)
class EvalReport:
    wer: float
    exprate: float
    n_samples: int
    perplexity: float | None = None


def evaluate_pairs(pairs: Sequence[tuple[Sequence, Sequence]], ppl: float | None = None) -> EvalReport:
    """Aggregate WER/ExpRate over (reference, hypothesis) token sequences."""
    if len(pairs) == 0:
        raise EmptyList("no pairs to evaluate")
    mean_wer = sum(wer(r, h) for r, h in pairs) / len(pairs)
    return EvalReport(wer=mean_wer, exprate=exprate(pairs), n_samples=len(pairs), perplexity=ppl)
