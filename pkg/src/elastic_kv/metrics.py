"""Evaluation metrics: perplexity, ROUGE-L and decode-cost accounting."""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np

from . import numkern as nk


@dataclass(frozen=True)
class PplResult:
    mean_ce: float
    ppl: float
    n_positions: int


@dataclass(frozen=True)
class RougeResult:
    lcs_len: int
    precision: float
    recall: float
    f1: float


@dataclass
class CostReport:
    """Attention cost of one decode trace.

    ``cumulative_flops[s]`` is the attention FLOP count after decode step ``s``.
    ``wall_ms`` and ``tokens_per_s`` are filled in by whoever timed the run.
    """

    attn_flops: int = 0
    kv_bytes_peak: int = 0
    wall_ms: float = 0.0
    tokens_per_s: float = 0.0
    cumulative_flops: list[int] = field(default_factory=list)


def perplexity(logits, targets: Sequence[int]) -> PplResult:
    """``exp`` of the mean cross-entropy (nats) of ``targets`` under ``logits``.

    Row ``i`` of ``logits`` must be the prediction for ``targets[i]``.
    """
    targets = np.asarray(list(targets), dtype=np.int64)
    if targets.size == 0:
        raise ValueError("perplexity needs at least one target")
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 2 or logits.shape[0] != targets.size:
        raise ValueError(f"{logits.shape[0] if logits.ndim == 2 else logits.shape} logits rows "
                         f"for {targets.size} targets")
    if ((targets < 0) | (targets >= logits.shape[1])).any():
        raise ValueError("target id outside the logits width")
    ce = -nk.log_softmax(logits)[np.arange(targets.size), targets]
    mean_ce = float(ce.mean())
    return PplResult(mean_ce=mean_ce, ppl=float(np.exp(mean_ce)), n_positions=int(targets.size))


def lcs_length(a: Sequence, b: Sequence) -> int:
    """Longest common subsequence length by the O(|a||b|) dynamic programme."""
    a, b = list(a), list(b)
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l_f1(candidate: Sequence, reference: Sequence) -> RougeResult:
    """ROUGE-L over token ids: LCS-based precision, recall and their F1."""
    lcs = lcs_length(candidate, reference)
    if not candidate or not reference:
        return RougeResult(lcs, 0.0, 0.0, 0.0)
    p = lcs / len(candidate)
    r = lcs / len(reference)
    f1 = 2 * p * r / (p + r) if p + r > 0 else 0.0
    return RougeResult(lcs, p, r, f1)


def attention_flops(cache_len_trace: Sequence[int], d_head: int, n_heads: int,
                    n_layers: int) -> CostReport:
    """Decode-phase attention FLOPs and peak KV memory for a cache-length trace.

    Each step attending over ``c`` slots costs ``2*L*K*c*d_head`` for the scores
    and the same again for the weighted value sum. Peak memory counts keys and
    values as float64.
    """
    trace = np.asarray(list(cache_len_trace), dtype=np.int64)
    if trace.size == 0:
        return CostReport()
    if (trace < 0).any():
        raise ValueError("negative cache length in trace")
    per_step = 4 * n_layers * n_heads * d_head * trace
    cum = np.cumsum(per_step)
    return CostReport(
        attn_flops=int(cum[-1]),
        kv_bytes_peak=int(trace.max()) * n_layers * n_heads * d_head * 2 * 8,
        cumulative_flops=[int(c) for c in cum],
    )
