from __future__ import annotations

from typing import Sequence

from ..transformer import Hooks, Model, greedy_decode_batch
from .tasks import Pair, collate


def edit_distance(ref: Sequence, hyp: Sequence) -> int:
    """Levenshtein distance (unit-cost substitutions, insertions, deletions)."""
    prev = list(range(len(hyp) + 1))
    for i, r in enumerate(ref, 1):
        cur = [i] + [0] * len(hyp)
        for j, h in enumerate(hyp, 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (r != h))
        prev = cur
    return prev[-1]


def token_error_rate(refs: Sequence[Sequence], hyps: Sequence[Sequence]) -> float:
    total = sum(len(r) for r in refs)
    if total == 0:
        raise ValueError("references are empty")
    return sum(edit_distance(r, h) for r, h in zip(refs, hyps)) / total


def evaluate(model: Model, pairs: list[Pair], hooks: Hooks | None = None, batch_size: int = 64) -> float:
    """Token error rate of greedy decodes against the references."""
    if not pairs:
        raise ValueError("eval set is empty")
    hyps: list[list[int]] = []
    for i in range(0, len(pairs), batch_size):
        chunk = pairs[i : i + batch_size]
        src, _, _ = collate(chunk)
        max_len = max(len(t) for _, t in chunk) + 2
        hyps.extend(greedy_decode_batch(model, src, max_len, hooks))
    return token_error_rate([t for _, t in pairs], hyps)
