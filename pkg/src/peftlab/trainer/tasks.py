"""Synthetic token-to-token tasks standing in for in-domain / out-of-domain speech data.

Pretraining always uses the copy task.  Adaptation applies the task transform
(copy, reverse) followed by a fixed token permutation; the out-of-domain set uses
a second permutation that never appears in adaptation data.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from ..transformer import BOS, EOS, PAD

N_SPECIAL = 3
DATA_SIZES = {"small": 1000, "medium": 10000, "large": 30000}
TASK_KINDS = ("copy", "reverse", "remap")

Pair = tuple[tuple[int, ...], tuple[int, ...]]


@dataclass(frozen=True)
class TaskSpec:
    kind: str = "remap"
    vocab: int = 32
    min_len: int = 4
    max_len: int = 16
    n_pretrain: int = 4000
    n_train: int = DATA_SIZES["small"]
    n_eval: int = 200
    remap_seed: int = 1234
    # number of payload tokens the domain permutation moves (0 < remap_tokens <= vocab)
    remap_tokens: int = 4

    def validate(self) -> TaskSpec:
        if self.kind not in TASK_KINDS:
            raise ValueError(f"task kind must be one of {TASK_KINDS}, got {self.kind!r}")
        if not 1 <= self.min_len <= self.max_len:
            raise ValueError("need 1 <= min_len <= max_len")
        for name in ("vocab", "n_pretrain", "n_train", "n_eval"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if not 2 <= self.remap_tokens <= self.vocab:
            raise ValueError("remap_tokens must lie in [2, vocab]")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def payload(self) -> np.ndarray:
        return np.arange(N_SPECIAL, N_SPECIAL + self.vocab)


def domain_permutation(task: TaskSpec, seed: int) -> np.ndarray:
    """Token map over the full id range; moves ``remap_tokens`` payload ids with no fixed points."""
    rng = np.random.default_rng(seed)
    perm = np.arange(N_SPECIAL + task.vocab)
    moved = rng.choice(task.payload, size=task.remap_tokens, replace=False)
    perm[moved] = np.roll(moved, 1)
    return perm


def identity_permutation(task: TaskSpec) -> np.ndarray:
    return np.arange(N_SPECIAL + task.vocab)


def transform(kind: str, src: tuple[int, ...], perm: np.ndarray | None) -> tuple[int, ...]:
    out = src[::-1] if kind == "reverse" else src
    if perm is not None and kind == "remap":
        out = tuple(int(perm[t]) for t in out)
    return tuple(out)


@dataclass
class TaskData:
    pretrain: list[Pair]
    adapt_train: list[Pair]
    in_domain_eval: list[Pair]
    ood_eval: list[Pair]
    in_domain_perm: np.ndarray
    ood_perm: np.ndarray


def _ood_perm(task: TaskSpec, in_perm: np.ndarray) -> np.ndarray:
    seed = task.remap_seed + 1
    while True:
        perm = domain_permutation(task, seed)
        if not np.array_equal(perm, in_perm):
            return perm
        seed += 1


def make_task(task: TaskSpec, seed: int = 0, perm: np.ndarray | None = None) -> TaskData:
    """Deterministic, pairwise-disjoint splits (no source sequence appears twice)."""
    task.validate()
    rng = np.random.default_rng(seed)
    in_perm = domain_permutation(task, task.remap_seed) if perm is None else perm
    ood_perm = _ood_perm(task, in_perm)
    seen: set[tuple[int, ...]] = set()

    def draw(n: int) -> list[tuple[int, ...]]:
        out = []
        while len(out) < n:
            length = int(rng.integers(task.min_len, task.max_len + 1))
            seq = tuple(int(t) for t in rng.choice(task.payload, size=length))
            if seq not in seen:
                seen.add(seq)
                out.append(seq)
        return out

    pretrain = [(s, transform("copy", s, None)) for s in draw(task.n_pretrain)]
    adapt = [(s, transform(task.kind, s, in_perm)) for s in draw(task.n_train)]
    in_eval = [(s, transform(task.kind, s, in_perm)) for s in draw(task.n_eval)]
    ood_kind = "remap"
    ood = []
    for s in draw(task.n_eval):
        base = transform(task.kind, s, None) if task.kind != "remap" else s
        ood.append((s, transform(ood_kind, base, ood_perm)))
    return TaskData(pretrain, adapt, in_eval, ood, in_perm, ood_perm)


def collate(pairs: list[Pair]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Pad a batch into (src, decoder input, decoder target) arrays; PAD marks ignored slots."""
    B = len(pairs)
    S = max(len(s) for s, _ in pairs)
    Tn = max(len(t) for _, t in pairs) + 1
    src = np.full((B, S), PAD, dtype=np.int64)
    tgt_in = np.full((B, Tn), PAD, dtype=np.int64)
    tgt_out = np.full((B, Tn), PAD, dtype=np.int64)
    for i, (s, t) in enumerate(pairs):
        src[i, : len(s)] = s
        tgt_in[i, 0] = BOS
        tgt_in[i, 1 : len(t) + 1] = t
        tgt_out[i, : len(t)] = t
        tgt_out[i, len(t)] = EOS
    return src, tgt_in, tgt_out
