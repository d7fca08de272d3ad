"""Sensitivity-driven rank budgeting for AdaLoRA and rank-distribution reports."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .peft.adapters import AdaLoRAAdapter, Adapter, S2LoRAAdapter
from .transformer import ArchSpec, ModuleGroup, Role

REPORT_ROW_ORDER = {
    "attn": (Role.Q, Role.V, Role.K, Role.O),
    "ffm": (Role.FC1, Role.FC2),
}
MASK_THRESHOLD = 1e-4


class ScheduleError(ValueError):
    pass


@dataclass
class ImportanceTracker:
    """Exponential moving averages of |θ·g| (sensitivity) and of its deviation (uncertainty)."""

    beta1: float = 0.85
    beta2: float = 0.85
    sensitivity: dict[str, np.ndarray] = field(default_factory=dict)
    uncertainty: dict[str, np.ndarray] = field(default_factory=dict)
    steps: int = 0
    skipped_steps: list[int] = field(default_factory=list)

    def __post_init__(self):
        for b in (self.beta1, self.beta2):
            if not 0.0 < b < 1.0:
                raise ValueError(f"smoothing constants must lie in (0, 1), got {b}")

    def update(self, params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray | None]) -> bool:
        """One smoothing step; returns False (and records the step) if any gradient is non-finite."""
        self.steps += 1
        for name, g in grads.items():
            if g is not None and not np.all(np.isfinite(g)):
                self.skipped_steps.append(self.steps)
                return False
        for name, theta in params.items():
            g = grads.get(name)
            raw = np.abs(theta * g) if g is not None else np.zeros_like(theta)
            ibar = self.sensitivity.get(name)
            ubar = self.uncertainty.get(name)
            if ibar is None:
                ibar = np.zeros_like(raw)
                ubar = np.zeros_like(raw)
            ibar = self.beta1 * ibar + (1.0 - self.beta1) * raw
            ubar = self.beta2 * ubar + (1.0 - self.beta2) * np.abs(raw - ibar)
            self.sensitivity[name] = ibar
            self.uncertainty[name] = ubar
        return True

    def importance(self, name: str) -> np.ndarray:
        return self.sensitivity[name] * self.uncertainty[name]


def sensitivity_update(tracker: ImportanceTracker, params, grads) -> ImportanceTracker:
    tracker.update(params, grads)
    return tracker


def triplet_scores(tracker: ImportanceTracker, adapter: AdaLoRAAdapter, site) -> np.ndarray:
    """Score of every triplet k of one site: s(Λ_k) + mean s(B̄[:, k]) + mean s(Ā[k, :])."""
    prefix = f"adapter/adalora/{site.name}"
    r = adapter.spec.adalora_initial
    if f"{prefix}/lambda" not in tracker.sensitivity:
        return np.zeros(r)
    lam = tracker.importance(f"{prefix}/lambda")
    b = tracker.importance(f"{prefix}/B").mean(axis=0)
    a = tracker.importance(f"{prefix}/A").mean(axis=1)
    return lam + b + a


def triplet_importance(tracker: ImportanceTracker, adapter: AdaLoRAAdapter, site, k: int) -> float:
    if not 0 <= k < adapter.spec.adalora_initial:
        raise IndexError(f"triplet index {k} outside [0, {adapter.spec.adalora_initial})")
    return float(triplet_scores(tracker, adapter, site)[k])


@dataclass(frozen=True)
class BudgetSchedule:
    b_init: int
    b_target: int
    t_warmup: int
    t_final: int
    total_steps: int

    def __post_init__(self):
        if self.t_final <= self.t_warmup:
            raise ScheduleError(f"t_final ({self.t_final}) must exceed t_warmup ({self.t_warmup})")
        if self.b_target > self.b_init:
            raise ScheduleError("b_target must not exceed b_init")

    @classmethod
    def for_run(cls, initial_rank: int, target_rank: int, n_sites: int, total_steps: int,
                warmup_frac: float = 0.1, final_frac: float = 0.7) -> BudgetSchedule:
        t_warmup = int(math.floor(warmup_frac * total_steps + 0.5))
        t_final = int(math.floor(final_frac * total_steps + 0.5))
        return cls(initial_rank * n_sites, target_rank * n_sites, t_warmup, t_final, total_steps)


def budget_at(t: int, schedule: BudgetSchedule) -> int:
    """Cubic decay from b_init (through t_warmup) to b_target (from t_final on)."""
    if t <= schedule.t_warmup:
        return schedule.b_init
    if t >= schedule.t_final:
        return schedule.b_target
    progress = (t - schedule.t_warmup) / (schedule.t_final - schedule.t_warmup)
    value = schedule.b_target + (schedule.b_init - schedule.b_target) * (1.0 - progress) ** 3
    return int(math.floor(value + 0.5))


def top_budget_mask(scores: np.ndarray, budget: int) -> np.ndarray:
    """Keep the ``budget`` highest scores; ties resolve to the earlier position."""
    flat = np.asarray(scores, dtype=np.float64).reshape(-1)
    if not 0 <= budget <= flat.size:
        raise ValueError(f"budget {budget} outside [0, {flat.size}]")
    order = np.argsort(-flat, kind="stable")
    keep = np.zeros(flat.size, dtype=bool)
    keep[order[:budget]] = True
    return keep.reshape(np.shape(scores))


@dataclass
class Reallocation:
    budget: int
    scores: np.ndarray  # (n_sites, initial_rank)
    keep: np.ndarray

    @property
    def dominates(self) -> bool:
        if self.keep.all() or not self.keep.any():
            return True
        return bool(self.scores[self.keep].min() >= self.scores[~self.keep].max())


def reallocate(tracker: ImportanceTracker, adapter: AdaLoRAAdapter, budget: int) -> Reallocation:
    """Globally rank all (site, k) triplets and unmask exactly the top ``budget``."""
    scores = np.stack([triplet_scores(tracker, adapter, s) for s in adapter.sites])
    keep = top_budget_mask(scores, budget)
    for i, site in enumerate(adapter.sites):
        adapter.masks[site.name] = keep[i].copy()
    return Reallocation(budget, scores, keep)


@dataclass
class RankReport:
    method: str
    threshold: float
    panels: dict[ModuleGroup, np.ndarray]
    rows: dict[ModuleGroup, tuple[Role, ...]]

    def total(self) -> int:
        return int(sum(p.sum() for p in self.panels.values()))

    def max_rank(self) -> int:
        return int(max((p.max() for p in self.panels.values() if p.size), default=0))


def _panel_rows(group: ModuleGroup) -> tuple[Role, ...]:
    return REPORT_ROW_ORDER["ffm" if group.is_ffm else "attn"]


def rank_report(adapter: Adapter, threshold: float = MASK_THRESHOLD) -> RankReport:
    """Allocated rank per site, laid out as one (roles x layers) panel per module group."""
    if threshold < 0:
        raise ValueError("threshold must be >= 0")
    arch: ArchSpec = adapter.arch
    if isinstance(adapter, AdaLoRAAdapter):
        ranks = {s.name: adapter.active_rank(s) for s in adapter.sites}
    elif isinstance(adapter, S2LoRAAdapter):
        ranks = {name: int((np.abs(s.data) >= threshold).sum()) for name, s in adapter.coefficients().items()}
    else:
        raise TypeError(f"method {adapter.method!r} has no rank semantics")
    panels, rows = {}, {}
    for group in ModuleGroup:
        n_layers = arch.n_dec_layers if group.value.startswith("Dec") else arch.n_enc_layers
        roles = _panel_rows(group)
        grid = np.zeros((len(roles), n_layers), dtype=np.int64)
        prefix = group.prefix
        for i, role in enumerate(roles):
            for layer in range(n_layers):
                grid[i, layer] = ranks.get(f"{prefix.format(layer=layer)}.{role.value}", 0)
        panels[group] = grid
        rows[group] = roles
    return RankReport(adapter.method, threshold, panels, rows)
