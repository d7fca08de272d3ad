"""Optimization loop: gradient accumulation, Adam, AdaLoRA rank reallocation, evaluation."""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .. import tensor as T
from ..allocator import BudgetSchedule, ImportanceTracker, Reallocation, budget_at, rank_report, reallocate
from ..peft.adapters import AdaLoRAAdapter, AdaptedModel, S2LoRAAdapter, attach
from ..peft.spec import AdapterSpec
from ..tensor import Tensor
from ..transformer import PAD, Model
from .losses import composite_loss
from .metrics import evaluate
from .tasks import Pair, TaskData, TaskSpec, collate, make_task


class DivergenceError(RuntimeError):
    def __init__(self, step: int, snapshot: dict):
        super().__init__(f"non-finite loss at step {step}: {snapshot}")
        self.step = step
        self.snapshot = snapshot


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float | None = None  # None: 1e-3 for PEFT, 1e-4 for full fine-tuning
    epochs: int = 3
    batch_size: int = 2
    grad_accumulation: int = 8
    seed: int = 0
    orth_weight: float = 0.1
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    grad_clip: float | None = None
    importance_beta1: float = 0.85
    importance_beta2: float = 0.85
    warmup_frac: float = 0.1
    final_frac: float = 0.7
    max_steps: int | None = None
    eval_batch_size: int = 64

    def lr_for(self, method: str) -> float:
        if self.learning_rate is not None:
            return self.learning_rate
        return 1e-4 if method == "full_ft" else 1e-3

    @property
    def effective_batch(self) -> int:
        return self.batch_size * self.grad_accumulation

    def validate(self) -> TrainConfig:
        if self.epochs < 1 or self.batch_size < 1 or self.grad_accumulation < 1:
            raise ValueError("epochs, batch_size and grad_accumulation must be positive")
        if self.learning_rate is not None and self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.max_steps is not None and self.max_steps < 1:
            raise ValueError("max_steps must be positive")
        return self

    def to_dict(self) -> dict:
        return asdict(self)


class Adam:
    def __init__(self, params: list[Tensor], lr: float, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.params = params
        self.lr, self.b1, self.b2, self.eps, self.wd = lr, betas[0], betas[1], eps, weight_decay
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.t = 0

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            if self.wd:
                g = g + self.wd * p.data
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def _clip(params: list[Tensor], max_norm: float) -> None:
    total = math.sqrt(sum(float((p.grad**2).sum()) for p in params if p.grad is not None))
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale


@dataclass
class TrainingRun:
    method: str
    config: dict
    losses: list[dict] = field(default_factory=list)
    metrics: dict = field(default_factory=dict)
    rank_reports: list[dict] = field(default_factory=list)
    reallocations: int = 0
    soft_masking: bool = True
    wall_clock: float = 0.0

    def to_json_dict(self) -> dict:
        """Deterministic content only (wall-clock excluded)."""
        return {
            "method": self.method,
            "config": self.config,
            "metrics": self.metrics,
            "losses": self.losses,
            "rank_reports": self.rank_reports,
            "reallocations": self.reallocations,
            "soft_masking": self.soft_masking,
        }


def _report_dict(adapter, step: int) -> dict:
    rep = rank_report(adapter)
    return {
        "step": step,
        "threshold": rep.threshold,
        "panels": {g.value: rep.panels[g].tolist() for g in rep.panels},
    }


def train(
    adapted: AdaptedModel,
    train_pairs: list[Pair],
    tcfg: TrainConfig,
    on_epoch_end: Callable[[int, AdaptedModel], None] | None = None,
    on_reallocate: Callable[[int, Reallocation], None] | None = None,
) -> TrainingRun:
    tcfg.validate()
    adapter = adapted.adapter
    spec = adapter.spec
    named = [(n, p) for n, p in adapter.trainable_parameters().items() if p.requires_grad]
    params = [p for _, p in named]
    opt = Adam(params, tcfg.lr_for(spec.method), (tcfg.adam_beta1, tcfg.adam_beta2), tcfg.adam_eps,
               tcfg.weight_decay)
    rng = np.random.default_rng(tcfg.seed)
    micro = [train_pairs[i : i + tcfg.batch_size] for i in range(0, len(train_pairs), tcfg.batch_size)]
    steps_per_epoch = math.ceil(len(micro) / tcfg.grad_accumulation)
    total_steps = steps_per_epoch * tcfg.epochs
    if tcfg.max_steps is not None:
        total_steps = min(total_steps, tcfg.max_steps)

    tracker = schedule = None
    if isinstance(adapter, AdaLoRAAdapter):
        tracker = ImportanceTracker(tcfg.importance_beta1, tcfg.importance_beta2)
        if spec.alloc_on:
            schedule = BudgetSchedule.for_run(spec.adalora_initial, spec.adalora_target, len(adapter.sites),
                                              total_steps, tcfg.warmup_frac, tcfg.final_frac)

    run = TrainingRun(spec.method, {"adapter": spec.to_dict(), "train": tcfg.to_dict()})
    start = time.perf_counter()
    step = 0
    for epoch in range(tcfg.epochs):
        order = rng.permutation(len(train_pairs))
        shuffled = [train_pairs[i] for i in order]
        batches = [shuffled[i : i + tcfg.batch_size] for i in range(0, len(shuffled), tcfg.batch_size)]
        for g0 in range(0, len(batches), tcfg.grad_accumulation):
            if step >= total_steps:
                break
            group = batches[g0 : g0 + tcfg.grad_accumulation]
            opt.zero_grad()
            sums: dict[str, float] = {}
            for batch in group:
                src, tgt_in, tgt_out = collate(batch)
                logits = adapted.forward(src, tgt_in)
                ce = T.cross_entropy(logits, tgt_out, ignore_index=PAD)
                loss, parts = composite_loss(ce, adapter, tcfg.orth_weight)
                (loss * (1.0 / len(group))).backward()
                record = {"ce": float(ce.data), **{k: float(v.data) for k, v in parts.items()},
                          "total": float(loss.data)}
                for k, v in record.items():
                    sums[k] = sums.get(k, 0.0) + v / len(group)
            step += 1
            if not all(math.isfinite(v) for v in sums.values()):
                raise DivergenceError(step, {"epoch": epoch, **sums})
            if tcfg.grad_clip is not None:
                _clip(params, tcfg.grad_clip)
            opt.step()
            if tracker is not None:
                tracker.update({n: p.data for n, p in named}, {n: p.grad for n, p in named})
                if schedule is not None and schedule.t_warmup < step <= schedule.t_final:
                    info = reallocate(tracker, adapter, budget_at(step, schedule))
                    run.reallocations += 1
                    if on_reallocate is not None:
                        on_reallocate(step, info)
            run.losses.append({"step": step, **sums})
        if isinstance(adapter, (AdaLoRAAdapter, S2LoRAAdapter)):
            run.rank_reports.append(_report_dict(adapter, step))
        if on_epoch_end is not None:
            on_epoch_end(epoch, adapted)
        if step >= total_steps:
            break
    run.wall_clock = time.perf_counter() - start
    return run


def evaluate_sets(adapted: AdaptedModel, sets: dict[str, list[Pair]], batch_size: int = 64) -> dict[str, float]:
    return {name: evaluate(adapted.model, pairs, adapted.adapter, batch_size) for name, pairs in sets.items()}


def run_training(
    model: Model,
    spec: AdapterSpec,
    tcfg: TrainConfig,
    task: TaskSpec,
    data: TaskData | None = None,
    adapter_seed: int | None = None,
    eval_before: bool = False,
    **hooks,
) -> tuple[AdaptedModel, TrainingRun]:
    """Attach ``spec`` to ``model``, adapt on the task's adaptation split and evaluate."""
    data = data or make_task(task, tcfg.seed)
    adapted = attach(model, spec, tcfg.seed if adapter_seed is None else adapter_seed)
    sets = {"in_domain": data.in_domain_eval, "ood": data.ood_eval}
    before = evaluate_sets(adapted, sets, tcfg.eval_batch_size) if eval_before else None
    run = train(adapted, data.adapt_train, tcfg, **hooks)
    run.config["task"] = task.to_dict()
    run.metrics = {f"{k}_ter": v for k, v in evaluate_sets(adapted, sets, tcfg.eval_batch_size).items()}
    if before is not None:
        run.metrics.update({f"{k}_ter_before": v for k, v in before.items()})
    return adapted, run


# From-scratch training on the copy split.  Fine-tuning defaults (1e-4, 2x8 batches) are
# far too slow for a randomly initialized model, so pretraining carries its own.
PRETRAIN_DEFAULTS = TrainConfig(learning_rate=1e-3, epochs=3, batch_size=32, grad_accumulation=1)


def pretrain(arch, task: TaskSpec, tcfg: TrainConfig = PRETRAIN_DEFAULTS, seed: int = 0,
             data: TaskData | None = None, init_std: float | None = None, **hooks) -> tuple[Model, TrainingRun]:
    """Train a base model from scratch on the copy split (all parameters trainable).

    ``init_std`` defaults to d_model**-0.5; at 0.02 the toy model sits on a loss
    plateau for thousands of steps before it starts to copy.
    """
    from ..transformer import build_model

    data = data or make_task(task, seed)
    std = arch.d_model**-0.5 if init_std is None else init_std
    model = build_model(arch, seed, init_std=std)
    adapted = attach(model, AdapterSpec(method="full_ft"), seed)
    run = train(adapted, data.pretrain, tcfg, **hooks)
    run.config["task"] = task.to_dict()
    run.config["arch"] = arch.to_dict()
    run.config["init_std"] = std
    copy_eval = [(s, s) for s, _ in data.in_domain_eval]
    run.metrics = {"copy_ter": evaluate(model, copy_eval, None, tcfg.eval_batch_size)}
    model.set_trainable(False)
    return model, run
