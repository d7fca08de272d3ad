"""Closed-form trainable-parameter counts (no model is built)."""

from __future__ import annotations

from dataclasses import dataclass

from ..transformer import ArchSpec, Role, bias_names, enumerate_sites, param_census, param_shapes
from .spec import AdapterSpec

BITFIT_ASSUMPTIONS = (
    "biases on q, v, o, fc1, fc2 projections (key projections carry none)",
    "layer-norm biases included",
    "front-end stub (two 1-D convolutions) biases included when the arch has one",
)


@dataclass(frozen=True)
class TrainableCount:
    count: int
    total: int

    @property
    def fraction(self) -> float:
        return self.count / self.total

    @property
    def percent(self) -> str:
        return f"{100.0 * self.fraction:.2f}%"

    def __str__(self) -> str:
        return f"{self.count} ({self.percent})"


def _closed_form(spec: AdapterSpec, arch: ArchSpec) -> int:
    sites = enumerate_sites(arch, roles=spec.roles)
    m = spec.method
    if m == "lora":
        return sum(spec.rank * (d2 + d1) for d2, d1 in (s.shape for s in sites))
    if m == "alpha_lora":
        return sum(spec.rank * (d2 + d1) + 1 for d2, d1 in (s.shape for s in sites))
    if m == "adalora":
        r = spec.adalora_initial
        return sum(r * (d2 + d1) + r for d2, d1 in (s.shape for s in sites))
    if m == "s2lora":
        r = spec.rank
        pairs = set()
        for s in sites:
            if s.group.is_ffm and spec.ffm_sharing == "transpose_tied":
                pairs.add((s.group, (arch.d_ffn, arch.d_model)))
            else:
                pairs.add((s.group, s.shape))
        return sum(r * (d2 + d1) for _, (d2, d1) in pairs) + r * len(sites)
    if m == "bitfit":
        shapes = param_shapes(arch)
        return sum(shapes[n][0] for n in bias_names(arch))
    if m == "ia3":
        return sum(s.d_out for s in sites if s.role in (Role.K, Role.V, Role.FC2))
    if m == "glora":
        r, f = spec.rank, spec.glora_factors
        total = 0
        for s in sites:
            d2, d1 = s.shape
            total += ("A" in f) * 2 * r * d1 + ("B" in f) * r * (d2 + d1)
            if s.has_bias:
                total += ("C" in f) * d1 + ("D" in f) + ("E" in f) * d2
        return total
    if m == "full_ft":
        return param_census(arch)
    raise ValueError(f"unknown method {m!r}")


def count_trainable(spec: AdapterSpec, arch: ArchSpec) -> TrainableCount:
    spec.validate(arch)
    return TrainableCount(_closed_form(spec, arch), param_census(arch))
