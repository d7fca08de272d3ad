"""Regularized objectives: the S2-LoRA sparsity/scale penalties and the AdaLoRA orthogonality penalty."""

from __future__ import annotations

import numpy as np

from .. import tensor as T
from ..peft.adapters import AdaLoRAAdapter, Adapter, S2LoRAAdapter
from ..tensor import Tensor


def s2_sparsity_term(coefficients: list[Tensor], alpha1: float) -> Tensor:
    """alpha1 * mean over sites of ||s_i||_1."""
    n = len(coefficients)
    total = T.stack_scalars(T.l1_norm(s) for s in coefficients)
    return total * (alpha1 / n)


def s2_basis_term(pairs: list[tuple[Tensor, Tensor]], rank: int, alpha2: float) -> Tensor:
    """alpha2 / (2r) * sum over stored pairs and k of (||B[:, k]||_2 + ||A[k, :]||_2)."""
    total = T.stack_scalars(
        T.l2_norm(B, axis=0).sum() + T.l2_norm(A, axis=1).sum() for B, A in pairs
    )
    return total * (alpha2 / (2.0 * rank))


def total_loss(ce: Tensor, adapter: S2LoRAAdapter) -> tuple[Tensor, dict[str, Tensor]]:
    spec = adapter.spec
    l1 = s2_sparsity_term(list(adapter.coefficients().values()), spec.alpha1)
    l2 = s2_basis_term([(B, A) for _, B, A in adapter.pairs()], spec.rank, spec.alpha2)
    return ce + l1 + l2, {"l1": l1, "l2": l2}


def orth_penalty(B: Tensor, A: Tensor) -> Tensor:
    """||BᵀB − I||²_F + ||AAᵀ − I||²_F."""
    eye = np.eye(B.shape[1], dtype=B.dtype)
    gb = B.T @ B - eye
    ga = A @ A.T - eye
    return (gb * gb).sum() + (ga * ga).sum()


def orth_term(adapter: AdaLoRAAdapter, weight: float) -> Tensor:
    pens = [orth_penalty(adapter.get(s.name, "B"), adapter.get(s.name, "A")) for s in adapter.sites]
    return T.stack_scalars(pens) * (weight / len(pens))


def composite_loss(ce: Tensor, adapter: Adapter | None, orth_weight: float = 0.1) -> tuple[Tensor, dict[str, Tensor]]:
    """Cross-entropy plus the method's own penalties; components are returned alongside."""
    if isinstance(adapter, S2LoRAAdapter):
        return total_loss(ce, adapter)
    if isinstance(adapter, AdaLoRAAdapter) and adapter.spec.orth_on and orth_weight > 0:
        orth = orth_term(adapter, orth_weight)
        return ce + orth, {"orth": orth}
    return ce, {}
