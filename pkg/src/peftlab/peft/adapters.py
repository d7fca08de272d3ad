"""Adapter states, forward hooks and merge for every supported PEFT method."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import tensor as T
from ..tensor import Tensor
from ..transformer import (
    Hooks,
    Model,
    ModuleGroup,
    Role,
    WeightSite,
    bias_names,
    enumerate_sites,
    forward,
    layer_norm_names,
)
from .spec import AdapterSpec


class WiringError(KeyError):
    """A site asked for a shared basis that was never created."""


class UnsupportedMergeError(RuntimeError):
    pass


# -- weight deltas -------------------------------------------------------------------


def delta_lora(B: Tensor, A: Tensor) -> Tensor:
    return B @ A


def delta_alpha_lora(alpha: Tensor, B: Tensor, A: Tensor) -> Tensor:
    return alpha * (B @ A)


def delta_adalora(B: Tensor, lam: Tensor, A: Tensor, mask: np.ndarray) -> Tensor:
    coeff = lam * mask.astype(lam.dtype)
    return T.diag_scale(B, coeff) @ A


def delta_s2lora(B: Tensor, s: Tensor, A: Tensor) -> Tensor:
    return T.diag_scale(B, s) @ A


def _normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    return (rng.standard_normal(shape) * std).astype(T.get_dtype())


def _zeros(shape) -> np.ndarray:
    return np.zeros(shape, dtype=T.get_dtype())


class Adapter(Hooks):
    """Base class: owns namespaced trainable tensors and a site set."""

    method = "none"

    def __init__(self, spec: AdapterSpec, model: Model):
        self.spec = spec
        self.arch = model.arch
        self.params: dict[str, Tensor] = {}
        self.sites = enumerate_sites(model, roles=spec.roles)
        self._targeted = {s.name for s in self.sites}

    def _param(self, key: str, field: str, data: np.ndarray) -> Tensor:
        name = f"adapter/{self.method}/{key}/{field}"
        t = Tensor(data, requires_grad=True, name=name)
        self.params[name] = t
        return t

    def get(self, key: str, field: str) -> Tensor:
        return self.params[f"adapter/{self.method}/{key}/{field}"]

    def trainable_parameters(self) -> dict[str, Tensor]:
        return dict(self.params)

    def buffers(self) -> dict[str, np.ndarray]:
        return {}

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {k: v.data for k, v in self.params.items()}
        state.update(self.buffers())
        return state

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        own = self.state_dict()
        missing = set(own) - set(state)
        extra = set(state) - set(own)
        if missing or extra:
            raise WiringError(f"adapter state mismatch: missing={sorted(missing)[:3]} extra={sorted(extra)[:3]}")
        for name, t in self.params.items():
            arr = np.asarray(state[name])
            if arr.shape != t.shape:
                raise WiringError(f"{name}: shape {arr.shape} != {t.shape}")
            t.data = arr.astype(t.dtype).copy()
        self._load_buffers(state)

    def _load_buffers(self, state: dict[str, np.ndarray]) -> None:
        pass

    def output_scale(self, site: WeightSite) -> Tensor | None:
        return None


class LoRAAdapter(Adapter):
    """Vanilla LoRA (B zero-initialized) or alpha-LoRA (scalar alpha = 0, B and A normal)."""

    def __init__(self, spec: AdapterSpec, model: Model, rng: np.random.Generator):
        super().__init__(spec, model)
        self.method = spec.method
        r, std = spec.rank, spec.init_std
        for site in self.sites:
            if spec.method == "alpha_lora":
                self._param(site.name, "B", _normal(rng, (site.d_out, r), std))
                self._param(site.name, "A", _normal(rng, (r, site.d_in), std))
                self._param(site.name, "alpha", _zeros(()))
            else:
                self._param(site.name, "B", _zeros((site.d_out, r)))
                self._param(site.name, "A", _normal(rng, (r, site.d_in), std))

    def delta(self, site: WeightSite) -> Tensor:
        B, A = self.get(site.name, "B"), self.get(site.name, "A")
        if self.method == "alpha_lora":
            return delta_alpha_lora(self.get(site.name, "alpha"), B, A)
        return delta_lora(B, A)

    def weight_and_bias(self, site, weight, bias):
        if site.name not in self._targeted:
            return weight, bias
        return weight + self.delta(site), bias


class AdaLoRAAdapter(Adapter):
    """SVD-form update B̄ diag(Λ ⊙ mask) Ā with a per-site triplet mask."""

    method = "adalora"

    def __init__(self, spec: AdapterSpec, model: Model, rng: np.random.Generator):
        super().__init__(spec, model)
        r, std = spec.adalora_initial, spec.init_std
        self.masks: dict[str, np.ndarray] = {}
        for site in self.sites:
            self._param(site.name, "B", _normal(rng, (site.d_out, r), std))
            self._param(site.name, "A", _normal(rng, (r, site.d_in), std))
            self._param(site.name, "lambda", _zeros((r,)))
            self.masks[site.name] = np.ones(r, dtype=bool)

    def triplet(self, site: WeightSite) -> tuple[Tensor, Tensor, Tensor]:
        return self.get(site.name, "B"), self.get(site.name, "lambda"), self.get(site.name, "A")

    def delta(self, site: WeightSite) -> Tensor:
        B, lam, A = self.triplet(site)
        return delta_adalora(B, lam, A, self.masks[site.name])

    def weight_and_bias(self, site, weight, bias):
        if site.name not in self._targeted:
            return weight, bias
        return weight + self.delta(site), bias

    def active_rank(self, site: WeightSite) -> int:
        return int(self.masks[site.name].sum())

    def buffers(self):
        return {f"adapter/adalora/{name}/mask": m.astype(np.float32) for name, m in self.masks.items()}

    def _load_buffers(self, state):
        for name in self.masks:
            self.masks[name] = np.asarray(state[f"adapter/adalora/{name}/mask"]) > 0.5


class S2LoRAAdapter(Adapter):
    """Module-group shared (B, A) with a per-site coefficient vector s."""

    method = "s2lora"

    def __init__(self, spec: AdapterSpec, model: Model, rng: np.random.Generator):
        super().__init__(spec, model)
        r, std = spec.rank, spec.init_std
        self.store: dict[tuple[ModuleGroup, tuple[int, int]], tuple[Tensor, Tensor]] = {}
        self._store_ids: dict[tuple[ModuleGroup, tuple[int, int]], str] = {}
        for site in self.sites:
            key = self.store_key(site)
            if key not in self.store:
                sid = self._pair_id(key)
                self._store_ids[key] = sid
                d2, d1 = key[1]
                self.store[key] = (
                    self._param(sid, "B", _normal(rng, (d2, r), std)),
                    self._param(sid, "A", _normal(rng, (r, d1), std)),
                )
        for site in self.sites:
            self._param(site.name, "s", _zeros((r,)))

    def store_key(self, site: WeightSite) -> tuple[ModuleGroup, tuple[int, int]]:
        if site.group.is_ffm and self.spec.ffm_sharing == "transpose_tied":
            fc1 = (self.arch.d_ffn, self.arch.d_model)
            return (site.group, fc1)
        return (site.group, site.shape)

    def _pair_id(self, key) -> str:
        group, (d2, d1) = key
        if group.is_ffm and self.spec.ffm_sharing == "per_shape":
            return f"{group.value}.{d2}x{d1}"
        return group.value

    def pairs(self) -> list[tuple[str, Tensor, Tensor]]:
        return [(self._store_ids[k], B, A) for k, (B, A) in self.store.items()]

    def coefficients(self) -> dict[str, Tensor]:
        return {site.name: self.get(site.name, "s") for site in self.sites}

    def basis(self, site: WeightSite) -> tuple[Tensor, Tensor]:
        key = self.store_key(site)
        if key not in self.store:
            raise WiringError(f"no shared basis for {key[0].value} {key[1]} (site {site.name})")
        B, A = self.store[key]
        if site.group.is_ffm and self.spec.ffm_sharing == "transpose_tied" and site.role is Role.FC2:
            return A.T, B.T
        return B, A

    def delta(self, site: WeightSite) -> Tensor:
        B, A = self.basis(site)
        return delta_s2lora(B, self.get(site.name, "s"), A)

    def weight_and_bias(self, site, weight, bias):
        if site.name not in self._targeted:
            return weight, bias
        return weight + self.delta(site), bias


class BitFitAdapter(Adapter):
    """Trainable additive deltas on every bias vector (site biases, layer norms, front-end)."""

    method = "bitfit"

    def __init__(self, spec: AdapterSpec, model: Model, rng: np.random.Generator | None = None):
        super().__init__(spec, model)
        self._targeted = set()
        for name in bias_names(model.arch):
            key = name[: -len(".bias")]
            self._param(key, "bias", _zeros(model.params[name].shape))

    def weight_and_bias(self, site, weight, bias):
        if bias is None:
            return weight, bias
        return weight, bias + self.get(site.name, "bias")

    def norm_bias(self, name, beta):
        return beta + self.get(name, "bias")


class IA3Adapter(Adapter):
    """Learned vectors rescaling the outputs of the k, v and fc2 projections."""

    method = "ia3"

    def __init__(self, spec: AdapterSpec, model: Model, rng: np.random.Generator | None = None):
        super().__init__(spec, model)
        for site in self.sites:
            self._param(site.name, "l", np.ones(site.d_out, dtype=T.get_dtype()))

    def output_scale(self, site):
        if site.name not in self._targeted:
            return None
        return self.get(site.name, "l")

    def output(self, site, y):
        scale = self.output_scale(site)
        return y if scale is None else y * scale


class GLoRAAdapter(Adapter):
    """W + W·A_g + B_g and b + W·C_g + D_g·b + E_g with low-rank A_g, B_g."""

    method = "glora"

    def __init__(self, spec: AdapterSpec, model: Model, rng: np.random.Generator):
        super().__init__(spec, model)
        r, std = spec.rank, spec.init_std
        f = spec.glora_factors
        for site in self.sites:
            d2, d1 = site.shape
            if "A" in f:
                self._param(site.name, "A_down", _zeros((d1, r)))
                self._param(site.name, "A_up", _normal(rng, (r, d1), std))
            if "B" in f:
                self._param(site.name, "B_down", _zeros((d2, r)))
                self._param(site.name, "B_up", _normal(rng, (r, d1), std))
            if site.has_bias:
                if "C" in f:
                    self._param(site.name, "C", _zeros((d1,)))
                if "D" in f:
                    self._param(site.name, "D", _zeros(()))
                if "E" in f:
                    self._param(site.name, "E", _zeros((d2,)))

    def _opt(self, site: WeightSite, field: str) -> Tensor | None:
        return self.params.get(f"adapter/glora/{site.name}/{field}")

    def weight_and_bias(self, site, weight, bias):
        if site.name not in self._targeted:
            return weight, bias
        w = weight
        a_down = self._opt(site, "A_down")
        if a_down is not None:
            w = w + weight @ (a_down @ self._opt(site, "A_up"))
        b_down = self._opt(site, "B_down")
        if b_down is not None:
            w = w + b_down @ self._opt(site, "B_up")
        if bias is None:
            return w, bias
        b = bias
        c = self._opt(site, "C")
        if c is not None:
            b = b + T.linear(c.reshape(1, site.d_in), weight).reshape(site.d_out)
        d = self._opt(site, "D")
        if d is not None:
            b = b + d * bias
        e = self._opt(site, "E")
        if e is not None:
            b = b + e
        return w, b


class FullFTAdapter(Adapter):
    """Full fine-tuning: the base parameters themselves are trainable."""

    method = "full_ft"

    def __init__(self, spec: AdapterSpec, model: Model, rng: np.random.Generator | None = None):
        super().__init__(spec, model)
        self._targeted = set()
        for name, p in model.params.items():
            self.params[f"adapter/full_ft/{name}/value"] = p


_ADAPTERS = {
    "lora": LoRAAdapter,
    "alpha_lora": LoRAAdapter,
    "adalora": AdaLoRAAdapter,
    "s2lora": S2LoRAAdapter,
    "bitfit": BitFitAdapter,
    "ia3": IA3Adapter,
    "glora": GLoRAAdapter,
    "full_ft": FullFTAdapter,
}


@dataclass
class AdaptedModel:
    model: Model
    adapter: Adapter

    @property
    def spec(self) -> AdapterSpec:
        return self.adapter.spec

    def forward(self, src_tokens, tgt_tokens) -> Tensor:
        return forward(self.model, src_tokens, tgt_tokens, hooks=self.adapter)

    def trainable_parameters(self) -> dict[str, Tensor]:
        return self.adapter.trainable_parameters()

    def trainable_count(self) -> int:
        return sum(p.size for p in self.trainable_parameters().values() if p.requires_grad)

    def merge(self) -> Model:
        return merge(self)


def attach(model: Model, spec: AdapterSpec, seed: int = 0) -> AdaptedModel:
    """Freeze the base model (except under full_ft) and create the adapter state."""
    spec.validate(model.arch)
    model.set_trainable(spec.method == "full_ft")
    rng = np.random.default_rng(seed)
    adapter = _ADAPTERS[spec.method](spec, model, rng)
    return AdaptedModel(model, adapter)


def merge(adapted: AdaptedModel) -> Model:
    """Fold the adapter into a plain model: W <- W_eff, b <- b_eff, IA3 scales folded into rows."""
    model, adapter = adapted.model, adapted.adapter
    merged = model.clone()
    merged.set_trainable(False)
    with T.no_grad():
        for site in model.sites:
            w, b = adapter.weight_and_bias(site, model.weight(site), model.bias(site))
            scale = adapter.output_scale(site)
            w_data, b_data = w.data, None if b is None else b.data
            if scale is not None:
                w_data = w_data * scale.data[:, None]
                if b_data is not None:
                    b_data = b_data * scale.data
            if b_data is not None and model.bias(site) is None:
                raise UnsupportedMergeError(f"{adapter.method} created a bias on bias-free site {site.name}")
            if not np.all(np.isfinite(w_data)):
                raise UnsupportedMergeError(f"non-finite merged weight at {site.name}")
            merged.params[f"{site.name}.weight"].data = np.array(w_data, copy=True)
            if b_data is not None:
                merged.params[f"{site.name}.bias"].data = np.array(b_data, copy=True)
        for ln in layer_norm_names(model.arch):
            beta = adapter.norm_bias(ln, model.params[f"{ln}.bias"])
            merged.params[f"{ln}.bias"].data = np.array(beta.data, copy=True)
    return merged
