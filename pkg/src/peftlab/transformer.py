"""A small pre-LN encoder-decoder transformer with named, group-tagged weight sites."""

from __future__ import annotations

import enum
import math
from dataclasses import asdict, dataclass
from typing import Iterable, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor

PAD, BOS, EOS = 0, 1, 2
NEG_INF = -1e9
N_MELS = 80


class ArchError(ValueError):
    pass


@dataclass(frozen=True)
class ArchSpec:
    d_model: int = 64
    n_enc_layers: int = 2
    n_dec_layers: int = 2
    n_heads: int = 4
    d_ffn: int = 256
    vocab_size: int = 64
    max_src_len: int = 32
    max_tgt_len: int = 32
    # "embedding": token-id encoder input; "conv_stub": two conv blocks (parameter census only)
    frontend: str = "embedding"

    def violations(self) -> list[str]:
        problems = []
        for name in ("d_model", "n_enc_layers", "n_dec_layers", "n_heads", "d_ffn",
                     "vocab_size", "max_src_len", "max_tgt_len"):
            value = getattr(self, name)
            if not isinstance(value, int) or isinstance(value, bool) or value <= 0:
                problems.append(f"{name} must be a positive int, got {value!r}")
        if not problems and self.d_model % self.n_heads:
            problems.append(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.frontend not in ("embedding", "conv_stub"):
            problems.append(f"frontend must be 'embedding' or 'conv_stub', got {self.frontend!r}")
        return problems

    def validate(self) -> ArchSpec:
        problems = self.violations()
        if problems:
            raise ArchError("invalid architecture: " + "; ".join(problems))
        return self

    def to_dict(self) -> dict:
        return asdict(self)


PRESETS: dict[str, ArchSpec] = {
    "toy-small": ArchSpec(),
    "whisper-medium-dims": ArchSpec(
        d_model=1024, n_enc_layers=24, n_dec_layers=24, n_heads=16, d_ffn=4096,
        vocab_size=51865, max_src_len=1500, max_tgt_len=448, frontend="conv_stub",
    ),
}


def get_preset(name: str) -> ArchSpec:
    try:
        return PRESETS[name]
    except KeyError:
        raise ArchError(f"unknown arch preset {name!r}; choose from {sorted(PRESETS)}") from None


class ModuleGroup(str, enum.Enum):
    ENC_SAM = "Enc-SAM"
    ENC_FFM = "Enc-FFM"
    DEC_SAM = "Dec-SAM"
    DEC_CAM = "Dec-CAM"
    DEC_FFM = "Dec-FFM"

    @property
    def is_ffm(self) -> bool:
        return self in (ModuleGroup.ENC_FFM, ModuleGroup.DEC_FFM)

    @property
    def prefix(self) -> str:
        side, block = self.value.split("-")
        return f"{side.lower()}.{{layer}}.{block.lower()}"


class Role(str, enum.Enum):
    Q = "q"
    K = "k"
    V = "v"
    O = "o"
    FC1 = "fc1"
    FC2 = "fc2"


ATTN_ROLES = (Role.Q, Role.K, Role.V, Role.O)
FFM_ROLES = (Role.FC1, Role.FC2)
ALL_ROLES = ATTN_ROLES + FFM_ROLES
ENC_GROUPS = (ModuleGroup.ENC_SAM, ModuleGroup.ENC_FFM)
DEC_GROUPS = (ModuleGroup.DEC_SAM, ModuleGroup.DEC_CAM, ModuleGroup.DEC_FFM)


def parse_roles(roles: Iterable[str | Role]) -> frozenset[Role]:
    return frozenset(Role(r) for r in roles)


@dataclass(frozen=True)
class WeightSite:
    layer_index: int
    group: ModuleGroup
    role: Role
    d_out: int
    d_in: int
    has_bias: bool

    @property
    def name(self) -> str:
        return f"{self.group.prefix.format(layer=self.layer_index)}.{self.role.value}"

    @property
    def shape(self) -> tuple[int, int]:
        return (self.d_out, self.d_in)


def _group_sites(arch: ArchSpec, layer: int, group: ModuleGroup) -> list[WeightSite]:
    d, f = arch.d_model, arch.d_ffn
    if group.is_ffm:
        return [
            WeightSite(layer, group, Role.FC1, f, d, True),
            WeightSite(layer, group, Role.FC2, d, f, True),
        ]
    return [WeightSite(layer, group, role, d, d, role is not Role.K) for role in ATTN_ROLES]


def arch_sites(arch: ArchSpec) -> list[WeightSite]:
    """All weight sites in registry order: encoder layers, then decoder layers."""
    sites: list[WeightSite] = []
    for i in range(arch.n_enc_layers):
        for g in ENC_GROUPS:
            sites.extend(_group_sites(arch, i, g))
    for i in range(arch.n_dec_layers):
        for g in DEC_GROUPS:
            sites.extend(_group_sites(arch, i, g))
    return sites


def enumerate_sites(
    source, roles: Iterable[str | Role] | None = None, groups: Iterable[ModuleGroup | str] | None = None
) -> list[WeightSite]:
    """Stable-ordered sites of a Model or ArchSpec filtered by role and group (None = no filter)."""
    sites = source.sites if isinstance(source, Model) else arch_sites(source)
    if roles is not None:
        wanted = parse_roles(roles)
        sites = [s for s in sites if s.role in wanted]
    if groups is not None:
        wanted_g = {ModuleGroup(g) for g in groups}
        sites = [s for s in sites if s.group in wanted_g]
    return sites


def layer_norm_names(arch: ArchSpec) -> list[str]:
    names = []
    for i in range(arch.n_enc_layers):
        names += [f"enc.{i}.sam.ln", f"enc.{i}.ffm.ln"]
    names.append("enc.ln_post")
    for i in range(arch.n_dec_layers):
        names += [f"dec.{i}.sam.ln", f"dec.{i}.cam.ln", f"dec.{i}.ffm.ln"]
    names.append("dec.ln_post")
    return names


def param_shapes(arch: ArchSpec) -> dict[str, tuple[int, ...]]:
    """Every base parameter name and shape, in a stable order."""
    d = arch.d_model
    shapes: dict[str, tuple[int, ...]] = {}
    if arch.frontend == "conv_stub":
        shapes["enc.conv1.weight"] = (d, N_MELS, 3)
        shapes["enc.conv1.bias"] = (d,)
        shapes["enc.conv2.weight"] = (d, d, 3)
        shapes["enc.conv2.bias"] = (d,)
        # Whisper keeps its sinusoidal table as a stored parameter
        shapes["enc.pos"] = (arch.max_src_len, d)
    else:
        shapes["enc.embed"] = (arch.vocab_size, d)
    shapes["dec.embed"] = (arch.vocab_size, d)
    shapes["dec.pos"] = (arch.max_tgt_len, d)
    for site in arch_sites(arch):
        shapes[f"{site.name}.weight"] = site.shape
        if site.has_bias:
            shapes[f"{site.name}.bias"] = (site.d_out,)
    for ln in layer_norm_names(arch):
        shapes[f"{ln}.weight"] = (d,)
        shapes[f"{ln}.bias"] = (d,)
    return shapes


def param_census(arch: ArchSpec) -> int:
    """Closed-form total number of base parameters."""
    return sum(math.prod(s) for s in param_shapes(arch).values())


def bias_names(arch: ArchSpec) -> list[str]:
    return [n for n in param_shapes(arch) if n.endswith(".bias")]


def sinusoids(length: int, channels: int, max_timescale: float = 10000.0) -> np.ndarray:
    half = channels // 2
    inc = math.log(max_timescale) / max(half - 1, 1)
    inv = np.exp(-inc * np.arange(half))
    t = np.arange(length)[:, None] * inv[None, :]
    return np.concatenate([np.sin(t), np.cos(t)], axis=1)


class Model:
    """Base model parameters plus the site registry."""

    def __init__(self, arch: ArchSpec, params: dict[str, Tensor]):
        self.arch = arch
        self.params = params
        self.sites = arch_sites(arch)
        self._site_index = {s.name: s for s in self.sites}
        self.enc_pos = sinusoids(arch.max_src_len, arch.d_model) if arch.frontend == "embedding" else None

    def site(self, name: str) -> WeightSite:
        return self._site_index[name]

    def weight(self, site: WeightSite) -> Tensor:
        return self.params[f"{site.name}.weight"]

    def bias(self, site: WeightSite) -> Tensor | None:
        return self.params.get(f"{site.name}.bias")

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def set_trainable(self, flag: bool) -> None:
        for p in self.params.values():
            p.requires_grad = flag
            p.grad = None

    def clone(self) -> Model:
        params = {k: Tensor(np.array(v.data, copy=True), requires_grad=v.requires_grad)
                  for k, v in self.params.items()}
        return Model(self.arch, params)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    @classmethod
    def from_state(cls, arch: ArchSpec, state: dict[str, np.ndarray]) -> Model:
        expected = param_shapes(arch)
        missing = set(expected) - set(state)
        extra = set(state) - set(expected)
        if missing or extra:
            raise ArchError(f"state does not match arch: missing={sorted(missing)[:3]} extra={sorted(extra)[:3]}")
        params = {}
        for name, shape in expected.items():
            arr = np.asarray(state[name], dtype=T.get_dtype())
            if arr.shape != shape:
                raise ArchError(f"{name}: shape {arr.shape} != expected {shape}")
            params[name] = Tensor(arr.copy())
        return cls(arch, params)


def build_model(arch: ArchSpec, seed: int = 0, materialize: bool = True, init_std: float = 0.02) -> Model:
    """Initialize weights ~ N(0, init_std), biases 0, layer norms (1, 0).

    With ``materialize=False`` every tensor is a read-only zero view that costs no
    memory; useful for attaching adapters and counting on very large presets.
    """
    arch.validate()
    dtype = T.get_dtype()
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    for name, shape in param_shapes(arch).items():
        if not materialize:
            params[name] = Tensor(np.broadcast_to(np.zeros((), dtype=dtype), shape))
            continue
        if name.endswith(".bias"):
            data = np.zeros(shape)
        elif name.endswith(".ln.weight") or name.endswith("ln_post.weight"):
            data = np.ones(shape)
        elif name == "enc.pos":
            data = sinusoids(*shape)
        else:
            data = rng.standard_normal(shape) * init_std
        params[name] = Tensor(data.astype(dtype))
    return Model(arch, params)


class Hooks:
    """Identity hook set; adapters override what they change."""

    def weight_and_bias(self, site: WeightSite, weight: Tensor, bias: Tensor | None):
        return weight, bias

    def output(self, site: WeightSite, y: Tensor) -> Tensor:
        return y

    def norm_bias(self, name: str, beta: Tensor) -> Tensor:
        return beta


_IDENTITY = Hooks()


class _Runner:
    def __init__(self, model: Model, hooks: Hooks | None):
        self.m = model
        self.p = model.params
        self.hooks = hooks or _IDENTITY
        self.arch = model.arch

    def ln(self, name: str, x: Tensor) -> Tensor:
        beta = self.hooks.norm_bias(name, self.p[f"{name}.bias"])
        return T.layer_norm(x, self.p[f"{name}.weight"], beta)

    def proj(self, site_name: str, x: Tensor) -> Tensor:
        site = self.m.site(site_name)
        w, b = self.hooks.weight_and_bias(site, self.m.weight(site), self.m.bias(site))
        return self.hooks.output(site, T.linear(x, w, b))

    def attention(self, prefix: str, xq: Tensor, xkv: Tensor, mask: np.ndarray) -> Tensor:
        B, Tq, d = xq.shape
        Tk = xkv.shape[1]
        H = self.arch.n_heads
        dh = d // H
        q = self.proj(f"{prefix}.q", xq).reshape(B, Tq, H, dh).transpose(0, 2, 1, 3)
        k = self.proj(f"{prefix}.k", xkv).reshape(B, Tk, H, dh).transpose(0, 2, 3, 1)
        v = self.proj(f"{prefix}.v", xkv).reshape(B, Tk, H, dh).transpose(0, 2, 1, 3)
        scores = (q @ k) * (1.0 / math.sqrt(dh)) + mask
        ctx = T.softmax(scores, axis=-1) @ v
        ctx = ctx.transpose(0, 2, 1, 3).reshape(B, Tq, d)
        return self.proj(f"{prefix}.o", ctx)

    def ffn(self, prefix: str, x: Tensor) -> Tensor:
        return self.proj(f"{prefix}.fc2", T.gelu(self.proj(f"{prefix}.fc1", x)))

    def encode(self, src: np.ndarray) -> tuple[Tensor, np.ndarray]:
        if self.arch.frontend != "embedding":
            raise ArchError("conv_stub front-end is for parameter counting only")
        S = src.shape[1]
        x = T.embedding(self.p["enc.embed"], src) + self.m.enc_pos[:S].astype(T.get_dtype())
        key_mask = np.where(src == PAD, NEG_INF, 0.0)[:, None, None, :].astype(x.dtype)
        for i in range(self.arch.n_enc_layers):
            h = self.ln(f"enc.{i}.sam.ln", x)
            x = x + self.attention(f"enc.{i}.sam", h, h, key_mask)
            h = self.ln(f"enc.{i}.ffm.ln", x)
            x = x + self.ffn(f"enc.{i}.ffm", h)
        return self.ln("enc.ln_post", x), key_mask

    def decode(self, memory: Tensor, key_mask: np.ndarray, tgt: np.ndarray) -> Tensor:
        Tt = tgt.shape[1]
        y = T.embedding(self.p["dec.embed"], tgt) + self.p["dec.pos"][:Tt]
        causal = np.triu(np.full((Tt, Tt), NEG_INF), k=1).astype(y.dtype)
        for i in range(self.arch.n_dec_layers):
            h = self.ln(f"dec.{i}.sam.ln", y)
            y = y + self.attention(f"dec.{i}.sam", h, h, causal)
            h = self.ln(f"dec.{i}.cam.ln", y)
            y = y + self.attention(f"dec.{i}.cam", h, memory, key_mask)
            h = self.ln(f"dec.{i}.ffm.ln", y)
            y = y + self.ffn(f"dec.{i}.ffm", h)
        y = self.ln("dec.ln_post", y)
        return y @ self.p["dec.embed"].T


def _as_batch(tokens, limit: int, vocab: int, what: str) -> np.ndarray:
    arr = np.asarray(tokens, dtype=np.int64)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[1] == 0:
        raise ValueError(f"{what}: expected a non-empty token sequence or batch, got shape {arr.shape}")
    if arr.shape[1] > limit:
        raise ValueError(f"{what}: length {arr.shape[1]} exceeds maximum {limit}")
    if arr.min() < 0 or arr.max() >= vocab:
        raise ValueError(f"{what}: token id out of range [0, {vocab})")
    return arr


def forward(model: Model, src_tokens, tgt_tokens, hooks: Hooks | None = None) -> Tensor:
    """Teacher-forced logits.

    1-D inputs give (len(tgt), vocab) logits; 2-D (batch, len) inputs give
    (batch, len(tgt), vocab).  Source positions holding PAD are masked out.
    """
    arch = model.arch
    single = np.ndim(src_tokens) == 1
    src = _as_batch(src_tokens, arch.max_src_len, arch.vocab_size, "src")
    tgt = _as_batch(tgt_tokens, arch.max_tgt_len, arch.vocab_size, "tgt")
    if src.shape[0] != tgt.shape[0]:
        raise ValueError(f"batch size mismatch: src {src.shape[0]} vs tgt {tgt.shape[0]}")
    run = _Runner(model, hooks)
    memory, key_mask = run.encode(src)
    logits = run.decode(memory, key_mask, tgt)
    return logits[0] if single else logits


def greedy_decode_batch(model: Model, src_batch: np.ndarray, max_len: int, hooks: Hooks | None = None) -> list[list[int]]:
    """Greedy decoding of a padded source batch; EOS and BOS are not returned."""
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    arch = model.arch
    src = _as_batch(src_batch, arch.max_src_len, arch.vocab_size, "src")
    max_len = min(max_len, arch.max_tgt_len)
    run = _Runner(model, hooks)
    with T.no_grad():
        memory, key_mask = run.encode(src)
        B = src.shape[0]
        prefix = np.full((B, 1), BOS, dtype=np.int64)
        done = np.zeros(B, dtype=bool)
        outputs: list[list[int]] = [[] for _ in range(B)]
        for _ in range(max_len):
            logits = run.decode(memory, key_mask, prefix).data[:, -1, :]
            nxt = logits.argmax(axis=-1)
            for b in range(B):
                if not done[b]:
                    if nxt[b] == EOS:
                        done[b] = True
                    else:
                        outputs[b].append(int(nxt[b]))
            if done.all():
                break
            prefix = np.concatenate([prefix, nxt[:, None]], axis=1)
    return outputs


def greedy_decode(model: Model, src_tokens: Sequence[int], max_len: int, hooks: Hooks | None = None) -> list[int]:
    return greedy_decode_batch(model, np.asarray(src_tokens)[None, :], max_len, hooks)[0]
