from __future__ import annotations

from dataclasses import asdict, dataclass, replace

from ..transformer import ALL_ROLES, ArchSpec, Role, enumerate_sites

METHODS = ("lora", "alpha_lora", "adalora", "s2lora", "bitfit", "ia3", "glora", "full_ft")
RANKED = ("lora", "alpha_lora", "adalora", "s2lora", "glora")
FFM_SHARING = ("transpose_tied", "per_shape")
GLORA_FACTORS = "ABCDE"

_DEFAULT_ROLES = {
    "lora": ("q", "v"),
    "alpha_lora": ("q", "v"),
    "adalora": ("q", "v"),
    "glora": ("q", "v"),
    "s2lora": tuple(r.value for r in ALL_ROLES),
    "ia3": ("k", "v", "fc2"),
}


class AdapterSpecError(ValueError):
    pass


@dataclass(frozen=True)
class AdapterSpec:
    method: str = "lora"
    rank: int = 8
    target_roles: tuple[str, ...] | None = None
    alpha1: float = 0.05
    alpha2: float = 0.1
    # stored for reference only; the L1 penalty weight alpha1 realizes the constraint
    epsilon_nominal: float = 1e-3
    initial_rank: int | None = None
    target_rank: int | None = None
    orth_on: bool = True
    alloc_on: bool = True
    ffm_sharing: str = "transpose_tied"
    glora_factors: str = GLORA_FACTORS
    init_std: float = 0.02

    @property
    def roles(self) -> tuple[Role, ...]:
        if self.target_roles is not None:
            return tuple(Role(r) for r in self.target_roles)
        return tuple(Role(r) for r in _DEFAULT_ROLES.get(self.method, ()))

    @property
    def adalora_target(self) -> int:
        return self.target_rank if self.target_rank is not None else self.rank

    @property
    def adalora_initial(self) -> int:
        if self.initial_rank is not None:
            return self.initial_rank
        return 48 if self.adalora_target == 32 else 12

    def with_(self, **changes) -> AdapterSpec:
        return replace(self, **changes)

    def to_dict(self) -> dict:
        d = asdict(self)
        if d["target_roles"] is not None:
            d["target_roles"] = list(d["target_roles"])
        return d

    @classmethod
    def from_dict(cls, data: dict) -> AdapterSpec:
        data = dict(data)
        if data.get("target_roles") is not None:
            data["target_roles"] = tuple(data["target_roles"])
        return cls(**data)

    def validate(self, arch: ArchSpec | None = None) -> AdapterSpec:
        if self.method not in METHODS:
            raise AdapterSpecError(f"unknown method {self.method!r}; valid: {', '.join(METHODS)}")
        if not isinstance(self.rank, int) or isinstance(self.rank, bool) or self.rank < 1:
            raise AdapterSpecError(f"rank must be a positive int, got {self.rank!r}")
        if self.alpha1 < 0 or self.alpha2 < 0:
            raise AdapterSpecError("alpha1 and alpha2 must be >= 0")
        if self.epsilon_nominal <= 0:
            raise AdapterSpecError("epsilon_nominal must be > 0")
        if self.ffm_sharing not in FFM_SHARING:
            raise AdapterSpecError(f"ffm_sharing must be one of {FFM_SHARING}")
        if set(self.glora_factors) - set(GLORA_FACTORS):
            raise AdapterSpecError(f"glora_factors must be a subset of {GLORA_FACTORS!r}")
        try:
            roles = self.roles
        except ValueError as exc:
            raise AdapterSpecError(f"bad target role: {exc}") from None
        if self.method == "adalora":
            if self.adalora_target < 1 or self.adalora_initial < self.adalora_target:
                raise AdapterSpecError(
                    f"need initial_rank >= target_rank >= 1, got {self.adalora_initial} and {self.adalora_target}"
                )
        if self.method == "ia3" and set(roles) - {Role.K, Role.V, Role.FC2}:
            raise AdapterSpecError("ia3 only scales the outputs of k, v and fc2 projections")
        if arch is not None and self.method in RANKED:
            r = self.adalora_initial if self.method == "adalora" else self.rank
            for site in enumerate_sites(arch, roles=roles):
                if r >= min(site.shape):
                    raise AdapterSpecError(
                        f"rank {r} must be smaller than min dimension {min(site.shape)} of site {site.name}"
                    )
        return self
