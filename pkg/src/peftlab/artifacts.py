"""Base-model and adapter checkpoints on top of the named-array container."""

from __future__ import annotations

import json
import zlib

from . import checkpoint
from .checkpoint import CheckpointError
from .peft import AdaptedModel, AdapterSpec, attach
from .transformer import ArchError, ArchSpec, Model, build_model


def arch_hash(arch: ArchSpec) -> str:
    raw = json.dumps(arch.to_dict(), sort_keys=True).encode("utf-8")
    return f"{zlib.crc32(raw) & 0xFFFFFFFF:08x}"


def _arch_from_meta(meta: dict | None, path) -> ArchSpec:
    if not meta or "arch" not in meta:
        raise CheckpointError(f"{path}: no architecture metadata")
    try:
        return ArchSpec(**meta["arch"]).validate()
    except (TypeError, ArchError) as exc:
        raise CheckpointError(f"{path}: bad architecture metadata ({exc})") from None


def save_base(path, model: Model, extra: dict | None = None) -> None:
    meta = {"kind": "base", "arch": model.arch.to_dict(), "arch_hash": arch_hash(model.arch), **(extra or {})}
    checkpoint.save(path, model.state_dict(), meta)


def load_base(path) -> tuple[Model, dict]:
    arrays, meta = checkpoint.load(path)
    if not meta or meta.get("kind") != "base":
        raise CheckpointError(f"{path}: not a base-model checkpoint")
    arch = _arch_from_meta(meta, path)
    try:
        model = Model.from_state(arch, arrays)
    except ArchError as exc:
        raise CheckpointError(f"{path}: {exc}") from None
    model.set_trainable(False)
    return model, meta


def save_adapter(path, adapted: AdaptedModel, seed: int, extra: dict | None = None) -> None:
    arch = adapted.model.arch
    meta = {
        "kind": "adapter",
        "arch": arch.to_dict(),
        "arch_hash": arch_hash(arch),
        "spec": adapted.spec.to_dict(),
        "seed": seed,
        **(extra or {}),
    }
    state = adapted.adapter.state_dict()
    bad = [n for n in state if not n.startswith("adapter/")]
    if bad:
        raise CheckpointError(f"adapter state holds non-adapter arrays: {bad[:3]}")
    checkpoint.save(path, state, meta)


def read_adapter(path) -> tuple[dict, dict]:
    arrays, meta = checkpoint.load(path)
    if not meta or meta.get("kind") != "adapter" or "spec" not in meta:
        raise CheckpointError(f"{path}: not an adapter checkpoint")
    return arrays, meta


def attach_saved(model: Model, arrays: dict, meta: dict) -> AdaptedModel:
    """Re-create the adapter recorded in ``meta`` on ``model`` and load its arrays."""
    if meta.get("arch_hash") != arch_hash(model.arch):
        raise CheckpointError(
            f"adapter was trained for arch {meta.get('arch_hash')}, base model is {arch_hash(model.arch)}"
        )
    spec = AdapterSpec.from_dict(meta["spec"])
    adapted = attach(model, spec, int(meta.get("seed", 0)))
    try:
        adapted.adapter.load_state(arrays)
    except KeyError as exc:
        raise CheckpointError(str(exc)) from None
    return adapted


def load_adapter_standalone(path) -> AdaptedModel:
    """Adapter on an unmaterialized base: enough for rank reports, not for forward passes."""
    arrays, meta = read_adapter(path)
    arch = _arch_from_meta(meta, path)
    return attach_saved(build_model(arch, materialize=False), arrays, meta)
