import struct
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from peftlab import artifacts, checkpoint
from peftlab.checkpoint import CheckpointError, dumps, loads
from peftlab.peft import AdapterSpec, attach
from peftlab.transformer import ArchSpec, build_model, forward


def test_roundtrip_is_bitwise(rng):
    arrays = {
        "a": rng.standard_normal((3, 4)),
        "b": rng.standard_normal(7).astype(np.float32),
        "scalar": np.array(np.pi),
        "empty": np.zeros((0, 5)),
        "special": np.array([np.inf, -np.inf, -0.0, 5e-324]),
    }
    back = loads(dumps(arrays))
    assert list(back) == list(arrays)
    for k, v in arrays.items():
        assert back[k].dtype == v.dtype and back[k].shape == v.shape
        assert back[k].tobytes() == v.tobytes()


def test_header_layout():
    blob = dumps({"x": np.array([1.0, 2.0], dtype=np.float32)})
    assert blob[:4] == b"S2LR"
    assert struct.unpack_from("<HI", blob, 4) == (1, 1)
    assert struct.unpack_from("<H", blob, 10) == (1,)
    assert blob[12:13] == b"x"
    assert struct.unpack_from("<BBI", blob, 13) == (1, 1, 2)
    assert struct.unpack("<I", blob[-4:])[0] == zlib.crc32(blob[:-4])


def test_every_single_byte_corruption_is_detected(rng):
    blob = dumps({"w": rng.standard_normal((2, 3)), "adapter/lora/x/B": rng.standard_normal(4).astype(np.float32)})
    for i in range(len(blob)):
        bad = bytearray(blob)
        bad[i] ^= 0xFF
        with pytest.raises(CheckpointError):
            loads(bytes(bad))


def test_truncation_detected(rng):
    blob = dumps({"w": rng.standard_normal(5)})
    with pytest.raises(CheckpointError):
        loads(blob[:-1])
    with pytest.raises(CheckpointError):
        loads(b"S2LR")


def test_unsupported_dtype():
    with pytest.raises(CheckpointError, match="dtype"):
        dumps({"i": np.arange(3)})


@settings(max_examples=40, deadline=None)
@given(
    shapes=st.lists(st.lists(st.integers(0, 5), max_size=3), min_size=1, max_size=4),
    f32=st.booleans(),
    seed=st.integers(0, 2**16),
)
def test_roundtrip_random(shapes, f32, seed):
    r = np.random.default_rng(seed)
    dtype = np.float32 if f32 else np.float64
    arrays = {f"t{i}": r.standard_normal(s).astype(dtype) for i, s in enumerate(shapes)}
    back = loads(dumps(arrays))
    assert all(back[k].tobytes() == v.tobytes() and back[k].shape == v.shape for k, v in arrays.items())


def test_meta_and_file_io(tmp_path):
    path = tmp_path / "m.ckpt"
    checkpoint.save(path, {"a": np.ones(2)}, {"kind": "x", "n": [1, 2], "name": "héllo"})
    arrays, meta = checkpoint.load(path)
    assert meta == {"kind": "x", "n": [1, 2], "name": "héllo"}
    assert list(arrays) == ["a"]
    assert [p.name for p in tmp_path.iterdir()] == ["m.ckpt"]


def test_atomic_write_needs_directory(tmp_path):
    with pytest.raises(FileNotFoundError):
        checkpoint.atomic_write(tmp_path / "missing" / "f", b"x")


def test_base_and_adapter_roundtrip(tmp_path, toy, rng):
    model = build_model(toy, seed=0)
    artifacts.save_base(tmp_path / "base.ckpt", model)
    loaded, meta = artifacts.load_base(tmp_path / "base.ckpt")
    assert meta["arch_hash"] == artifacts.arch_hash(toy)
    src, tgt = rng.integers(3, 64, (2, 5)), rng.integers(3, 64, (2, 4))
    assert np.array_equal(forward(loaded, src, tgt).data, forward(model, src, tgt).data)

    adapted = attach(model, AdapterSpec(method="adalora"), seed=0)
    for p in adapted.trainable_parameters().values():
        p.data = p.data + rng.standard_normal(p.shape) * 0.05
    adapted.adapter.masks[adapted.adapter.sites[0].name][3] = False
    artifacts.save_adapter(tmp_path / "ad.ckpt", adapted, seed=0)
    arrays, ameta = artifacts.read_adapter(tmp_path / "ad.ckpt")
    assert all(n.startswith("adapter/adalora/") for n in arrays)
    again = artifacts.attach_saved(loaded, arrays, ameta)
    assert np.array_equal(again.forward(src, tgt).data, adapted.forward(src, tgt).data)


def test_adapter_rejects_other_arch(tmp_path, toy):
    adapted = attach(build_model(toy, seed=0), AdapterSpec())
    artifacts.save_adapter(tmp_path / "ad.ckpt", adapted, seed=0)
    other = build_model(ArchSpec(d_model=32, n_heads=4, d_ffn=64), seed=0)
    arrays, meta = artifacts.read_adapter(tmp_path / "ad.ckpt")
    with pytest.raises(CheckpointError, match="arch"):
        artifacts.attach_saved(other, arrays, meta)


def test_load_base_rejects_adapter_file(tmp_path, toy):
    artifacts.save_adapter(tmp_path / "ad.ckpt", attach(build_model(toy, seed=0), AdapterSpec()), seed=0)
    with pytest.raises(CheckpointError, match="base"):
        artifacts.load_base(tmp_path / "ad.ckpt")
