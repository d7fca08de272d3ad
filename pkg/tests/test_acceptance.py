"""End-to-end acceptance checks.

Each test records a PASS/FAIL line through ``criterion``; conftest prints the
collected lines at the end of the session (they are also printed inline with -s).
"""

import json
import time
from contextlib import contextmanager
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from peftlab import ablate
from peftlab import tensor as T
from peftlab.allocator import rank_report, top_budget_mask
from peftlab.checkpoint import CheckpointError, dumps, loads
from peftlab.cli import main
from peftlab.config import load_config
from peftlab.gradcheck import finite_diff_check
from peftlab.peft import AdapterSpec, attach, count_trainable, merge
from peftlab.trainer import make_task, run_training
from peftlab.trainer.losses import composite_loss
from peftlab.transformer import PAD, ArchSpec, build_model, forward, get_preset

ROOT = Path(__file__).resolve().parent.parent
DESK = ROOT / "configs" / "desk.json"
ORACLE = ROOT / "configs" / "desk_oracle.json"
PEFT = ("lora", "alpha_lora", "adalora", "s2lora", "bitfit", "ia3", "glora")

RESULTS: dict[int, str] = {}


@contextmanager
def criterion(number: int, title: str, budget_s: float):
    notes: list[str] = []
    start = time.perf_counter()
    try:
        yield notes
        elapsed = time.perf_counter() - start
        if elapsed > budget_s:
            raise AssertionError(f"took {elapsed:.1f}s, budget {budget_s:.0f}s")
    except BaseException as exc:
        elapsed = time.perf_counter() - start
        line = f"[{number:2d}] FAIL {title} ({elapsed:.1f}s): {exc}".splitlines()[0]
        RESULTS[number] = line
        print(line)
        raise
    line = f"[{number:2d}] PASS {title} ({elapsed:.1f}s)" + (f": {'; '.join(notes)}" if notes else "")
    RESULTS[number] = line
    print(line)


def test_01_parameter_budget(capsys):
    expected = {"lora": "0.31%", "adalora": "0.46%", "alpha_lora": "0.31%", "s2lora": "0.02%", "ia3": "0.03%"}
    with criterion(1, "parameter-budget reproduction", 1.0) as notes:
        printed = {}
        for method in PEFT:
            capsys.readouterr()
            assert main(["params", "--arch", "whisper-medium-dims", "--method", method, "-v"]) == 0
            out = capsys.readouterr().out
            printed[method] = out.splitlines()[0]
            if method in ("bitfit", "glora"):
                assert "assumes:" in out, f"{method} assumptions not printed"
        pct = {m: float(line.split("(")[1].rstrip("%)")) for m, line in printed.items()}
        for method, want in expected.items():
            assert printed[method].endswith(f"({want})"), printed[method]
        assert abs(pct["bitfit"] - 0.08) <= 0.02 + 1e-9, printed["bitfit"]
        assert 0.60 <= pct["glora"] <= 1.00, printed["glora"]
        notes.append(", ".join(f"{m} {pct[m]:.2f}%" for m in PEFT))


def test_02_integer_counts():
    with criterion(2, "integer-count oracles", 10.0) as notes:
        arch = get_preset("whisper-medium-dims")
        d, n_attn = arch.d_model, 3 * 24
        q_v_sites = 2 * (n_attn // 2) * 2  # q and v in 72 attention modules
        assert q_v_sites == 144
        lora = q_v_sites * (d * 8 + 8 * d)
        adalora = q_v_sites * (d * 12 + 12 * d + 12)
        # five shared groups: 3 attention (d x d) pairs, 2 FFM pairs tied across fc1/fc2, plus s per site
        s2 = 3 * (d * 8 + 8 * d) + 2 * (arch.d_ffn * 8 + 8 * d) + 384 * 8
        assert (lora, adalora, s2) == (2_359_296, 3_540_672, 134_144)
        meta = build_model(arch, materialize=False)
        for method, want in (("lora", lora), ("adalora", adalora), ("s2lora", s2)):
            spec = AdapterSpec(method=method)
            assert count_trainable(spec, arch).count == want
            assert attach(meta, spec).trainable_count() == want
        notes.append(f"lora {lora}, adalora {adalora}, s2lora {s2}")


def test_03_zero_init_equivalence(toy):
    with criterion(3, "zero-init equivalence", 30.0) as notes:
        base = build_model(toy, seed=0)
        rng = np.random.default_rng(3)
        inputs = []
        for _ in range(50):
            s, t = int(rng.integers(1, 17)), int(rng.integers(1, 17))
            inputs.append((rng.integers(3, toy.vocab_size, s), rng.integers(3, toy.vocab_size, t)))
        refs = [forward(base, s, t).data for s, t in inputs]
        for method in PEFT:
            adapted = attach(base, AdapterSpec(method=method), seed=11)
            for (s, t), ref in zip(inputs, refs):
                assert np.array_equal(adapted.forward(s, t).data, ref), method
        notes.append("7 methods x 50 inputs bitwise equal")


def test_04_merge_equivalence(base_model):
    cfg = load_config(DESK)
    tcfg = replace(cfg.train, max_steps=200, epochs=4)
    task = cfg.task
    data = make_task(task, tcfg.seed)
    with criterion(4, "merge equivalence after 200 steps", 300.0) as notes:
        rng = np.random.default_rng(4)
        src = rng.integers(3, 35, (100, 12))
        tgt = rng.integers(3, 35, (100, 10))
        worst, moved = {}, {}
        for method in PEFT:
            spec = cfg.adapter.with_(method=method)
            adapted, run = run_training(base_model, spec, tcfg, task, data=data)
            assert len(run.losses) == 200, f"{method}: {len(run.losses)} steps"
            merged = merge(adapted)
            # the adapter must have moved away from the base for the check to mean anything
            moved[method] = max(float(np.max(np.abs(merged.params[n].data - p.data)))
                                for n, p in base_model.params.items())
            assert moved[method] > 1e-3, method
            worst[method] = float(np.max(np.abs(forward(merged, src, tgt).data - adapted.forward(src, tgt).data)))
        notes.append("max dev " + ", ".join(f"{m} {v:.1e}" for m, v in worst.items()))
        notes.append(f"smallest max weight change {min(moved.values()):.2e}")
        assert max(worst.values()) < 1e-6, worst


FOUR = ArchSpec(d_model=4, n_enc_layers=1, n_dec_layers=1, n_heads=2, d_ffn=4, vocab_size=12,
                max_src_len=8, max_tgt_len=8)
GRAD_SPECS = {
    "lora": AdapterSpec(method="lora", rank=2, target_roles=("q", "k", "v", "o", "fc1", "fc2")),
    "alpha_lora": AdapterSpec(method="alpha_lora", rank=2, target_roles=("q", "v", "fc1")),
    "adalora": AdapterSpec(method="adalora", rank=2, initial_rank=3, target_roles=("q", "v", "fc2")),
    "s2lora": AdapterSpec(method="s2lora", rank=2, alpha1=0.05, alpha2=0.1),
    "bitfit": AdapterSpec(method="bitfit", rank=2),
    "ia3": AdapterSpec(method="ia3", rank=2),
    "glora": AdapterSpec(method="glora", rank=2, target_roles=("q", "v", "fc1", "fc2")),
}


def _randomize(adapted, rng):
    ad = adapted.adapter
    for name, p in ad.trainable_parameters().items():
        if name.endswith("/s"):
            # keep every coefficient away from the L1 kink at zero
            value = np.sign(rng.standard_normal(p.shape)) * rng.uniform(0.1, 1.0, p.shape)
        elif name.startswith("adapter/ia3/"):
            value = 1.0 + rng.standard_normal(p.shape) * 0.3
        else:
            value = rng.standard_normal(p.shape) * 0.5
        p.data = np.array(value, dtype=np.float64)
    if hasattr(ad, "masks"):
        for site in ad.sites:
            ad.masks[site.name] = rng.random(ad.spec.adalora_initial) < 0.7


def test_05_gradient_correctness():
    with criterion(5, "composite-loss gradients vs central differences", 120.0) as notes:
        rng = np.random.default_rng(5)
        model = build_model(FOUR, seed=0, init_std=0.5)
        src = np.array([[3, 4, 5, 6], [7, 8, PAD, PAD]])
        tgt_in = np.array([[1, 9, 10], [1, 11, 3]])
        tgt_out = np.array([[9, 10, 2], [11, 3, 2]])
        worst = {}
        for method, spec in GRAD_SPECS.items():
            adapted = attach(model, spec, seed=0)
            params = list(adapted.trainable_parameters().values())
            assert params, method

            def loss(adapted=adapted):
                ce = T.cross_entropy(adapted.forward(src, tgt_in), tgt_out, ignore_index=PAD)
                return composite_loss(ce, adapted.adapter, orth_weight=0.1)[0]

            worst[method] = 0.0
            for _ in range(20):
                _randomize(adapted, rng)
                report = finite_diff_check(loss, params, tolerance=1e-4, max_coords=3, rng=rng)
                worst[method] = max(worst[method], report.worst)
                assert report.passed, f"{method}: {report}"
        notes.append("worst rel err " + ", ".join(f"{m} {v:.1e}" for m, v in worst.items()))


def test_06_allocator_budget_identity(base_model):
    cfg = load_config(DESK)
    tcfg = replace(cfg.train, epochs=3)
    with criterion(6, "allocator budget identity and dominance", 120.0) as notes:
        spec = cfg.adapter.with_(method="adalora")
        assert (spec.adalora_initial, spec.adalora_target) == (12, 8)
        events = []

        def check(step, info):
            flat = info.scores.reshape(-1)
            # independent oracle: full sort with (score desc, position asc)
            order = sorted(range(flat.size), key=lambda i: (-flat[i], i))
            oracle = np.zeros(flat.size, dtype=bool)
            oracle[order[: info.budget]] = True
            events.append((step, info.budget, int(info.keep.sum()), bool(np.array_equal(info.keep.reshape(-1), oracle)),
                           info.dominates))

        adapted, run = run_training(base_model, spec, tcfg, cfg.task, on_reallocate=check)
        ad = adapted.adapter
        target = 8 * len(ad.sites)
        assert events, "no reallocation happened"
        assert all(kept == budget for _, budget, kept, _, _ in events)
        assert all(same for *_, same, _ in events), "retained set differs from full-sort oracle"
        assert all(dom for *_, dom in events), "a masked triplet outscored a retained one"
        assert events[-1][1] == target
        assert sum(ad.active_rank(s) for s in ad.sites) == target
        assert rank_report(ad).total() == target
        assert top_budget_mask(np.array([0.9, 0.1, 0.5]), 2).tolist() == [True, False, True]
        notes.append(f"{len(events)} reallocations, final budget {target} = 8 x {len(ad.sites)} sites")


def test_07_sparsity_direction(base_model):
    cfg = load_config(DESK)
    data = make_task(cfg.task, cfg.train.seed)
    with criterion(7, "sparsity direction (alpha1 0.05 vs 0)", 300.0) as notes:
        fracs = {}
        for a1 in (0.05, 0.0):
            spec = cfg.adapter.with_(method="s2lora", alpha1=a1, alpha2=0.1)
            adapted, _ = run_training(base_model, spec, cfg.train, cfg.task, data=data)
            s = np.concatenate([p.data.ravel() for p in adapted.adapter.coefficients().values()])
            fracs[a1] = float(np.mean(np.abs(s) < 1e-4))
        notes.append(f"fraction |s|<1e-4: alpha1=0.05 -> {fracs[0.05]:.3f}, alpha1=0 -> {fracs[0.0]:.3f}")
        assert fracs[0.05] > fracs[0.0], fracs


def test_08_adaptation_direction(base_model):
    cfg = load_config(DESK)
    oracle = json.loads(ORACLE.read_text())
    floor = oracle["floor_relative_reduction"]
    data = make_task(cfg.task, cfg.train.seed)
    with criterion(8, "adaptation direction on the remap task", 900.0) as notes:
        observed = {}
        baseline = None
        for method in PEFT:
            _, run = run_training(base_model, cfg.adapter.with_(method=method), cfg.train, cfg.task, data=data,
                                  eval_before=method == PEFT[0])
            if baseline is None:
                baseline = run.metrics["in_domain_ter_before"]
            observed[method] = run.metrics["in_domain_ter"]
        rel = {m: (baseline - v) / baseline for m, v in observed.items()}
        notes.append(f"baseline {baseline:.4f}; " + ", ".join(f"{m} {observed[m]:.4f} ({rel[m]:.0%})" for m in PEFT))
        recorded = oracle["observed_in_domain_ter"]
        drift = max(abs(observed[m] - recorded[m]) for m in PEFT)
        notes.append(f"max drift from the recorded oracle run {drift:.1e}")
        weak = {m: r for m, r in rel.items() if r < floor}
        assert not weak, f"below the {floor:.0%} floor: {weak}"


@pytest.mark.slow
def test_09_ablation_grid(base_ckpt, tmp_path):
    with criterion(9, "table1 ablation grid shape and rerun determinism", 3600.0) as notes:
        outs = []
        for name in ("first", "second"):
            out = tmp_path / name
            assert main(["ablate", "--base", str(base_ckpt), "--grid", "table1", "--out", str(out)]) == 0
            outs.append(out)
        cells = sorted(p.name for p in (outs[0] / "cells").glob("*.json"))
        assert len(cells) == 18, cells
        expected = {f"{v}_r{r}.json" for v in ablate.TABLE1_VARIANTS for r in (1, 8, 32)}
        assert set(cells) == expected
        summary = (outs[0] / "summary.csv").read_text().splitlines()
        assert len(summary) == 2 + 6 and all("failed" not in row for row in summary)
        r32 = json.loads((outs[0] / "cells" / "adalora_r32.json").read_text())
        assert r32["initial_rank"] == 48
        assert json.loads((outs[0] / "cells" / "adalora_r8.json").read_text())["initial_rank"] == 12
        for rel in ["summary.csv"] + [f"cells/{c}" for c in cells]:
            assert (outs[0] / rel).read_bytes() == (outs[1] / rel).read_bytes(), rel
        notes.append("18 cells, adalora r=32 starts at 48, reruns byte-identical")


def test_10_checkpoint_roundtrip():
    with criterion(10, "checkpoint round-trip and CRC", 10.0) as notes:
        rng = np.random.default_rng(10)
        arrays = {
            "adapter/s2lora/Enc-SAM/B": rng.standard_normal((64, 8)),
            "adapter/s2lora/enc.0.sam.q/s": rng.standard_normal(8).astype(np.float32),
            "edge": np.array([np.nan, np.inf, -0.0, 5e-324, 1.17549435e-38], dtype=np.float64),
            "edge32": np.array([np.nan, -np.inf, 1e-45], dtype=np.float32),
        }
        blob = dumps(arrays)
        back = loads(blob)
        for k, v in arrays.items():
            assert back[k].dtype == v.dtype and back[k].tobytes() == v.tobytes(), k
        undetected = 0
        for i in range(len(blob)):
            for flip in (0x01, 0x80, 0xFF):
                bad = bytearray(blob)
                bad[i] ^= flip
                try:
                    loads(bytes(bad))
                    undetected += 1
                except CheckpointError:
                    pass
        assert undetected == 0
        notes.append(f"{len(blob)} bytes x 3 flips, all corruptions detected")
