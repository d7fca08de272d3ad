import numpy as np
import pytest

from peftlab import tensor as T
from peftlab.peft import (
    METHODS,
    AdapterSpec,
    AdapterSpecError,
    attach,
    count_trainable,
    delta_adalora,
    delta_alpha_lora,
    delta_lora,
    delta_s2lora,
    merge,
)
from peftlab.tensor import Tensor
from peftlab.transformer import ModuleGroup, Role, build_model, forward, get_preset

PEFT = [m for m in METHODS if m != "full_ft"]


def t(x):
    return Tensor(np.asarray(x, dtype=np.float64))


def random_batch(rng, arch, n=4, length=6):
    return rng.integers(3, arch.vocab_size, (n, length)), rng.integers(3, arch.vocab_size, (n, length))


def test_delta_examples(rng):
    assert np.array_equal(delta_lora(t(np.zeros((4, 2))), t(rng.standard_normal((2, 4)))).data, np.zeros((4, 4)))
    assert delta_lora(t([[2.0]]), t([[3.0]])).data.tolist() == [[6.0]]
    B, A = rng.standard_normal((4, 2)), rng.standard_normal((2, 4))
    np.testing.assert_array_equal(delta_lora(t(B), t(A)).data, B @ A)

    assert not delta_alpha_lora(t(0.0), t(B), t(A)).data.any()
    np.testing.assert_array_equal(delta_alpha_lora(t(1.0), t(B), t(A)).data, B @ A)
    assert delta_alpha_lora(t(2.0), t([[1.0]]), t([[3.0]])).data.tolist() == [[6.0]]

    assert not delta_adalora(t(B), t(np.zeros(2)), t(A), np.ones(2, bool)).data.any()
    assert not delta_adalora(t(B), t([4.0, 5.0]), t(A), np.zeros(2, bool)).data.any()
    eye = np.eye(2)
    assert delta_adalora(t(eye), t([3.0, 5.0]), t(eye), np.ones(2, bool)).data.tolist() == [[3, 0], [0, 5]]

    assert not delta_s2lora(t(B), t(np.zeros(2)), t(A)).data.any()
    assert delta_s2lora(t(eye), t([3.0, 5.0]), t(eye)).data.tolist() == [[3, 0], [0, 5]]
    s1, s2 = np.array([1.0, -2.0]), np.array([0.5, 3.0])
    d1 = delta_s2lora(t(B), t(s1), t(A)).data
    np.testing.assert_allclose(d1, B @ np.diag(s1) @ A, rtol=1e-14)
    assert not np.allclose(d1, delta_s2lora(t(B), t(s2), t(A)).data)


def test_masked_triplets_get_no_lambda_gradient(rng):
    lam = Tensor(rng.standard_normal(3), requires_grad=True)
    B, A = t(rng.standard_normal((4, 3))), t(rng.standard_normal((3, 4)))
    mask = np.array([True, False, True])
    (delta_adalora(B, lam, A, mask) ** 2).sum().backward()
    assert lam.grad[1] == 0.0 and lam.grad[0] != 0.0


@pytest.mark.parametrize("method", METHODS)
def test_zero_init_is_bitwise_identity(method, toy, rng):
    base = build_model(toy, seed=0)
    src, tgt = random_batch(rng, toy)
    ref = forward(base, src, tgt).data
    adapted = attach(base, AdapterSpec(method=method), seed=1)
    assert np.array_equal(adapted.forward(src, tgt).data, ref)
    merged = merge(adapted)
    for name, p in base.params.items():
        assert np.array_equal(merged.params[name].data, p.data), name


@pytest.mark.parametrize("method", METHODS)
def test_count_matches_runtime_census(method, toy):
    spec = AdapterSpec(method=method)
    adapted = attach(build_model(toy, seed=0), spec)
    assert count_trainable(spec, toy).count == adapted.trainable_count()


@pytest.mark.parametrize("spec", [
    AdapterSpec(method="s2lora", ffm_sharing="per_shape"),
    AdapterSpec(method="adalora", rank=32),
    AdapterSpec(method="glora", glora_factors="BE"),
    AdapterSpec(method="lora", rank=2, target_roles=("k", "o", "fc1")),
])
def test_count_matches_runtime_census_variants(spec, toy):
    adapted = attach(build_model(toy, seed=0), spec)
    assert count_trainable(spec, toy).count == adapted.trainable_count()


def test_table2_counts_whisper_dims():
    arch = get_preset("whisper-medium-dims")
    assert count_trainable(AdapterSpec(method="lora"), arch).count == 144 * (1024 * 8 + 8 * 1024) == 2_359_296
    assert count_trainable(AdapterSpec(method="adalora"), arch).count == 144 * (1024 * 12 * 2 + 12) == 3_540_672
    assert count_trainable(AdapterSpec(method="s2lora"), arch).count == 3 * 16_384 + 2 * 40_960 + 384 * 8


def test_full_ft_fraction_is_one(toy):
    c = count_trainable(AdapterSpec(method="full_ft"), toy)
    assert c.fraction == 1.0 and c.percent == "100.00%"


def test_freeze_under_peft_and_not_under_full_ft(toy, rng):
    src, tgt = random_batch(rng, toy)
    for method in ("lora", "full_ft"):
        model = build_model(toy, seed=0)
        adapted = attach(model, AdapterSpec(method=method))
        T.cross_entropy(adapted.forward(src, tgt), tgt).backward()
        base_grads = [p.grad for p in model.params.values()]
        if method == "full_ft":
            assert all(g is not None for g in base_grads)
        else:
            assert all(g is None for g in base_grads)
            assert all(p.grad is not None for p in adapted.trainable_parameters().values())


def test_s2lora_store_layout(toy_model):
    ad = attach(toy_model, AdapterSpec(method="s2lora")).adapter
    groups = {k[0] for k in ad.store}
    assert groups == set(ModuleGroup)
    assert sum(1 for k in ad.store if k[0] is ModuleGroup.ENC_FFM) == 1
    assert len(ad.store) == 5
    per_shape = attach(toy_model, AdapterSpec(method="s2lora", ffm_sharing="per_shape")).adapter
    assert sum(1 for k in per_shape.store if k[0] is ModuleGroup.DEC_FFM) == 2
    fc1 = toy_model.site("enc.0.ffm.fc1")
    fc2 = toy_model.site("enc.1.ffm.fc2")
    B, A = ad.basis(fc1)
    B2, A2 = ad.basis(fc2)
    assert np.array_equal(B2.data, A.data.T) and np.array_equal(A2.data, B.data.T)


def test_adalora_initial_state(toy_model):
    ad = attach(toy_model, AdapterSpec(method="adalora")).adapter
    assert all(ad.active_rank(s) == 12 for s in ad.sites)
    assert attach(toy_model, AdapterSpec(method="adalora", rank=32)).spec.adalora_initial == 48


def test_ia3_targets(toy_model):
    ad = attach(toy_model, AdapterSpec(method="ia3")).adapter
    assert {s.role for s in ad.sites} == {Role.K, Role.V, Role.FC2}
    assert all(np.array_equal(p.data, np.ones_like(p.data)) for p in ad.params.values())


def test_glora_reduces_to_lora(toy, rng):
    model = build_model(toy, seed=0)
    src, tgt = random_batch(rng, toy)
    glora = attach(model, AdapterSpec(method="glora", glora_factors="B"))
    lora = attach(model.clone(), AdapterSpec(method="lora"))
    for site in lora.adapter.sites:
        B = rng.standard_normal((site.d_out, 8)) * 0.1
        A = rng.standard_normal((8, site.d_in)) * 0.1
        glora.adapter.get(site.name, "B_down").data = B
        glora.adapter.get(site.name, "B_up").data = A
        lora.adapter.get(site.name, "B").data = B.copy()
        lora.adapter.get(site.name, "A").data = A.copy()
    np.testing.assert_array_equal(glora.forward(src, tgt).data, lora.forward(src, tgt).data)


def test_glora_e_only_matches_bitfit_on_targeted_sites(toy_model):
    glora = attach(toy_model, AdapterSpec(method="glora", glora_factors="E")).adapter
    shapes = {n.split("/")[2]: p.shape for n, p in glora.params.items()}
    bitfit = attach(toy_model, AdapterSpec(method="bitfit")).adapter
    bit_shapes = {n.split("/")[2]: p.shape for n, p in bitfit.params.items()}
    targeted = {s.name for s in glora.sites}
    assert shapes == {k: v for k, v in bit_shapes.items() if k in targeted}


@pytest.mark.parametrize("method", PEFT)
def test_merge_after_perturbation(method, toy, rng):
    model = build_model(toy, seed=0)
    adapted = attach(model, AdapterSpec(method=method), seed=2)
    for p in adapted.trainable_parameters().values():
        p.data = p.data + rng.standard_normal(p.shape) * 0.05
    src, tgt = random_batch(rng, toy, n=6)
    merged = merge(adapted)
    dev = np.max(np.abs(forward(merged, src, tgt).data - adapted.forward(src, tgt).data))
    assert dev < 1e-6


def test_spec_validation(toy):
    with pytest.raises(AdapterSpecError, match="positive"):
        AdapterSpec(rank=0).validate()
    with pytest.raises(AdapterSpecError, match="min dimension"):
        AdapterSpec(rank=64).validate(toy)
    with pytest.raises(AdapterSpecError, match="unknown method"):
        AdapterSpec(method="prefix").validate()
    with pytest.raises(AdapterSpecError, match="initial_rank"):
        AdapterSpec(method="adalora", initial_rank=4, target_rank=8).validate()
    with pytest.raises(AdapterSpecError):
        AdapterSpec(method="ia3", target_roles=("q",)).validate()


def test_spec_roundtrip():
    spec = AdapterSpec(method="s2lora", target_roles=("q", "v"), alpha1=0.1)
    assert AdapterSpec.from_dict(spec.to_dict()) == spec
    assert set(AdapterSpec(method="s2lora").roles) == set(Role)
    assert set(AdapterSpec(method="lora").roles) == {Role.Q, Role.V}


def test_adapter_params_are_namespaced(toy_model):
    for method in PEFT:
        ad = attach(toy_model, AdapterSpec(method=method)).adapter
        assert all(n.startswith(f"adapter/{method}/") for n in ad.state_dict())
