import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mteeg import tensor as T
from mteeg.adapters import (
    StateError,
    TaskError,
    adapter_param_count,
    adapted_linear,
    attach,
    count_trainable_params,
    forward_dc,
    forward_rt,
    forward_sp,
    head_param_count,
    init_adapters,
    make_adapter_set,
    merged_weight,
    router_weights,
)
from mteeg.backbone import BackboneConfig, encoder_forward, init_backbone, linear_layer_names
from mteeg.model import ModelState, TaskSpec, build_model
from mteeg.tensor import Parameter, Tensor

from conftest import randomize_adapters


def layer(rng, m, n):
    return Parameter(rng.standard_normal((m, n)), "w", frozen=True), Parameter(rng.standard_normal(m), "b", frozen=True)


def random_set(variant, m, n, r, p, seed, s=None):
    aset = init_adapters(make_adapter_set(variant, "l", m, n, r, p, s), seed)
    rng = np.random.default_rng(seed + 1)
    for prm in aset.parameters():
        prm.data[...] = rng.normal(0, 0.3, prm.shape)
    return aset


# init / structure


@pytest.mark.parametrize("variant", ["sp", "rt", "dc"])
def test_init_zero_b_and_deterministic(variant):
    a = init_adapters(make_adapter_set(variant, "l", 16, 12, 4, 3), seed=7)
    b = init_adapters(make_adapter_set(variant, "l", 16, 12, 4, 3), seed=7)
    ups = [p.B for p in a.pairs] + a.ups
    assert all(not u.data.any() for u in ups)
    for x, y in zip(a.parameters(), b.parameters()):
        assert x.name == y.name
        np.testing.assert_array_equal(x.data, y.data)
    downs = np.concatenate([p.A.data.ravel() for p in a.pairs] + ([a.down.data.ravel()] if a.down is not None else []))
    assert 0.01 < downs.std() < 0.03
    if variant == "rt":
        assert not a.router.bias.data.any() and a.router.weight.data.std() > 0


def test_rank_bounds():
    with pytest.raises(ValueError):
        make_adapter_set("sp", "l", 4, 6, 5, 2)
    with pytest.raises(ValueError):
        make_adapter_set("sp", "l", 4, 6, 0, 2)
    with pytest.raises(ValueError):
        make_adapter_set("xx", "l", 4, 6, 2, 2)


def test_attach_counts_and_errors():
    cfg = BackboneConfig()
    tasks = [TaskSpec(1, "a", 2), TaskSpec(2, "b", 3)]
    m = ModelState(init_backbone(cfg), tasks)
    attach(m, "dc", r=8, locations="both")
    assert len(m.adapters) == 24
    with pytest.raises(StateError):
        attach(m, "dc")
    m2 = ModelState(init_backbone(cfg), tasks)
    attach(m2, "sp", locations="mhsa")
    assert len(m2.adapters) == 16
    assert not any(".ffn." in k for k in m2.adapters)
    hot = ModelState(init_backbone(cfg, frozen=False), tasks)
    with pytest.raises(StateError):
        attach(hot, "sp")


def test_mhsa_only_leaves_ffn_untouched(small_cfg, rng):
    tasks = [TaskSpec(1, "a", 2), TaskSpec(2, "b", 3)]
    m = randomize_adapters(build_model(small_cfg, tasks, "sp", r=2, locations="mhsa"), seed=3)
    x = Tensor(rng.standard_normal((2, 5, small_cfg.d)))
    for name in linear_layer_names(small_cfg, "ffn"):
        w, b = m.backbone.linear(name)
        if w.shape[1] != small_cfg.d:
            continue
        out = adapted_linear(x, w, b, m.adapters.get(name), 1)
        np.testing.assert_array_equal(out.data, adapted_linear(x, w, b, None).data)


# forwards


@pytest.mark.parametrize("variant", ["sp", "dc"])
def test_zero_b_is_backbone(variant, rng):
    w0, b0 = layer(rng, 6, 5)
    aset = init_adapters(make_adapter_set(variant, "l", 6, 5, 2, 3), 0)
    x = rng.standard_normal((4, 5))
    fwd = forward_sp if variant == "sp" else forward_dc
    np.testing.assert_array_equal(fwd(x, (w0, b0), aset, 2).data, x @ w0.data.T + b0.data)


@given(st.sampled_from(["sp", "dc"]), st.integers(1, 4), st.integers(1, 4), st.integers(0, 2**32 - 1))
def test_factored_equals_merged(variant, p_tasks, task, seed):
    task = min(task, p_tasks)
    r = np.random.default_rng(seed)
    m, n = int(r.integers(2, 12)), int(r.integers(2, 12))
    rank = int(r.integers(1, min(m, n) + 1))
    w0, b0 = layer(r, m, n)
    aset = random_set(variant, m, n, rank, p_tasks, int(r.integers(1 << 30)))
    x = r.standard_normal((3, n))
    fwd = forward_sp if variant == "sp" else forward_dc
    merged = x @ merged_weight(w0, aset, task).T + b0.data
    np.testing.assert_allclose(fwd(x, (w0, b0), aset, task).data, merged, atol=1e-9)


def test_task_range(rng):
    w0, b0 = layer(rng, 4, 4)
    for variant, fwd in (("sp", forward_sp), ("dc", forward_dc)):
        aset = init_adapters(make_adapter_set(variant, "l", 4, 4, 2, 3), 0)
        for bad in (0, 4, None):
            with pytest.raises(TaskError):
                fwd(np.ones(4), (w0, b0), aset, bad)


def test_sp_backward_isolated(rng):
    w0, b0 = layer(rng, 5, 4)
    aset = random_set("sp", 5, 4, 2, 3, 11)
    reached = T.sum_(forward_sp(rng.standard_normal((3, 4)), (w0, b0), aset, 2)).backward()
    assert reached == {aset.pairs[1].A, aset.pairs[1].B}
    for q in (0, 2):
        assert not aset.pairs[q].A.grad.any() and not aset.pairs[q].B.grad.any()


def test_dc_backward_structure(rng):
    w0, b0 = layer(rng, 5, 4)
    aset = random_set("dc", 5, 4, 2, 3, 12)
    T.sum_(forward_dc(rng.standard_normal((3, 4)), (w0, b0), aset, 3)).backward()
    assert aset.down.grad.any() and aset.ups[2].grad.any()
    assert not aset.ups[0].grad.any() and not aset.ups[1].grad.any()


def test_rt_hand_mixture(rng):
    # S=2, m=n=2, r=1, fixed omega = (0.25, 0.75)
    w0 = Parameter(np.eye(2), "w", frozen=True)
    b0 = Parameter(np.array([0.5, -0.5]), "b", frozen=True)
    aset = make_adapter_set("rt", "l", 2, 2, 1, 2)
    aset.pairs[0].A.data[...] = [[1.0, 0.0]]
    aset.pairs[0].B.data[...] = [[2.0], [0.0]]
    aset.pairs[1].A.data[...] = [[0.0, 1.0]]
    aset.pairs[1].B.data[...] = [[0.0], [4.0]]
    x = np.array([[1.0, 2.0]])
    # W0 x + b0 = [1.5, 1.5]; expert 1: [2, 0]; expert 2: [0, 8]
    expect = [[1.5 + 0.25 * 2.0, 1.5 + 0.75 * 8.0]]
    np.testing.assert_allclose(forward_rt(x, (w0, b0), aset, omega=[0.25, 0.75]).data, expect, atol=1e-15)


def test_rt_one_hot_equals_sp_pair(rng):
    w0, b0 = layer(rng, 6, 5)
    aset = random_set("rt", 6, 5, 3, 3, 5)
    sp = make_adapter_set("sp", "l", 6, 5, 3, 3)
    for src, dst in zip(aset.pairs, sp.pairs):
        dst.A.data[...] = src.A.data
        dst.B.data[...] = src.B.data
    x = rng.standard_normal((2, 7, 5))
    for i in range(3):
        onehot = np.eye(3)[i]
        np.testing.assert_allclose(forward_rt(x, (w0, b0), aset, onehot).data, forward_sp(x, (w0, b0), sp, i + 1).data,
                                   atol=1e-12)


def test_rt_zero_b_is_backbone(rng):
    w0, b0 = layer(rng, 6, 5)
    aset = init_adapters(make_adapter_set("rt", "l", 6, 5, 2, 4), 1)
    x = rng.standard_normal((3, 8, 5))
    np.testing.assert_allclose(forward_rt(x, (w0, b0), aset).data, x @ w0.data.T + b0.data, atol=1e-15)


@given(st.integers(0, 2**32 - 1))
def test_router_weights_simplex(seed):
    r = np.random.default_rng(seed)
    aset = random_set("rt", 4, 6, 2, 3, int(r.integers(1 << 30)))
    w = router_weights(r.standard_normal((5, 9, 6)) * 10, aset).data
    assert w.shape == (5, 3) and np.all(w > 0)
    np.testing.assert_allclose(w.sum(1), 1.0, atol=1e-6)


def test_rt_router_is_per_sample(rng):
    w0, b0 = layer(rng, 4, 4)
    aset = random_set("rt", 4, 4, 2, 2, 8)
    x = rng.standard_normal((2, 3, 4))
    both = forward_rt(x, (w0, b0), aset).data
    np.testing.assert_allclose(both[1], forward_rt(x[1:], (w0, b0), aset).data[0], atol=1e-14)


def test_rt_merged_with_fixed_omega(rng):
    w0, b0 = layer(rng, 7, 5)
    aset = random_set("rt", 7, 5, 2, 3, 9)
    omega = np.array([0.2, 0.5, 0.3])
    x = rng.standard_normal((4, 5))
    merged = x @ merged_weight(w0, aset, omega=omega).T + b0.data
    np.testing.assert_allclose(forward_rt(x, (w0, b0), aset, omega).data, merged, atol=1e-8)


# parameter counts


def test_count_examples():
    assert adapter_param_count("sp", 64, 64, 8, 6) == 6144
    assert adapter_param_count("dc", 64, 64, 8, 6) == 3584
    assert adapter_param_count("dc", 64, 64, 8, 6) * 12 == adapter_param_count("sp", 64, 64, 8, 6) * 7
    assert adapter_param_count("rt", 64, 64, 8, 6) == 6144 + 6 * 65


def test_single_task_sp_scales_linearly():
    # a single-task LoRA model (0.3M in the reference table) grows exactly P-fold under SP
    cfg = BackboneConfig()
    one = build_model(cfg, [TaskSpec(1, "a", 2)], "sp", r=8)
    six = build_model(cfg, [TaskSpec(i, f"t{i}", 2) for i in range(1, 7)], "sp", r=8)
    adapters = lambda m: sum(p.data.size for p in m.adapter_parameters())
    assert adapters(six) == 6 * adapters(one)


@pytest.mark.parametrize("variant", ["sp", "rt", "dc", "hps"])
@pytest.mark.parametrize("locations", ["mhsa", "ffn", "both"])
def test_closed_form_matches_tensor_sizes(variant, locations, three_tasks):
    cfg = BackboneConfig(d=16, heads=2, layers=2, patch_len=32)
    m = build_model(cfg, three_tasks, variant, r=4, locations=locations)
    actual = sum(p.data.size for p in m.trainable())
    assert count_trainable_params(m) == actual
    heads = head_param_count(three_tasks, 16)
    assert heads == 17 * (1 + 5 + 3)


# gradients through the encoder


@pytest.mark.parametrize("variant", ["sp", "rt", "dc"])
def test_encoder_grad_check_all_adapter_params(variant, tiny_cfg, rng):
    tasks = [TaskSpec(1, "a", 2), TaskSpec(2, "b", 3)]
    m = randomize_adapters(build_model(tiny_cfg, tasks, variant, r=2, seed=1), seed=2)
    x = rng.standard_normal((2, 2, 1, tiny_cfg.patch_len))
    names = ["S0", "S1"]
    coef = Tensor(rng.standard_normal((2, 2, tiny_cfg.d)))
    params = m.adapter_parameters()

    def f():
        return T.sum_(T.mul(encoder_forward(m.backbone, (x, names), m.adapters, 2), coef))

    assert T.grad_check(f, params, h=1e-5) <= 1e-4
