import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mteeg import diagnostics as D
from mteeg.backbone import encoder_forward, pool_features
from mteeg.diagnostics import GradientSnapshot, ScopeError
from mteeg.model import build_model

from conftest import randomize_adapters

NAMES = ["S0", "S1"]


def snap(task, vec, layout=None):
    vec = np.asarray(vec, dtype=float)
    return GradientSnapshot(task, vec, layout or [("w", 0, vec.size)])


def grads(model, task, rng, cfg, scope="union", k=2):
    x = rng.standard_normal((4, 2, 2, cfg.patch_len))
    return D.capture_gradients(model, task, x, np.arange(4) % k, NAMES, scope)


# cosine matrix


def test_cosine_hand_examples():
    assert D.gradient_cosine_matrix([snap(1, [1, 1]), snap(2, [1, -1])])[0, 1] == 0.0
    assert D.gradient_cosine_matrix([snap(1, [1, 0]), snap(2, [-1, 0])])[0, 1] == -1.0
    m = D.gradient_cosine_matrix([snap(1, [0.3, 2.0]), snap(2, [0.3, 2.0]), snap(3, [0, 0])])
    assert m[0, 1] == 1.0 and m[0, 0] == 1.0
    assert np.isnan(m[2]).all() and np.isnan(m[:, 2]).all()


def test_orthogonal_one_hot():
    m = D.gradient_cosine_matrix([snap(i, np.eye(4)[i]) for i in range(4)])
    np.testing.assert_array_equal(m, np.eye(4))


def test_cosine_errors():
    with pytest.raises(ScopeError):
        D.gradient_cosine_matrix([snap(1, [1.0])])
    with pytest.raises(ScopeError):
        D.gradient_cosine_matrix([snap(1, [1.0, 2.0]), snap(2, [1.0, 2.0], [("v", 0, 2)])])


@given(st.integers(2, 5), st.integers(1, 30), st.floats(1e-3, 1e3), st.integers(0, 2**32 - 1))
def test_cosine_symmetric_bounded_and_scale_invariant(p, n, scale, seed):
    r = np.random.default_rng(seed)
    snaps = [snap(i, r.standard_normal(n)) for i in range(p)]
    m = D.gradient_cosine_matrix(snaps)
    np.testing.assert_array_equal(m, m.T)
    assert np.all(np.abs(m) <= 1.0) and np.all(np.diag(m) == 1.0)
    scaled = D.gradient_cosine_matrix([snap(s.task, s.vector * scale) for s in snaps])
    np.testing.assert_allclose(scaled, m, atol=1e-12)


# magnitudes


def test_magnitude_examples():
    (st0,) = D.gradient_magnitude_stats([snap(1, [3.0, 4.0], [("blocks.0.a", 0, 1), ("blocks.1.a", 1, 2)])])
    assert st0["l2_norm"] == 5.0
    assert st0["layer_norms"] == {"blocks.0": 3.0, "blocks.1": 4.0}
    (z,) = D.gradient_magnitude_stats([snap(2, np.zeros(7))], bins=5)
    assert z["l2_norm"] == 0.0
    assert z["hist_counts"].tolist() == [7, 0, 0, 0, 0, 0, 0]


@given(st.integers(1, 60), st.integers(1, 40), st.integers(0, 2**32 - 1))
def test_magnitude_layers_and_counts(n, bins, seed):
    r = np.random.default_rng(seed)
    v = r.standard_normal(n) * 10.0 ** r.uniform(-14, 4, n)
    cut = int(r.integers(0, n + 1))
    layout = [("blocks.0.x", 0, cut), ("head.1.w", cut, n)]
    (s,) = D.gradient_magnitude_stats([snap(1, v, layout)], bins=bins)
    assert s["hist_counts"].sum() == n and len(s["hist_counts"]) == bins + 2
    assert math.isclose(sum(x * x for x in s["layer_norms"].values()), s["l2_norm"] ** 2, rel_tol=1e-12, abs_tol=1e-300)


# captured gradients


def test_sp_union_cross_task_cosine_is_exactly_zero(small_cfg, three_tasks, rng):
    m = randomize_adapters(build_model(small_cfg, three_tasks, "sp", r=2), seed=1)
    snaps = [grads(m, t.id, rng, small_cfg, k=t.num_classes) for t in three_tasks]
    cos = D.gradient_cosine_matrix(snaps)
    off = cos[~np.eye(3, dtype=bool)]
    assert np.all(off == 0.0)


def test_dc_restrictions(small_cfg, three_tasks, rng):
    m = randomize_adapters(build_model(small_cfg, three_tasks, "dc", r=2), seed=2)
    snaps = [grads(m, t.id, rng, small_cfg, k=t.num_classes) for t in three_tasks]
    ups = D.gradient_cosine_matrix([s.restrict(lambda n: ".lora.B" in n) for s in snaps])
    assert np.all(ups[~np.eye(3, dtype=bool)] == 0.0)
    downs = D.gradient_cosine_matrix([s.restrict(lambda n: n.endswith(".lora.A")) for s in snaps])
    assert np.all(np.abs(downs[~np.eye(3, dtype=bool)]) > 1e-6)


def test_capture_leaves_model_untouched(small_cfg, three_tasks, rng):
    m = randomize_adapters(build_model(small_cfg, three_tasks, "dc", r=2), seed=3)
    before = {n: p.data.copy() for n, p in m.parameters().items()}
    s = grads(m, 1, rng, small_cfg, scope="shared")
    assert all(name.endswith(".lora.A") for name, _, _ in s.layout)
    assert s.vector.size == sum(b - a for _, a, b in s.layout)
    for n, p in m.parameters().items():
        np.testing.assert_array_equal(p.data, before[n])


def test_scope_errors(small_cfg, three_tasks):
    m = build_model(small_cfg, three_tasks, "sp", r=2)
    with pytest.raises(ScopeError):
        D.scope_parameters(m, "shared")
    with pytest.raises(ScopeError):
        D.scope_parameters(m, "everything")
    with pytest.raises(ScopeError):
        D.scope_parameters(m, "adapters")
    assert len(D.scope_parameters(m, "adapters", 2)) * 3 == len(D.scope_parameters(m, "union"))


def test_hps_scope_is_backbone(small_cfg, three_tasks, rng):
    m = build_model(small_cfg, three_tasks, "hps")
    s = grads(m, 1, rng, small_cfg)
    assert s.vector.size == sum(p.data.size for p in m.backbone.params.values())
    assert np.linalg.norm(s.vector) > 0


# exports


def test_csv_exports(tmp_path):
    m = D.gradient_cosine_matrix([snap(1, [1, 0]), snap(2, [0, 0])])
    D.write_cosine_csv(m, ["a", "b"], tmp_path / "c.csv")
    lines = (tmp_path / "c.csv").read_text().splitlines()
    assert lines == ["task_a,task_b,cosine", "a,a,1", "a,b,nan", "b,a,nan", "b,b,nan"]
    stats = D.gradient_magnitude_stats([snap(1, [3.0, 4.0])], bins=2, log10_range=(0.0, 1.0))
    D.write_magnitude_csv(stats, ["a"], tmp_path / "g.csv")
    rows = (tmp_path / "g.csv").read_text().splitlines()
    assert rows[:3] == ["task,kind,key,value", "a,l2_norm,total,5", "a,layer_norm,w,5"]
    assert rows[3:] == ["a,hist,underflow,0", "a,hist,\"[0,0.5)\",1", "a,hist,\"[0.5,1)\",1", "a,hist,overflow,0"]


def _samples(rng, cfg, tasks):
    out = []
    for t in tasks:
        for i in range(3):
            out.append((t.id, f"s{t.id}_{i}", rng.standard_normal((2, 2, cfg.patch_len)), NAMES))
    return out


def test_export_features_shape_and_determinism(tmp_path, small_cfg, three_tasks, rng):
    m = randomize_adapters(build_model(small_cfg, three_tasks, "rt", r=2), seed=4)
    samples = _samples(rng, small_cfg, three_tasks)
    n = D.export_features(m, samples, tmp_path / "a.tsv", batch_size=2)
    assert n == 9
    lines = (tmp_path / "a.tsv").read_text().splitlines()
    assert len(lines) == 10 and all(len(l.split("\t")) == small_cfg.d + 2 for l in lines)
    assert lines[0].split("\t")[:3] == ["task_id", "sample_id", "f0"]
    assert lines[4].split("\t")[:2] == ["2", "s2_0"]
    D.export_features(m, samples, tmp_path / "b.tsv", batch_size=2)
    assert (tmp_path / "a.tsv").read_bytes() == (tmp_path / "b.tsv").read_bytes()


def test_zero_adapter_features_equal_backbone(tmp_path, small_cfg, three_tasks, rng):
    m = build_model(small_cfg, three_tasks, "dc", r=2)
    samples = _samples(rng, small_cfg, three_tasks)
    D.export_features(m, samples, tmp_path / "f.tsv")
    rows = [l.split("\t") for l in (tmp_path / "f.tsv").read_text().splitlines()[1:]]
    got = np.array([[float(v) for v in r[2:]] for r in rows])
    ref = np.stack([pool_features(encoder_forward(m.backbone, (s[2][None], NAMES))).data[0] for s in samples])
    np.testing.assert_allclose(got, ref, rtol=0, atol=1e-12)


def test_export_io_error(small_cfg, three_tasks, tmp_path):
    m = build_model(small_cfg, three_tasks, "dc", r=2)
    with pytest.raises(OSError):
        D.export_features(m, [], tmp_path / "missing" / "f.tsv")
