import math
import struct
from collections import Counter

import numpy as np
import pytest

from mteeg import checkpoint
from mteeg import metrics as M
from mteeg.adapters import TaskError
from mteeg.model import TaskSpec, build_model, frozen_hash
from mteeg.trainer import (
    AdamW,
    Batch,
    ConfigError,
    DataError,
    TaskData,
    TrainConfig,
    build_epoch_plan,
    evaluate_task,
    fit,
    train_step,
)

from conftest import randomize_adapters

NAMES = ["S0", "S1"]


def batch(rng, cfg, task, n=4, k=2):
    return Batch(task, rng.standard_normal((n, 2, 2, cfg.patch_len)), np.arange(n) % k, NAMES)


def toy_data(rng, cfg, n, k, shift=1.0):
    y = np.arange(n) % k
    x = rng.standard_normal((n, 2, 2, cfg.patch_len)) * 0.1
    x += shift * y[:, None, None, None] * np.sin(np.linspace(0, 6, cfg.patch_len))
    return TaskData(x, y, NAMES)


# task specs


def test_task_spec_loss_choice():
    assert TaskSpec(1, "a", 2).loss == "binary-ce"
    assert TaskSpec(1, "a", 5).loss == "multiclass-ce"
    with pytest.raises(ValueError):
        TaskSpec(1, "a", 1)
    with pytest.raises(ValueError):
        TaskSpec(1, "a", 3, loss="binary-ce")
    with pytest.raises(ValueError):
        TaskSpec(1, "a", 3, subsample_fraction=0.0)


# train_step


def test_uniform_head_loss_is_log_k(small_cfg, rng, three_tasks):
    m = build_model(small_cfg, three_tasks, "dc")
    for t in three_tasks:
        w, b = m.head(t.id)
        w.data[...] = 0.0
        x = rng.standard_normal((3, 2, 2, small_cfg.patch_len))
        loss = m.loss(t.id, x, NAMES, np.arange(3) % t.num_classes)
        assert loss.item() == pytest.approx(math.log(t.num_classes), abs=1e-6)


def test_zero_lr_is_null_update(small_cfg, rng, three_tasks):
    m = build_model(small_cfg, three_tasks, "sp")
    before = {n: p.data.copy() for n, p in m.parameters().items()}
    b = batch(rng, small_cfg, 2, k=5)
    opt = AdamW()
    train_step(m, b, 0.0, opt)
    train_step(m, b, 0.0, opt)
    for n, p in m.parameters().items():
        np.testing.assert_array_equal(p.data, before[n])


@pytest.mark.parametrize("variant", ["sp", "dc", "rt"])
def test_step_isolation(variant, small_cfg, rng, three_tasks):
    m = randomize_adapters(build_model(small_cfg, three_tasks, variant), seed=4)
    h0 = frozen_hash(m)
    before = {n: p.data.copy() for n, p in m.parameters().items()}
    opt = AdamW()
    for _ in range(3):
        train_step(m, batch(rng, small_cfg, 1), 1e-2, opt)
    assert frozen_hash(m) == h0
    changed = {n for n, p in m.parameters().items() if not np.array_equal(p.data, before[n])}
    assert changed, "nothing was trained"
    assert all(not m.parameters()[n].frozen for n in changed)
    assert not any(n.startswith(("head.2.", "head.3.")) for n in changed)
    if variant == "sp":
        assert not any(n.endswith(("A2", "B2", "A3", "B3")) for n in changed)
    if variant == "dc":
        assert not any(n.endswith(("B2", "B3")) for n in changed)
        assert any(n.endswith(".lora.A") for n in changed)


def test_unknown_task(small_cfg, rng, three_tasks):
    m = build_model(small_cfg, three_tasks, "dc")
    with pytest.raises(TaskError):
        train_step(m, batch(rng, small_cfg, 9), 1e-3, AdamW())


def test_adamw_first_step_oracle():
    from mteeg.tensor import Parameter

    p = Parameter(np.array([1.0, -2.0, 0.5]), "p")
    p.grad[...] = [0.3, -0.1, 0.0]
    AdamW(weight_decay=0.01).step([p], lr=0.1)
    g = np.array([0.3, -0.1, 0.0])
    mhat, vhat = g, g * g  # bias-corrected first moments at t=1
    expect = np.array([1.0, -2.0, 0.5]) * (1 - 0.1 * 0.01) - 0.1 * mhat / (np.sqrt(vhat) + 1e-8)
    np.testing.assert_allclose(p.data, expect, atol=1e-15)


def test_loss_mostly_decreases_on_fixed_batch(small_cfg, rng):
    tasks = [TaskSpec(1, "a", 3)]
    m = build_model(small_cfg, tasks, "dc", seed=0)
    b = Batch(1, toy_data(rng, small_cfg, 12, 3).patches, np.arange(12) % 3, NAMES)
    opt = AdamW()
    losses = [train_step(m, b, 1e-3, opt)[0] for _ in range(50)]
    ups = sum(b > a for a, b in zip(losses, losses[1:]))
    assert ups <= 5 and losses[-1] < losses[0]


def test_hps_mode_trains_backbone(small_cfg, rng, three_tasks):
    m = build_model(small_cfg, three_tasks, "hps")
    assert not m.adapters and all(not p.frozen for p in m.backbone.params.values())
    before = m.backbone.params["blocks.0.attn.q.weight"].data.copy()
    train_step(m, batch(rng, small_cfg, 1), 1e-3, AdamW())
    assert not np.array_equal(before, m.backbone.params["blocks.0.attn.q.weight"].data)


# epoch plans


def test_epoch_plan_subsampling_counts():
    tasks = [TaskSpec(1, "a", 2), TaskSpec(2, "b", 3), TaskSpec(3, "c", 2, subsample_fraction=0.1)]
    plan = build_epoch_plan(tasks, [3200, 3200, 3200], 32, seed=0)
    assert len(plan.slots) == 210
    assert Counter(t for t, _ in plan.slots) == {1: 100, 2: 100, 3: 10}


def test_epoch_plan_full_and_deterministic():
    tasks = [TaskSpec(1, "a", 2), TaskSpec(2, "b", 3)]
    plan = build_epoch_plan(tasks, {1: 70, 2: 40}, 16, seed=3)
    assert sorted(plan.slots) == [(1, b) for b in range(5)] + [(2, b) for b in range(3)]
    assert build_epoch_plan(tasks, {1: 70, 2: 40}, 16, seed=3).slots == plan.slots
    other = build_epoch_plan(tasks, {1: 70, 2: 40}, 16, seed=4)
    assert sorted(other.slots) == sorted(plan.slots) and other.slots != plan.slots
    covered = np.concatenate([plan.batch_indices(1, b) for b in range(5)])
    assert sorted(covered) == list(range(70))


def test_epoch_plan_errors():
    with pytest.raises(ConfigError):
        build_epoch_plan([], [], 4, 0)
    with pytest.raises(ConfigError):
        build_epoch_plan([TaskSpec(1, "a", 2)], [3], 4, 0)


# evaluation


def test_evaluate_task_matches_metrics(small_cfg, rng, three_tasks, monkeypatch):
    m = build_model(small_cfg, three_tasks, "dc")
    y = np.array([0, 0, 1, 1, 1])
    scores = np.array([[0.9, 0.1], [0.4, 0.6], [0.3, 0.7], [0.2, 0.8], [0.7, 0.3]])
    monkeypatch.setattr(m, "predict_scores", lambda p, x, names: scores[: len(x)])
    rep = evaluate_task(m, 1, TaskData(np.zeros((5, 2, 2, small_cfg.patch_len)), y, NAMES))
    assert rep.kind == "binary"
    assert rep.metrics["balanced_accuracy"] == pytest.approx(0.5833333333333333, abs=1e-15)
    assert rep.metrics == M.binary_report(M.LabeledScores(y, scores))
    with pytest.raises(DataError):
        evaluate_task(m, 1, TaskData(np.zeros((0, 2, 2, small_cfg.patch_len)), np.zeros(0, int), NAMES))
    with pytest.raises(TaskError):
        evaluate_task(m, 7, TaskData(np.zeros((1, 2, 2, small_cfg.patch_len)), np.zeros(1, int), NAMES))


def test_evaluate_perfect_multiclass(small_cfg, three_tasks, monkeypatch):
    m = build_model(small_cfg, three_tasks, "dc")
    y = np.array([0, 1, 2, 3, 4, 0])
    monkeypatch.setattr(m, "predict_scores", lambda p, x, names: np.eye(5)[y[: len(x)]])
    rep = evaluate_task(m, 2, TaskData(np.zeros((6, 2, 2, small_cfg.patch_len)), y, NAMES))
    assert rep.metrics == {"balanced_accuracy": 1.0, "cohens_kappa": 1.0, "weighted_f1": 1.0}


# fit


def _fit(small_cfg, seed):
    rng = np.random.default_rng(0)
    tasks = [TaskSpec(1, "a", 2), TaskSpec(2, "b", 3)]
    train = {1: toy_data(rng, small_cfg, 16, 2), 2: toy_data(rng, small_cfg, 16, 3)}
    val = {1: toy_data(rng, small_cfg, 8, 2), 2: toy_data(rng, small_cfg, 9, 3)}
    m = build_model(small_cfg, tasks, "dc", r=2, seed=seed)
    res = fit(m, train, val, TrainConfig(epochs=3, batch_size=8, lr=1e-2), seed=seed)
    return m, res


def test_fit_rows_best_epoch_and_determinism(small_cfg):
    m1, r1 = _fit(small_cfg, 1)
    m2, r2 = _fit(small_cfg, 1)
    assert r1.rows == r2.rows
    assert checkpoint.to_bytes(m1) == checkpoint.to_bytes(m2)
    metrics = {(e, t, k) for e, t, k, _ in r1.rows}
    assert (1, "a", "val_auroc") in metrics and (3, "b", "val_cohens_kappa") in metrics and (2, "a", "train_loss") in metrics
    best = [np.mean([v for e, t, k, v in r1.rows if e == ep and k == "val_balanced_accuracy"]) for ep in (1, 2, 3)]
    assert r1.best_score == max(best) and r1.best_epoch == 1 + int(np.argmax(best))


# checkpoints


@pytest.mark.parametrize("variant", ["hps", "sp", "rt", "dc"])
def test_checkpoint_roundtrip(variant, small_cfg, three_tasks, tmp_path, rng):
    m = randomize_adapters(build_model(small_cfg, three_tasks, variant, r=3, seed=2), seed=5)
    m.meta = {"seed": 2}
    path = tmp_path / "m.mtee"
    checkpoint.save(m, path)
    back = checkpoint.load(path)
    assert back.variant == variant and back.tasks == m.tasks and back.meta == {"seed": 2}
    for name, p in m.parameters().items():
        q = back.parameters()[name]
        assert q.frozen == p.frozen
        np.testing.assert_array_equal(q.data, p.data)
    assert checkpoint.to_bytes(back) == path.read_bytes()
    data = TaskData(rng.standard_normal((5, 2, 2, small_cfg.patch_len)), np.array([0, 1, 2, 0, 1]), NAMES)
    assert evaluate_task(back, 3, data).metrics == evaluate_task(m, 3, data).metrics


def test_checkpoint_errors(small_cfg, three_tasks):
    raw = checkpoint.to_bytes(build_model(small_cfg, three_tasks, "dc", r=2))
    cases = {
        "magic": (b"NOPE" + raw[4:], 0),
        "version": (raw[:4] + struct.pack("<I", 2) + raw[8:], 4),
    }
    for name, (buf, offset) in cases.items():
        with pytest.raises(checkpoint.CheckpointFormatError) as exc:
            checkpoint.from_bytes(buf)
        assert exc.value.offset == offset, name
    for cut in (3, 10, 60, len(raw) // 2, len(raw) - 1):
        with pytest.raises(checkpoint.CheckpointFormatError):
            checkpoint.from_bytes(raw[:cut])
    other = checkpoint.to_bytes(build_model(small_cfg, three_tasks, "dc", r=2, locations="mhsa"))
    assert other != raw


def test_fit_patience_stops_early(small_cfg):
    rng = np.random.default_rng(0)
    tasks = [TaskSpec(1, "a", 2)]
    train = {1: toy_data(rng, small_cfg, 8, 2)}
    m = build_model(small_cfg, tasks, "dc", r=2, seed=1)
    res = fit(m, train, train, TrainConfig(epochs=30, batch_size=8, lr=0.0, patience=2), seed=1)
    assert res.best_epoch == 1 and max(e for e, *_ in res.rows) == 3
