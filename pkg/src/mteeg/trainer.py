"""Multi-task fine-tuning: epoch plans, AdamW steps, evaluation, model selection."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from mteeg import metrics as M
from mteeg.adapters import TaskError
from mteeg.backbone import Backbone, BackboneConfig
from mteeg.model import ModelState, TaskSpec, build_model
from mteeg.preprocessing import PreprocessConfig, preprocess, segment_patches


class DataError(ValueError):
    pass


class ConfigError(ValueError):
    pass


@dataclass
class TaskData:
    patches: np.ndarray  # (n, C, J, w)
    labels: np.ndarray  # (n,)
    channel_names: list[str]

    def __len__(self) -> int:
        return len(self.labels)


def prepare(samples, w: int = 200, pre: PreprocessConfig = PreprocessConfig()) -> TaskData:
    """Preprocess and patch a list of synthetic/loaded samples of one task."""
    if not samples:
        raise DataError("no samples")
    grids = [segment_patches(preprocess(s.recording, pre), w) for s in samples]
    return TaskData(
        np.stack([g.patches for g in grids]),
        np.array([s.label for s in samples], dtype=np.int64),
        grids[0].channel_names,
    )


@dataclass
class Batch:
    task: int
    inputs: np.ndarray  # (B, C, J, w)
    labels: np.ndarray
    channel_names: list[str]


# -----------------------------------------------------------------------------
# optimizer
# -----------------------------------------------------------------------------


@dataclass
class AdamW:
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01
    state: dict = field(default_factory=dict)  # name -> [step, m, v]

    def step(self, params, lr: float) -> None:
        b1, b2 = self.betas
        for p in sorted(params, key=lambda q: q.name):
            if p.frozen:
                continue
            st = self.state.get(p.name)
            if st is None:
                st = self.state[p.name] = [0, np.zeros_like(p.data), np.zeros_like(p.data)]
            st[0] += 1
            t, m, v = st
            g = p.grad
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            mhat = m / (1.0 - b1**t)
            vhat = v / (1.0 - b2**t)
            p.data *= 1.0 - lr * self.weight_decay
            p.data -= lr * mhat / (np.sqrt(vhat) + self.eps)


def train_step(model: ModelState, batch: Batch, lr: float, opt: AdamW) -> tuple[float, ModelState]:
    """One forward/backward/update on a single-task batch.

    Only parameters reached by this batch's backward pass are updated, so the
    adapters and heads of other tasks stay bitwise unchanged.
    """
    if batch.task not in model.heads:
        raise TaskError(f"no head registered for task {batch.task}")
    model.zero_grad()
    loss = model.loss(batch.task, batch.inputs, batch.channel_names, batch.labels)
    reached = loss.backward()
    opt.step([p for p in reached if not p.frozen], lr)
    return loss.item(), model


# -----------------------------------------------------------------------------
# epoch plans
# -----------------------------------------------------------------------------


@dataclass
class EpochPlan:
    slots: list[tuple[int, int]]  # (task_id, batch_index)
    seed: int
    orders: dict[int, np.ndarray]  # task -> sample permutation for this epoch
    batch_size: int

    def batch_indices(self, task: int, batch_index: int) -> np.ndarray:
        return self.orders[task][batch_index * self.batch_size : (batch_index + 1) * self.batch_size]


def build_epoch_plan(tasks, sizes, batch_size: int, seed) -> EpochPlan:
    """Interleave task batches as a seeded shuffle of the slot multiset.

    Task p contributes ceil(fraction_p * ceil(n_p / batch_size)) slots; a
    fresh per-epoch permutation makes a subsampled task see a random subset.
    """
    tasks = list(tasks)
    if not tasks:
        raise ConfigError("empty task list")
    if batch_size < 1:
        raise ConfigError("batch_size must be >= 1")
    sizes = sizes if isinstance(sizes, dict) else {t.id: n for t, n in zip(tasks, sizes)}
    rng = np.random.default_rng(seed)
    slots: list[tuple[int, int]] = []
    orders = {}
    for t in tasks:
        n = int(sizes[t.id])
        if n < batch_size:
            raise ConfigError(f"task {t.id} has {n} samples, fewer than batch_size {batch_size}")
        orders[t.id] = rng.permutation(n)
        nb = math.ceil(n / batch_size)
        # round first so 0.1 * 100 is exactly 10 slots
        keep = math.ceil(round(t.subsample_fraction * nb, 9))
        slots += [(t.id, b) for b in range(keep)]
    perm = rng.permutation(len(slots))
    return EpochPlan([slots[i] for i in perm], seed, orders, batch_size)


# -----------------------------------------------------------------------------
# evaluation
# -----------------------------------------------------------------------------


@dataclass
class EvalReport:
    task: int
    name: str
    kind: str  # "binary" | "multiclass"
    metrics: dict[str, float]


def predict(model: ModelState, p: int, data: TaskData, batch_size: int = 64) -> np.ndarray:
    out = [
        model.predict_scores(p, data.patches[i : i + batch_size], data.channel_names)
        for i in range(0, len(data), batch_size)
    ]
    return np.concatenate(out)


def evaluate_task(model: ModelState, p: int, data: TaskData, batch_size: int = 64) -> EvalReport:
    model.head(p)
    if data is None or len(data) == 0:
        raise DataError(f"empty evaluation set for task {p}")
    spec = model.task(p)
    ls = M.LabeledScores(data.labels, predict(model, p, data, batch_size))
    if spec.binary:
        return EvalReport(p, spec.name, "binary", M.binary_report(ls))
    return EvalReport(p, spec.name, "multiclass", M.classification_metrics(ls))


# -----------------------------------------------------------------------------
# training loop
# -----------------------------------------------------------------------------


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 32
    lr: float = 1e-3
    weight_decay: float = 0.01
    eval_batch_size: int = 64
    patience: int | None = None  # stop after this many epochs without a new best


@dataclass
class FitResult:
    best_epoch: int
    best_score: float
    rows: list[tuple]  # (epoch, task, metric, value)


def snapshot(model: ModelState) -> dict[str, np.ndarray]:
    return {p.name: p.data.copy() for p in model.trainable()}


def restore(model: ModelState, snap: dict[str, np.ndarray]) -> None:
    params = model.parameters()
    for name, value in snap.items():
        params[name].data[...] = value


def fit(model: ModelState, train: dict[int, TaskData], val: dict[int, TaskData], cfg: TrainConfig, seed: int = 0,
        on_epoch=None) -> FitResult:
    """Joint training; keeps the epoch with the best mean validation BA."""
    opt = AdamW(weight_decay=cfg.weight_decay)
    sizes = {p: len(d) for p, d in train.items()}
    best = (-np.inf, 0, None)
    rows: list[tuple] = []
    for epoch in range(1, cfg.epochs + 1):
        plan = build_epoch_plan(model.tasks, sizes, cfg.batch_size, (seed, epoch))
        losses: dict[int, list[float]] = {t.id: [] for t in model.tasks}
        for task, b in plan.slots:
            idx = plan.batch_indices(task, b)
            d = train[task]
            loss, _ = train_step(model, Batch(task, d.patches[idx], d.labels[idx], d.channel_names), cfg.lr, opt)
            losses[task].append(loss)
        bas = []
        epoch_rows = []
        for t in model.tasks:
            epoch_rows.append((epoch, t.name, "train_loss", float(np.mean(losses[t.id]))))
            rep = evaluate_task(model, t.id, val[t.id], cfg.eval_batch_size)
            for k, v in rep.metrics.items():
                epoch_rows.append((epoch, t.name, f"val_{k}", v))
            bas.append(rep.metrics["balanced_accuracy"])
        rows += epoch_rows
        score = float(np.mean(bas))
        if score > best[0]:
            best = (score, epoch, snapshot(model))
        if on_epoch is not None:
            on_epoch(epoch, epoch_rows)
        if cfg.patience is not None and epoch - best[1] >= cfg.patience:
            break
    restore(model, best[2])
    return FitResult(best[1], best[0], rows)


# -----------------------------------------------------------------------------
# backbone warm-up (pre-trained stand-in)
# -----------------------------------------------------------------------------


def pretrain_backbone(cfg: BackboneConfig, seed: int = 0, steps: int = 600, batch_size: int = 16, lr: float = 1e-3,
                      noise: float = 1e-4) -> Backbone:
    """Warm up a randomly initialized encoder on one synthetic task, then freeze it."""
    from mteeg.synth import SynthTaskConfig, generate

    backbone_model = build_model(cfg, [TaskSpec(1, "warmup", 8)], "hps", seed=seed)
    if steps > 0:
        duration = cfg.patch_len * 4 / 200.0
        scfg = SynthTaskConfig(1, "warmup", 4, 200.0, duration, 8, noise=noise, n_train=256,
                               n_val=0, n_test=0, seed=10_000 + seed)
        data = prepare(generate(scfg)["train"], cfg.patch_len)
        opt = AdamW(weight_decay=0.01)
        rng = np.random.default_rng((seed, 31))
        for _ in range(steps):
            idx = rng.choice(len(data), batch_size, replace=False)
            train_step(backbone_model, Batch(1, data.patches[idx], data.labels[idx], data.channel_names), lr, opt)
    backbone_model.backbone.set_frozen(True)
    return backbone_model.backbone
