"""``mteeg <gen-data|train|eval|analyze|param-count> --config <path> [--set k=v]...``"""

from __future__ import annotations

import argparse
import csv
import sys
from collections import defaultdict
from pathlib import Path

import numpy as np

from mteeg import checkpoint, diagnostics
from mteeg.adapters import adapter_param_count, count_trainable_params, head_param_count
from mteeg.config import ConfigKeyError, ExperimentConfig, load
from mteeg.model import build_model
from mteeg.preprocessing import read_recording, synthetic_channel_names
from mteeg.synth import Sample, read_manifest, write_dataset
from mteeg.trainer import Batch, AdamW, build_epoch_plan, evaluate_task, fit, prepare, pretrain_backbone, train_step

EXIT_OK, EXIT_CONFIG, EXIT_DATA = 0, 2, 3
COMMANDS = ("gen-data", "train", "eval", "analyze", "param-count")


class MissingDataError(FileNotFoundError):
    pass


def _fmt(v) -> str:
    if isinstance(v, float):
        return diagnostics._fmt(v)
    return str(v)


def _write_csv(path: Path, header, rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows([[_fmt(v) for v in row] for row in rows])


def _tag(cfg: ExperimentConfig, r) -> str:
    return "hps" if cfg.variant == "hps" else f"{cfg.variant}_r{r}"


def _ranks(cfg: ExperimentConfig):
    return (cfg.r,) if cfg.variant == "hps" else cfg.ranks()


def load_splits(cfg: ExperimentConfig) -> dict[int, dict]:
    """Read the generated dataset back into patched per-task splits."""
    root = cfg.data_path
    if not (root / "labels.csv").is_file():
        raise MissingDataError(f"no dataset at {root}; run gen-data first")
    samples: dict[int, dict[str, list]] = defaultdict(lambda: defaultdict(list))
    for sid, task, split, label in read_manifest(root):
        path = root / "recordings" / f"{sid}.mtrc"
        if not path.is_file():
            raise MissingDataError(f"missing recording {path}")
        rec = read_recording(path)
        rec.channel_names = synthetic_channel_names(rec.channels)
        samples[task][split].append(Sample(rec, label, sid))
    ids = [t.id for t in cfg.task_specs()]
    missing = [p for p in ids if not samples[p].get("train")]
    if missing:
        raise MissingDataError(f"no training samples for tasks {missing}")
    return {p: {split: (prepare(v, cfg.patch_len), [s.sample_id for s in v]) for split, v in samples[p].items()}
            for p in ids}


def _backbone(cfg: ExperimentConfig):
    return pretrain_backbone(cfg.backbone_config(), seed=0, steps=cfg.pretrain_steps, noise=cfg.pretrain_noise)


def _model(cfg: ExperimentConfig, r: int, seed: int, backbone):
    return build_model(cfg.backbone_config(), cfg.task_specs(), cfg.variant, r=r, locations=cfg.locations,
                       n_experts=cfg.n_experts or None, seed=seed, backbone=backbone)


def _ckpt_path(cfg: ExperimentConfig, r, seed) -> Path:
    return cfg.out / "checkpoints" / f"{_tag(cfg, r)}_seed{seed}.mtee"


def cmd_gen_data(cfg: ExperimentConfig) -> int:
    n = write_dataset(cfg.data_path, cfg.synth_configs())
    print(f"wrote {n} samples to {cfg.data_path}")
    return EXIT_OK


def _test_rows(model, splits, seed) -> list[tuple]:
    rows = []
    for t in model.tasks:
        test = splits[t.id].get("test")
        if test is None:
            raise MissingDataError(f"no test split for task {t.id}")
        rep = evaluate_task(model, t.id, test[0])
        rows += [(seed, t.name, k, float(v)) for k, v in rep.metrics.items()]
    return rows


def cmd_train(cfg: ExperimentConfig) -> int:
    splits = load_splits(cfg)
    train = {p: s["train"][0] for p, s in splits.items()}
    val = {p: (s.get("val") or s["train"])[0] for p, s in splits.items()}
    backbone = _backbone(cfg)
    summary, sweep = [], []
    for r in _ranks(cfg):
        tag = _tag(cfg, r)
        test_rows = []
        params = None
        for seed in cfg.seeds:
            model = _model(cfg, r, seed, backbone)
            params = count_trainable_params(model)
            res = fit(model, train, val, cfg.train_config(), seed=seed)
            _write_csv(cfg.out / f"metrics_{tag}_seed{seed}.csv", ["seed", "epoch", "task", "metric", "value"],
                       [(seed, *row) for row in res.rows])
            model.meta = {"seed": seed, "best_epoch": res.best_epoch}
            path = _ckpt_path(cfg, r, seed)
            path.parent.mkdir(parents=True, exist_ok=True)
            checkpoint.save(model, path)
            test_rows += _test_rows(model, splits, seed)
            print(f"{tag} seed {seed}: best epoch {res.best_epoch}, mean val BA {res.best_score:.4f}")
        by_key = defaultdict(list)
        for _, task, metric, value in test_rows:
            by_key[(task, metric)].append(value)
        for (task, metric), vals in by_key.items():
            summary.append((cfg.variant, r, task, f"test_{metric}", float(np.mean(vals)), float(np.std(vals)), len(vals)))
        mean_ba = float(np.mean([v for (t, m), vs in by_key.items() if m == "balanced_accuracy" for v in vs]))
        sweep.append((cfg.variant, r, params, mean_ba))
    _write_csv(cfg.out / "summary.csv", ["variant", "r", "task", "metric", "mean", "std", "n_seeds"], summary)
    _write_csv(cfg.out / "rank_sweep.csv", ["variant", "r", "trainable_params", "mean_test_balanced_accuracy"], sweep)
    return EXIT_OK


def _load_ckpt(cfg: ExperimentConfig, r, seed):
    path = _ckpt_path(cfg, r, seed)
    if not path.is_file():
        raise MissingDataError(f"missing checkpoint {path}; run train first")
    return checkpoint.load(path)


def cmd_eval(cfg: ExperimentConfig) -> int:
    splits = load_splits(cfg)
    for r in _ranks(cfg):
        rows = []
        for seed in cfg.seeds:
            rows += _test_rows(_load_ckpt(cfg, r, seed), splits, seed)
        _write_csv(cfg.out / f"eval_{_tag(cfg, r)}.csv", ["seed", "task", "metric", "value"], rows)
    return EXIT_OK


def _advance(model, train, cfg: ExperimentConfig, steps: int, seed: int) -> None:
    """Run ``steps`` joint training steps from the current state."""
    opt, done, epoch = AdamW(weight_decay=cfg.weight_decay), 0, 0
    sizes = {p: len(d) for p, d in train.items()}
    while done < steps:
        epoch += 1
        plan = build_epoch_plan(model.tasks, sizes, cfg.batch_size, (seed, epoch))
        for task, b in plan.slots:
            if done == steps:
                break
            idx = plan.batch_indices(task, b)
            d = train[task]
            train_step(model, Batch(task, d.patches[idx], d.labels[idx], d.channel_names), cfg.lr, opt)
            done += 1


def cmd_analyze(cfg: ExperimentConfig) -> int:
    splits = load_splits(cfg)
    r, seed = _ranks(cfg)[0], cfg.seeds[0]
    train = {p: s["train"][0] for p, s in splits.items()}
    if cfg.snapshot_step < 0:
        model = _load_ckpt(cfg, r, seed)
    else:
        model = _model(cfg, r, seed, _backbone(cfg))
        _advance(model, train, cfg, cfg.snapshot_step, seed)
    out = cfg.out / "analysis" / _tag(cfg, r)
    out.mkdir(parents=True, exist_ok=True)
    names = [t.name for t in model.tasks]

    scope = "shared" if cfg.variant == "hps" else "union"
    snaps = []
    for t in model.tasks:
        d = train[t.id]
        k = min(cfg.snapshot_batch, len(d))
        snaps.append(diagnostics.capture_gradients(model, t.id, d.patches[:k], d.labels[:k], d.channel_names, scope))
    views = {scope: snaps}
    if cfg.variant == "dc":
        views["dc_up"] = [s.restrict(lambda n: ".lora.B" in n) for s in snaps]
        views["dc_down"] = [s.restrict(lambda n: n.endswith(".lora.A")) for s in snaps]
    for label, vs in views.items():
        diagnostics.write_cosine_csv(diagnostics.gradient_cosine_matrix(vs), names, out / f"cosine_{label}.csv")
    stats = diagnostics.gradient_magnitude_stats(snaps, bins=cfg.hist_bins)
    diagnostics.write_magnitude_csv(stats, names, out / "gradient_magnitudes.csv")

    feats = []
    for t in model.tasks:
        test = splits[t.id].get("test")
        if test is None:
            raise MissingDataError(f"no test split for task {t.id}")
        data, ids = test
        feats += [(t.id, sid, data.patches[i], data.channel_names) for i, sid in enumerate(ids)]
    n = diagnostics.export_features(model, feats, out / "features.tsv")
    print(f"wrote analysis for {len(snaps)} tasks and {n} feature rows to {out}")
    return EXIT_OK


def cmd_param_count(cfg: ExperimentConfig) -> int:
    model = _model(cfg, cfg.r, 0, None)
    tasks = model.tasks
    d = model.backbone.config.d
    print(f"variant={cfg.variant} r={cfg.r} tasks={len(tasks)} d={d} layers={model.backbone.config.layers}")
    if cfg.variant == "hps":
        adapters = sum(p.data.size for p in model.backbone.params.values())
        print(f"backbone (trainable): {adapters}")
    else:
        adapters = 0
        for name, aset in model.adapters.items():
            m, n = model.backbone.linear(name)[0].shape
            s = len(aset.pairs) if aset.variant == "rt" else None
            count = adapter_param_count(aset.variant, m, n, aset.r, len(tasks), s)
            adapters += count
            print(f"{name} ({m}x{n}): {count}")
        print(f"adapters: {adapters}")
    heads = head_param_count(tasks, d)
    print(f"heads: {heads}")
    print(f"total trainable: {adapters + heads}")
    if adapters + heads != count_trainable_params(model):
        print("closed-form count disagrees with model tensors", file=sys.stderr)
        return 1
    return EXIT_OK


HANDLERS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "analyze": cmd_analyze,
    "param-count": cmd_param_count,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mteeg", description="Multi-task EEG adapter experiments on synthetic data.")
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("--config", required=True, help="key=value config file")
    ap.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                    help="override a config key (repeatable)")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load(args.config, args.overrides)
    except ConfigKeyError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return HANDLERS[args.command](cfg)
    except MissingDataError as exc:
        print(f"missing data: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
