"""Per-task gradient conflict analysis and pooled-feature export."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from mteeg import tensor as T
from mteeg.model import ModelState

SCOPES = ("shared", "adapters", "union")
UNDEFINED = "nan"


class ScopeError(ValueError):
    pass


@dataclass
class GradientSnapshot:
    task: int
    vector: np.ndarray
    layout: list[tuple[str, int, int]]  # (param name, start, stop)

    def restrict(self, keep) -> "GradientSnapshot":
        """Sub-snapshot of the parameters whose name satisfies ``keep``."""
        parts, layout, pos = [], [], 0
        for name, a, b in self.layout:
            if keep(name):
                parts.append(self.vector[a:b])
                layout.append((name, pos, pos + b - a))
                pos += b - a
        vec = np.concatenate(parts) if parts else np.zeros(0)
        return GradientSnapshot(self.task, vec, layout)

    def layout_key(self) -> tuple:
        return tuple(self.layout)


def scope_parameters(model: ModelState, scope: str, task: int | None = None):
    """Parameters in a declared scope, sorted by name."""
    if scope not in SCOPES:
        raise ScopeError(f"unknown scope {scope!r}")
    if model.variant == "hps":
        params = [p for p in model.backbone.params.values() if not p.frozen]
    elif scope == "adapters":
        if task is None:
            raise ScopeError("adapters scope needs a task")
        params = [p for aset in model.adapters.values() for p in aset.task_parameters(task)]
    elif scope == "union":
        params = model.adapter_parameters()
    else:
        shared = []
        for aset in model.adapters.values():
            if aset.variant == "dc":
                shared.append(aset.down)
            elif aset.variant == "rt":
                shared += aset.parameters()
        params = shared
    if not params:
        raise ScopeError(f"scope {scope!r} is empty for variant {model.variant}")
    return sorted(params, key=lambda p: p.name)


def capture_gradients(model: ModelState, task: int, inputs, labels, channel_names, scope: str = "union") -> GradientSnapshot:
    """Backward one mini-batch of ``task`` and flatten the scoped gradients."""
    params = scope_parameters(model, scope, task)
    saved = {p.name: p.requires_grad for p in params}
    for p in params:
        if p.grad is None:
            p.grad = np.zeros_like(p.data)
        p.requires_grad = True
    model.zero_grad()
    for p in params:
        p.grad[...] = 0.0
    try:
        model.loss(task, inputs, channel_names, labels).backward()
        parts, layout, pos = [], [], 0
        for p in params:
            g = p.grad.reshape(-1).copy()
            parts.append(g)
            layout.append((p.name, pos, pos + g.size))
            pos += g.size
    finally:
        for p in params:
            if not saved[p.name]:
                p.requires_grad = False
                p.grad = None
    return GradientSnapshot(task, np.concatenate(parts), layout)


def gradient_cosine_matrix(snaps) -> np.ndarray:
    """Pairwise cosine similarity; NaN marks rows/columns of zero gradients."""
    snaps = list(snaps)
    if len(snaps) < 2:
        raise ScopeError("need at least two snapshots")
    key = snaps[0].layout_key()
    if any(s.layout_key() != key for s in snaps[1:]):
        raise ScopeError("snapshots have different layouts")
    g = np.stack([s.vector for s in snaps])
    norms = np.linalg.norm(g, axis=1)
    out = np.full((len(snaps), len(snaps)), np.nan)
    ok = norms > 0
    gk = g[ok]
    sub = np.clip((gk @ gk.T) / np.outer(norms[ok], norms[ok]), -1.0, 1.0)
    np.fill_diagonal(sub, 1.0)
    out[np.ix_(ok, ok)] = sub
    return out


def layer_of(name: str) -> str:
    parts = name.split(".")
    if parts[0] == "blocks":
        return ".".join(parts[:2])
    return parts[0]


def gradient_magnitude_stats(snaps, bins: int = 28, log10_range: tuple = (-12.0, 2.0)) -> list[dict]:
    """L2 norm, per-layer norms and a log10-magnitude histogram per snapshot.

    Histogram counts have ``bins + 2`` entries: underflow (including exact
    zeros), the regular bins, overflow.
    """
    lo, hi = log10_range
    edges = np.linspace(lo, hi, bins + 1)
    out = []
    for s in snaps:
        mag = np.abs(s.vector)
        layers: dict[str, float] = {}
        for name, a, b in s.layout:
            key = layer_of(name)
            layers[key] = layers.get(key, 0.0) + float(np.sum(s.vector[a:b] ** 2))
        with np.errstate(divide="ignore"):
            lg = np.where(mag > 0, np.log10(np.where(mag > 0, mag, 1.0)), -np.inf)
        counts = np.zeros(bins + 2, dtype=np.int64)
        counts[0] = int(np.sum(lg < lo))
        counts[-1] = int(np.sum(lg >= hi))
        inside = lg[(lg >= lo) & (lg < hi)]
        counts[1:-1] = np.histogram(inside, bins=edges)[0]
        out.append({
            "task": s.task,
            "l2_norm": float(np.linalg.norm(s.vector)),
            "layer_norms": {k: float(np.sqrt(v)) for k, v in layers.items()},
            "hist_edges": edges,
            "hist_counts": counts,
        })
    return out


def _fmt(v: float) -> str:
    return UNDEFINED if not np.isfinite(v) else format(float(v), ".17g")


def write_cosine_csv(matrix: np.ndarray, labels, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["task_a", "task_b", "cosine"])
        for i, a in enumerate(labels):
            for j, b in enumerate(labels):
                w.writerow([a, b, _fmt(matrix[i, j])])


def write_magnitude_csv(stats, labels, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["task", "kind", "key", "value"])
        for label, st in zip(labels, stats):
            w.writerow([label, "l2_norm", "total", _fmt(st["l2_norm"])])
            for k, v in st["layer_norms"].items():
                w.writerow([label, "layer_norm", k, _fmt(v)])
            edges = st["hist_edges"]
            keys = ["underflow"] + [f"[{edges[i]:.3g},{edges[i + 1]:.3g})" for i in range(len(edges) - 1)] + ["overflow"]
            for k, c in zip(keys, st["hist_counts"]):
                w.writerow([label, "hist", k, int(c)])


def export_features(model: ModelState, samples, path, batch_size: int = 64) -> int:
    """Write pooled encoder features as TSV: task_id, sample_id, f0..f{d-1}.

    ``samples`` is an iterable of (task_id, sample_id, patches (C, J, w),
    channel_names). Consecutive samples of one task are batched together.
    """
    samples = list(samples)
    d = model.backbone.config.d
    rows = 0
    try:
        fh = open(path, "w", newline="")
    except OSError as exc:
        raise OSError(f"cannot write features to {path}: {exc}") from exc
    with fh:
        fh.write("\t".join(["task_id", "sample_id"] + [f"f{i}" for i in range(d)]) + "\n")
        i = 0
        while i < len(samples):
            task, names = samples[i][0], samples[i][3]
            j = i
            while j < len(samples) and j - i < batch_size and samples[j][0] == task and list(samples[j][3]) == list(names) \
                    and samples[j][2].shape == samples[i][2].shape:
                j += 1
            block = samples[i:j]
            with T.no_grad():
                feats = model.features(task, np.stack([s[2] for s in block]), list(names)).data
            for s, f in zip(block, feats):
                fh.write("\t".join([str(s[0]), str(s[1])] + [format(float(v), ".17g") for v in f]) + "\n")
                rows += 1
            i = j
    return rows
