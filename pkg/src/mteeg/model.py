"""Task registry and the full multi-task model state."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from mteeg import tensor as T
from mteeg.adapters import AdapterSet, TaskError, attach
from mteeg.backbone import Backbone, BackboneConfig, encoder_forward, init_backbone, pool_features
from mteeg.tensor import Parameter, Tensor

LOSSES = ("binary-ce", "multiclass-ce")
MODEL_VARIANTS = ("hps", "sp", "rt", "dc")


@dataclass(frozen=True)
class TaskSpec:
    id: int
    name: str
    num_classes: int
    loss: str = ""
    channels: int = 1
    duration_s: float = 1.0
    subsample_fraction: float = 1.0

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("a task needs at least two classes")
        loss = self.loss or ("binary-ce" if self.num_classes == 2 else "multiclass-ce")
        object.__setattr__(self, "loss", loss)
        if loss not in LOSSES:
            raise ValueError(f"unknown loss {loss!r}")
        if (loss == "binary-ce") != (self.num_classes == 2):
            raise ValueError("binary-ce is used exactly for two-class tasks")
        if not 0.0 < self.subsample_fraction <= 1.0:
            raise ValueError("subsample_fraction must lie in (0, 1]")

    @property
    def binary(self) -> bool:
        return self.loss == "binary-ce"

    @property
    def head_outputs(self) -> int:
        # binary heads emit one logit for the positive class
        return 1 if self.binary else self.num_classes


@dataclass
class ModelState:
    backbone: Backbone
    tasks: list[TaskSpec]
    variant: str = "hps"
    adapters: dict[str, AdapterSet] = field(default_factory=dict)
    heads: dict[int, tuple[Parameter, Parameter]] = field(default_factory=dict)
    adapter_config: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def task(self, p: int) -> TaskSpec:
        for t in self.tasks:
            if t.id == p:
                return t
        raise TaskError(f"no task with id {p}")

    def head(self, p: int) -> tuple[Parameter, Parameter]:
        if p not in self.heads:
            raise TaskError(f"no head registered for task {p}")
        return self.heads[p]

    def parameters(self) -> dict[str, Parameter]:
        out = dict(self.backbone.params)
        for aset in self.adapters.values():
            for prm in aset.parameters():
                out[prm.name] = prm
        for w, b in self.heads.values():
            out[w.name] = w
            out[b.name] = b
        return out

    def trainable(self) -> list[Parameter]:
        return [p for p in self.parameters().values() if not p.frozen]

    def adapter_parameters(self) -> list[Parameter]:
        return [p for aset in self.adapters.values() for p in aset.parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.zero_grad()

    def features(self, p: int, patches, channel_names, router_override=None) -> Tensor:
        """Pooled encoder features (B, d) for a batch of task ``p``."""
        tokens = encoder_forward(self.backbone, (patches, channel_names), self.adapters or None, p, router_override)
        return pool_features(tokens)

    def logits(self, p: int, patches, channel_names, router_override=None) -> Tensor:
        w, b = self.head(p)
        feats = self.features(p, patches, channel_names, router_override)
        return T.add(T.matmul(feats, T.transpose(w, (1, 0))), b)

    def loss(self, p: int, patches, channel_names, labels) -> Tensor:
        z = self.logits(p, patches, channel_names)
        if self.task(p).binary:
            return T.binary_cross_entropy_with_logits(z, labels)
        return T.cross_entropy(z, labels)

    def predict_scores(self, p: int, patches, channel_names) -> np.ndarray:
        """Class probabilities (B, K), no graph recorded."""
        with T.no_grad():
            z = self.logits(p, patches, channel_names).data
        if self.task(p).binary:
            pos = 0.5 * (1.0 + np.tanh(0.5 * z[:, 0]))
            return np.stack([1.0 - pos, pos], axis=1)
        e = np.exp(z - z.max(axis=1, keepdims=True))
        return e / e.sum(axis=1, keepdims=True)


def frozen_hash(model: ModelState) -> str:
    """SHA-256 over every frozen tensor, in name order."""
    h = hashlib.sha256()
    for name, p in sorted(model.parameters().items()):
        if p.frozen:
            h.update(name.encode())
            h.update(p.data.tobytes())
    return h.hexdigest()


def init_heads(model: ModelState, seed: int = 0) -> None:
    rng = np.random.default_rng((seed, 7919))
    d = model.backbone.config.d
    for t in model.tasks:
        w = Parameter(rng.normal(0.0, 0.02, (t.head_outputs, d)), f"head.{t.id}.weight")
        b = Parameter(np.zeros(t.head_outputs), f"head.{t.id}.bias")
        model.heads[t.id] = (w, b)


def build_model(cfg: BackboneConfig, tasks, variant: str = "dc", r: int = 8, locations: str = "both",
                n_experts: int | None = None, seed: int = 0, backbone: Backbone | None = None) -> ModelState:
    """Fresh model: frozen backbone plus adapters, or a trainable trunk for HPS.

    A supplied ``backbone`` is copied, never shared.
    """
    variant = variant.lower()
    if variant not in MODEL_VARIANTS:
        raise ValueError(f"variant must be one of {MODEL_VARIANTS}, got {variant!r}")
    ids = [t.id for t in tasks]
    if ids != list(range(1, len(tasks) + 1)):
        raise ValueError("task ids must be 1..P in order")
    if backbone is None:
        bb = init_backbone(cfg, seed=seed, frozen=True)
    else:
        bb = Backbone(backbone.config, {k: Parameter(v.data.copy(), k, frozen=True) for k, v in backbone.params.items()})
    model = ModelState(bb, list(tasks))
    if variant == "hps":
        bb.set_frozen(False)
        model.variant = "hps"
    else:
        attach(model, variant, r=r, locations=locations, n_experts=n_experts, seed=seed)
    init_heads(model, seed)
    return model
