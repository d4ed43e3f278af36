"""Low-rank adapters for multi-task fine-tuning of a frozen encoder.

Three ways of composing rank-r updates of a frozen linear map W0 (m x n):

* ``sp``  one (A_p, B_p) pair per task;        y = W0 x + B_p A_p x + b0
* ``rt``  S shared experts mixed by a router;  y = W0 x + sum_i w_i B_i A_i x + b0
* ``dc``  shared A, one B_p per task;          y = W0 x + B_p A x + b0

The update is never scaled (no alpha/r factor). Tasks are numbered from 1.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from mteeg import tensor as T
from mteeg.tensor import Parameter, Tensor

VARIANTS = ("sp", "rt", "dc")
INIT_STD = 0.02


class TaskError(IndexError):
    pass


class StateError(RuntimeError):
    pass


@dataclass
class LoraPair:
    A: Parameter  # (r, n) down-projection
    B: Parameter  # (m, r) up-projection

    @property
    def r(self) -> int:
        return self.A.shape[0]


@dataclass
class Router:
    weight: Parameter  # (S, n)
    bias: Parameter  # (S,)

    def __call__(self, pooled: Tensor) -> Tensor:
        logits = T.add(T.matmul(pooled, T.transpose(self.weight, (1, 0))), self.bias)
        return T.softmax(logits, axis=-1)


@dataclass
class AdapterSet:
    variant: str
    layer: str
    r: int
    pairs: list[LoraPair] = field(default_factory=list)  # sp: one per task, rt: one per expert
    down: Parameter | None = None  # dc shared A
    ups: list[Parameter] = field(default_factory=list)  # dc B_1..B_P
    router: Router | None = None

    @property
    def n_tasks(self) -> int:
        return len(self.ups) if self.variant == "dc" else len(self.pairs)

    def parameters(self) -> list[Parameter]:
        out: list[Parameter] = []
        for pair in self.pairs:
            out += [pair.A, pair.B]
        if self.down is not None:
            out.append(self.down)
        out += self.ups
        if self.router is not None:
            out += [self.router.weight, self.router.bias]
        return out

    def task_parameters(self, p: int) -> list[Parameter]:
        """Parameters that take part in the forward pass for task ``p``."""
        if self.variant == "sp":
            pair = self.pairs[_check_task(p, len(self.pairs))]
            return [pair.A, pair.B]
        if self.variant == "dc":
            return [self.down, self.ups[_check_task(p, len(self.ups))]]
        return self.parameters()


def _check_task(p, count: int) -> int:
    if p is None or not 1 <= int(p) <= count:
        raise TaskError(f"task {p} out of range 1..{count}")
    return int(p) - 1


def make_adapter_set(variant: str, layer: str, m: int, n: int, r: int, n_tasks: int, n_experts: int | None = None) -> AdapterSet:
    """Allocate an all-zero adapter set for an (m x n) layer."""
    variant = variant.lower()
    if variant not in VARIANTS:
        raise ValueError(f"unknown adapter variant {variant!r}")
    if not 1 <= r <= min(m, n):
        raise ValueError(f"rank {r} must lie in 1..{min(m, n)} for a {m}x{n} layer")
    if n_tasks < 1:
        raise ValueError("need at least one task")
    aset = AdapterSet(variant, layer, r)
    if variant == "sp":
        aset.pairs = [
            LoraPair(Parameter(np.zeros((r, n)), f"{layer}.lora.A{i}"), Parameter(np.zeros((m, r)), f"{layer}.lora.B{i}"))
            for i in range(1, n_tasks + 1)
        ]
    elif variant == "rt":
        s = n_tasks if n_experts is None else n_experts
        if s < 1:
            raise ValueError("need at least one expert")
        aset.pairs = [
            LoraPair(Parameter(np.zeros((r, n)), f"{layer}.lora.A{i}"), Parameter(np.zeros((m, r)), f"{layer}.lora.B{i}"))
            for i in range(1, s + 1)
        ]
        aset.router = Router(Parameter(np.zeros((s, n)), f"{layer}.router.weight"), Parameter(np.zeros(s), f"{layer}.router.bias"))
    else:
        aset.down = Parameter(np.zeros((r, n)), f"{layer}.lora.A")
        aset.ups = [Parameter(np.zeros((m, r)), f"{layer}.lora.B{i}") for i in range(1, n_tasks + 1)]
    return aset


def init_adapters(aset: AdapterSet, seed) -> AdapterSet:
    """A ~ N(0, 0.02^2), B = 0, router weights ~ N(0, 0.02^2), router bias 0."""
    rng = np.random.default_rng(seed)
    downs = [pair.A for pair in aset.pairs] + ([aset.down] if aset.down is not None else [])
    ups = [pair.B for pair in aset.pairs] + aset.ups
    for a in downs:
        a.data[...] = rng.normal(0.0, INIT_STD, a.shape)
    for b in ups:
        b.data[...] = 0.0
    if aset.router is not None:
        aset.router.weight.data[...] = rng.normal(0.0, INIT_STD, aset.router.weight.shape)
        aset.router.bias.data[...] = 0.0
    return aset


# -----------------------------------------------------------------------------
# forward passes
# -----------------------------------------------------------------------------


def _base(x: Tensor, w0: Tensor, b0: Tensor) -> Tensor:
    return T.add(T.matmul(x, T.transpose(w0, (1, 0))), b0)


def _lowrank(x: Tensor, a: Tensor, b: Tensor) -> Tensor:
    return T.matmul(T.matmul(x, T.transpose(a, (1, 0))), T.transpose(b, (1, 0)))


def _as_tokens(x: Tensor) -> tuple[Tensor, tuple]:
    shape = x.shape
    if x.ndim == 1:
        return T.reshape(x, (1, 1, shape[0])), shape
    if x.ndim == 2:
        return T.reshape(x, (1,) + shape), shape
    return x, shape


def forward_sp(x, layer, aset: AdapterSet, p: int) -> Tensor:
    """W0 x + B_p (A_p x) + b0; ``layer`` is (W0, b0)."""
    x = T.as_tensor(x)
    w0, b0 = layer
    pair = aset.pairs[_check_task(p, len(aset.pairs))]
    return T.add(_base(x, w0, b0), _lowrank(x, pair.A, pair.B))


def forward_dc(x, layer, aset: AdapterSet, p: int) -> Tensor:
    """W0 x + B_p (A x) + b0 with A shared by all tasks."""
    x = T.as_tensor(x)
    w0, b0 = layer
    up = aset.ups[_check_task(p, len(aset.ups))]
    return T.add(_base(x, w0, b0), _lowrank(x, aset.down, up))


def router_weights(x, aset: AdapterSet) -> Tensor:
    """Per-sample expert weights (B, S) from the token-mean of the layer input."""
    xt, _ = _as_tokens(T.as_tensor(x))
    return aset.router(T.mean(xt, axis=1))


def forward_rt(x, layer, aset: AdapterSet, omega=None) -> Tensor:
    """W0 x + sum_i w_i B_i (A_i x) + b0, one weight vector per sample.

    ``omega`` fixes the mixture weights ((S,) or (B, S)) instead of the router.
    """
    x = T.as_tensor(x)
    w0, b0 = layer
    xt, shape = _as_tokens(x)
    bsz = xt.shape[0]
    s = len(aset.pairs)
    if omega is None:
        w = router_weights(xt, aset)
    else:
        w = np.broadcast_to(np.asarray(omega, dtype=np.float64), (bsz, s))
        w = Tensor(w)
    out = _base(xt, w0, b0)
    for i, pair in enumerate(aset.pairs):
        wi = T.reshape(_column(w, i), (bsz, 1, 1))
        out = T.add(out, T.mul(_lowrank(xt, pair.A, pair.B), wi))
    return T.reshape(out, shape[:-1] + (w0.shape[0],))


def _column(w: Tensor, i: int) -> Tensor:
    onehot = np.zeros((w.shape[-1], 1))
    onehot[i, 0] = 1.0
    return T.matmul(w, Tensor(onehot))


def adapted_linear(x, w0, b0, aset: AdapterSet | None, task=None, omega=None) -> Tensor:
    """Dispatch a linear layer through its adapter set, if any."""
    if aset is None:
        return _base(T.as_tensor(x), w0, b0)
    if aset.variant == "sp":
        return forward_sp(x, (w0, b0), aset, task)
    if aset.variant == "dc":
        return forward_dc(x, (w0, b0), aset, task)
    return forward_rt(x, (w0, b0), aset, omega)


def merged_weight(w0, aset: AdapterSet, p: int | None = None, omega=None) -> np.ndarray:
    """W0 + delta W as an explicit matrix (for checks, not for inference)."""
    w0 = np.asarray(getattr(w0, "data", w0))
    if aset.variant == "sp":
        pair = aset.pairs[_check_task(p, len(aset.pairs))]
        return w0 + pair.B.data @ pair.A.data
    if aset.variant == "dc":
        return w0 + aset.ups[_check_task(p, len(aset.ups))].data @ aset.down.data
    if omega is None:
        raise ValueError("rt merge needs fixed mixture weights")
    omega = np.asarray(omega, dtype=np.float64)
    return w0 + sum(wi * (pair.B.data @ pair.A.data) for wi, pair in zip(omega, aset.pairs))


# -----------------------------------------------------------------------------
# model-level operations
# -----------------------------------------------------------------------------


def attach(model, variant: str, r: int = 8, locations: str = "both", n_experts: int | None = None, seed: int = 0):
    """Give every linear layer in ``locations`` an initialized AdapterSet.

    ``model`` is a ModelState with a frozen backbone and no adapters yet.
    """
    from mteeg.backbone import linear_layer_names

    if model.adapters:
        raise StateError("adapters already attached")
    if any(not p.frozen for p in model.backbone.params.values()):
        raise StateError("backbone must be frozen before attaching adapters")
    variant = variant.lower()
    n_tasks = len(model.tasks)
    for idx, name in enumerate(linear_layer_names(model.backbone.config, locations)):
        w, _ = model.backbone.linear(name)
        m, n = w.shape
        aset = make_adapter_set(variant, name, m, n, r, n_tasks, n_experts)
        model.adapters[name] = init_adapters(aset, (seed, idx))
    model.variant = variant
    model.adapter_config = {"r": int(r), "locations": locations.lower(),
                            "n_experts": int(n_experts if n_experts is not None else n_tasks)}
    return model


def adapter_param_count(variant: str, m: int, n: int, r: int, n_tasks: int, n_experts: int | None = None) -> int:
    """Closed-form trainable parameter count of one adapted (m x n) layer."""
    if variant == "sp":
        return n_tasks * r * (m + n)
    if variant == "dc":
        return r * n + n_tasks * r * m
    if variant == "rt":
        s = n_tasks if n_experts is None else n_experts
        return s * r * (m + n) + s * (n + 1)
    raise ValueError(f"unknown adapter variant {variant!r}")


def head_param_count(tasks, d: int) -> int:
    return sum((d + 1) * t.head_outputs for t in tasks)


def count_trainable_params(model) -> int:
    """Adapter parameters from the closed forms plus all head parameters.

    In HPS mode (no adapters) every backbone parameter is trainable.
    """
    d = model.backbone.config.d
    heads = head_param_count(model.tasks, d)
    if model.variant == "hps":
        return sum(p.data.size for p in model.backbone.params.values()) + heads
    if not model.adapters:
        raise StateError("no adapters attached")
    n_tasks = len(model.tasks)
    total = 0
    for name, aset in model.adapters.items():
        m, n = model.backbone.linear(name)[0].shape
        total += adapter_param_count(aset.variant, m, n, aset.r, n_tasks, len(aset.pairs) if aset.variant == "rt" else None)
    return total + heads
