"""Toy-scale LaBraM-style encoder.

Patches go through a stack of (conv1d -> group norm -> GELU) blocks and a
linear projection to ``d``; temporal and spatial embeddings are added and the
tokens pass through pre-norm transformer blocks whose attention normalizes
queries and keys before the dot product.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from mteeg import tensor as T
from mteeg.adapters import adapted_linear
from mteeg.preprocessing import PatchGrid
from mteeg.tensor import Parameter, Tensor

# 10-20 / 10-10 electrode labels; spatial rows follow this order, synthetic
# channels "S<i>" take reserved rows after it.
STANDARD_1020 = [
    "FP1", "FPZ", "FP2", "AF9", "AF7", "AF5", "AF3", "AF1", "AFZ", "AF2", "AF4", "AF6", "AF8", "AF10",
    "F9", "F7", "F5", "F3", "F1", "FZ", "F2", "F4", "F6", "F8", "F10",
    "FT9", "FT7", "FC5", "FC3", "FC1", "FCZ", "FC2", "FC4", "FC6", "FT8", "FT10",
    "T9", "T7", "C5", "C3", "C1", "CZ", "C2", "C4", "C6", "T8", "T10",
    "TP9", "TP7", "CP5", "CP3", "CP1", "CPZ", "CP2", "CP4", "CP6", "TP8", "TP10",
    "P9", "P7", "P5", "P3", "P1", "PZ", "P2", "P4", "P6", "P8", "P10",
    "PO9", "PO7", "PO5", "PO3", "PO1", "POZ", "PO2", "PO4", "PO6", "PO8", "PO10",
    "O1", "OZ", "O2", "O9", "CB1", "CB2", "IZ", "O10", "T3", "T5", "T4", "T6", "M1", "M2", "A1", "A2",
]
_STD_INDEX = {name: i for i, name in enumerate(STANDARD_1020)}


class ChannelLookupError(KeyError):
    pass


@dataclass(frozen=True)
class BackboneConfig:
    d: int = 64
    heads: int = 4
    layers: int = 4
    conv_blocks: int = 3
    group_norm_groups: int = 4
    max_patches: int = 64
    max_channels: int = 160
    patch_len: int = 200
    conv_channels: int = 8
    conv_kernels: tuple = ((15, 8), (3, 1), (3, 1))  # (kernel, stride) per block
    mlp_ratio: int = 4
    eps: float = 1e-5

    def __post_init__(self):
        for name in ("d", "heads", "layers", "conv_blocks", "group_norm_groups", "max_patches",
                     "max_channels", "patch_len", "conv_channels", "mlp_ratio"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.d % self.heads:
            raise ValueError(f"d={self.d} not divisible by heads={self.heads}")
        if self.conv_channels % self.group_norm_groups:
            raise ValueError("conv_channels must be divisible by group_norm_groups")
        if self.max_channels <= len(STANDARD_1020):
            raise ValueError(f"max_channels must exceed the {len(STANDARD_1020)} standard labels")
        self.conv_out_len()

    @property
    def d_p(self) -> int:
        return self.d // self.heads

    @property
    def hidden(self) -> int:
        return self.d * self.mlp_ratio

    def kernel_plan(self) -> list[tuple[int, int]]:
        plan = [tuple(k) for k in self.conv_kernels[: self.conv_blocks]]
        while len(plan) < self.conv_blocks:
            plan.append((3, 1))
        return plan

    def conv_out_len(self) -> int:
        length = self.patch_len
        for k, s in self.kernel_plan():
            out = (length + 2 * (k // 2) - k) // s + 1
            if out < 1:
                raise ValueError(f"patch length {self.patch_len} too short for conv stack")
            length = out
        return length


def channel_row(label: str, cfg: BackboneConfig, synthetic_fallback: bool = True) -> int:
    key = label.strip().upper()
    if key in _STD_INDEX:
        return _STD_INDEX[key]
    if synthetic_fallback and key.startswith("S") and key[1:].isdigit():
        row = len(STANDARD_1020) + int(key[1:])
        if row < cfg.max_channels:
            return row
    raise ChannelLookupError(f"no spatial embedding for channel {label!r}")


@dataclass
class EmbeddingTables:
    temporal: Parameter  # (max_patches, d)
    spatial: Parameter  # (max_channels, d)
    config: BackboneConfig

    def rows(self, channel_names) -> np.ndarray:
        return np.array([channel_row(c, self.config) for c in channel_names], dtype=np.intp)


def linear_layer_names(cfg: BackboneConfig, locations: str = "both") -> list[str]:
    """Names of the transformer linear layers eligible for adapters."""
    loc = locations.lower()
    if loc not in ("mhsa", "ffn", "both"):
        raise ValueError(f"locations must be mhsa, ffn or both, got {locations!r}")
    names = []
    for layer in range(cfg.layers):
        if loc in ("mhsa", "both"):
            names += [f"blocks.{layer}.attn.{p}" for p in ("q", "k", "v", "o")]
        if loc in ("ffn", "both"):
            names += [f"blocks.{layer}.ffn.{p}" for p in ("fc1", "fc2")]
    return names


@dataclass
class Backbone:
    config: BackboneConfig
    params: dict[str, Parameter] = field(default_factory=dict)

    @property
    def tables(self) -> EmbeddingTables:
        return EmbeddingTables(self.params["emb.temporal"], self.params["emb.spatial"], self.config)

    def linear(self, name: str) -> tuple[Parameter, Parameter]:
        return self.params[f"{name}.weight"], self.params[f"{name}.bias"]

    def set_frozen(self, frozen: bool) -> None:
        for p in self.params.values():
            p.set_frozen(frozen)


def init_backbone(cfg: BackboneConfig, seed: int = 0, frozen: bool = True) -> Backbone:
    rng = np.random.default_rng(seed)
    params: dict[str, Parameter] = {}

    def add(name, value):
        params[name] = Parameter(value, name, frozen=frozen)

    cin = 1
    for i, (k, _) in enumerate(cfg.kernel_plan()):
        add(f"te.conv{i}.weight", rng.normal(0.0, 1.0 / math.sqrt(cin * k), (cfg.conv_channels, cin, k)))
        add(f"te.conv{i}.bias", np.zeros(cfg.conv_channels))
        add(f"te.gn{i}.gamma", np.ones(cfg.conv_channels))
        add(f"te.gn{i}.beta", np.zeros(cfg.conv_channels))
        cin = cfg.conv_channels
    flat = cfg.conv_channels * cfg.conv_out_len()
    add("te.proj.weight", rng.normal(0.0, 1.0 / math.sqrt(flat), (cfg.d, flat)))
    add("te.proj.bias", np.zeros(cfg.d))
    add("emb.temporal", rng.normal(0.0, 0.02, (cfg.max_patches, cfg.d)))
    add("emb.spatial", rng.normal(0.0, 0.02, (cfg.max_channels, cfg.d)))

    d, hid = cfg.d, cfg.hidden
    for layer in range(cfg.layers):
        pre = f"blocks.{layer}"
        for ln in ("ln1", "ln2"):
            add(f"{pre}.{ln}.gamma", np.ones(d))
            add(f"{pre}.{ln}.beta", np.zeros(d))
        for proj in ("q", "k", "v", "o"):
            add(f"{pre}.attn.{proj}.weight", rng.normal(0.0, 1.0 / math.sqrt(d), (d, d)))
            add(f"{pre}.attn.{proj}.bias", np.zeros(d))
        for norm in ("qnorm", "knorm"):
            add(f"{pre}.attn.{norm}.gamma", np.ones(cfg.d_p))
            add(f"{pre}.attn.{norm}.beta", np.zeros(cfg.d_p))
        add(f"{pre}.ffn.fc1.weight", rng.normal(0.0, 1.0 / math.sqrt(d), (hid, d)))
        add(f"{pre}.ffn.fc1.bias", np.zeros(hid))
        add(f"{pre}.ffn.fc2.weight", rng.normal(0.0, 1.0 / math.sqrt(hid), (d, hid)))
        add(f"{pre}.ffn.fc2.bias", np.zeros(d))
    add("norm.gamma", np.ones(d))
    add("norm.beta", np.zeros(d))
    return Backbone(cfg, params)


def _as_batch(x) -> tuple[np.ndarray, list[str], bool]:
    if isinstance(x, PatchGrid):
        return x.patches[None], list(x.channel_names), True
    patches, names = x
    patches = np.asarray(patches, dtype=np.float64)
    if patches.ndim == 3:
        return patches[None], list(names), True
    return patches, list(names), False


def temporal_encode(backbone: Backbone, patches) -> Tensor:
    """Map every patch independently to a d-vector.

    ``patches`` is a PatchGrid or a (B, C, J, w) array; returns (C*J, d) for a
    grid and (B, C*J, d) for a batch.
    """
    cfg = backbone.config
    p = backbone.params
    if isinstance(patches, PatchGrid):
        arr, single = patches.patches[None], True
    else:
        arr = np.asarray(patches, dtype=np.float64)
        single = arr.ndim == 3
        if single:
            arr = arr[None]
    b, c, j, w = arr.shape
    if c * j == 0:
        raise T.ShapeError("empty patch grid")
    if w != cfg.patch_len:
        raise T.ShapeError(f"patch length {w} does not match encoder patch_len {cfg.patch_len}")
    h = Tensor(arr.reshape(b * c * j, 1, w))
    for i, (k, s) in enumerate(cfg.kernel_plan()):
        h = T.conv1d(h, p[f"te.conv{i}.weight"], p[f"te.conv{i}.bias"], stride=s, padding=k // 2)
        h = T.group_norm(h, cfg.group_norm_groups, p[f"te.gn{i}.gamma"], p[f"te.gn{i}.beta"], cfg.eps)
        h = T.gelu(h)
    h = T.reshape(h, (b * c * j, -1))
    h = T.add(T.matmul(h, T.transpose(p["te.proj.weight"], (1, 0))), p["te.proj.bias"])
    out = T.reshape(h, (b, c * j, cfg.d))
    return T.reshape(out, (c * j, cfg.d)) if single else out


def attention(q: Tensor, k: Tensor, v: Tensor, qnorm=None, knorm=None, eps: float = 1e-5, return_weights: bool = False):
    """softmax(LN(Q) LN(K)^T / sqrt(d_p)) V over the last two axes.

    ``qnorm``/``knorm`` are (gamma, beta) pairs for the layer norms.
    """
    dp = q.shape[-1]
    qn = T.layer_norm(q, *(qnorm or (None, None)), eps=eps)
    kn = T.layer_norm(k, *(knorm or (None, None)), eps=eps)
    logits = T.scale(T.matmul(qn, T.transpose(kn, tuple(range(kn.ndim - 2)) + (kn.ndim - 1, kn.ndim - 2))), 1.0 / math.sqrt(dp))
    weights = T.softmax(logits, axis=-1)
    out = T.matmul(weights, v)
    return (out, weights) if return_weights else out


def _block(backbone: Backbone, layer: int, x: Tensor, adapters, task, router_override=None) -> Tensor:
    cfg = backbone.config
    p = backbone.params
    pre = f"blocks.{layer}"
    b, n, d = x.shape
    hd, dp = cfg.heads, cfg.d_p

    def lin(name, inp):
        w, bias = backbone.linear(name)
        aset = adapters.get(name) if adapters else None
        omega = router_override.get(name) if router_override else None
        return adapted_linear(inp, w, bias, aset, task, omega)

    h = T.layer_norm(x, p[f"{pre}.ln1.gamma"], p[f"{pre}.ln1.beta"], cfg.eps)

    def heads(t):
        return T.transpose(T.reshape(t, (b, n, hd, dp)), (0, 2, 1, 3))

    q = heads(lin(f"{pre}.attn.q", h))
    k = heads(lin(f"{pre}.attn.k", h))
    v = heads(lin(f"{pre}.attn.v", h))
    a = attention(
        q, k, v,
        (p[f"{pre}.attn.qnorm.gamma"], p[f"{pre}.attn.qnorm.beta"]),
        (p[f"{pre}.attn.knorm.gamma"], p[f"{pre}.attn.knorm.beta"]),
        cfg.eps,
    )
    a = T.reshape(T.transpose(a, (0, 2, 1, 3)), (b, n, d))
    x = T.add(x, lin(f"{pre}.attn.o", a))
    h = T.layer_norm(x, p[f"{pre}.ln2.gamma"], p[f"{pre}.ln2.beta"], cfg.eps)
    h = lin(f"{pre}.ffn.fc2", T.gelu(lin(f"{pre}.ffn.fc1", h)))
    return T.add(x, h)


def encoder_forward(backbone: Backbone, x, adapters=None, task=None, router_override=None) -> Tensor:
    """Full encoder. ``x`` is a PatchGrid (returns (C*J, d)) or a
    ``(patches (B, C, J, w), channel_names)`` pair (returns (B, C*J, d)).

    ``adapters`` maps linear-layer names to AdapterSets; ``task`` selects the
    task-specific adapters (1-based). ``router_override`` optionally maps layer
    names to fixed (B, S) mixture weights for RT adapters.
    """
    cfg = backbone.config
    patches, names, single = _as_batch(x)
    b, c, j, _ = patches.shape
    if j > cfg.max_patches:
        raise IndexError(f"{j} patches exceed temporal table size {cfg.max_patches}")
    tables = backbone.tables
    rows = tables.rows(names)
    tok = temporal_encode(backbone, patches)
    pos = T.add(T.take_rows(tables.temporal, np.tile(np.arange(j), c)), T.take_rows(tables.spatial, np.repeat(rows, j)))
    h = T.add(tok, pos)
    for layer in range(cfg.layers):
        h = _block(backbone, layer, h, adapters, task, router_override)
    h = T.layer_norm(h, backbone.params["norm.gamma"], backbone.params["norm.beta"], cfg.eps)
    return T.reshape(h, (c * j, cfg.d)) if single else h


def pool_features(tokens: Tensor) -> Tensor:
    """Mean over the token axis: (N, d) -> (d,), (B, N, d) -> (B, d)."""
    if tokens.shape[-2] < 1:
        raise T.ShapeError("pooling needs at least one token")
    return T.mean(tokens, axis=-2)
