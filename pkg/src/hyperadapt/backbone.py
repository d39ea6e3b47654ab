"""Small classification backbones evaluated under per-sample adapted weights."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import diffcore as dc


@dataclass(frozen=True)
class BackboneSpec:
    """``smallcnn``: stem conv, one conv+relu block per extra entry of
    ``channels``, global average pool, linear head. ``mlp``: ``dims`` lists
    input width, hidden widths and finally the class count."""

    kind: str = "smallcnn"
    input_shape: tuple[int, ...] = (3, 16, 16)
    channels: tuple[int, ...] = (8, 16, 16)
    kernel: int = 3
    dims: tuple[int, ...] = ()
    num_classes: int = 3

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(self.input_shape))
        object.__setattr__(self, "channels", tuple(self.channels))
        object.__setattr__(self, "dims", tuple(self.dims))
        if self.kind == "smallcnn":
            if len(self.input_shape) != 3 or min(self.input_shape) < 1:
                raise ValueError(f"smallcnn input_shape must be (C, H, W), got {self.input_shape}")
            if not self.channels or min(self.channels) < 1:
                raise ValueError("smallcnn needs at least the stem channel count")
            if self.kernel < 1 or self.kernel % 2 == 0:
                raise ValueError("kernel must be a positive odd integer")
            if self.num_classes < 1:
                raise ValueError("num_classes must be >= 1")
        elif self.kind == "mlp":
            if len(self.dims) < 2 or min(self.dims) < 1:
                raise ValueError(f"mlp dims must list at least input and output widths, got {self.dims}")
            object.__setattr__(self, "num_classes", self.dims[-1])
            object.__setattr__(self, "input_shape", (self.dims[0],))
        else:
            raise ValueError(f"unknown backbone kind {self.kind!r}")


@dataclass(frozen=True)
class Layer:
    id: str
    kind: str  # "conv" | "linear"
    dims: tuple[int, ...]  # (C_out, C_in, K_h, K_w) or (d_out, d_in)

    @property
    def out_dim(self) -> int:
        return self.dims[0]

    @property
    def in_dim(self) -> int:
        return self.dims[1]


def layers(spec: BackboneSpec) -> list[Layer]:
    """Weight-bearing layers in forward order; the first is the stem."""
    if spec.kind == "mlp":
        return [Layer(f"fc{i}" if i < len(spec.dims) - 2 else "head", "linear", (d_out, d_in))
                for i, (d_in, d_out) in enumerate(zip(spec.dims[:-1], spec.dims[1:]))]
    k = spec.kernel
    out = []
    c_in = spec.input_shape[0]
    for i, c_out in enumerate(spec.channels):
        out.append(Layer("stem" if i == 0 else f"block{i}", "conv", (c_out, c_in, k, k)))
        c_in = c_out
    out.append(Layer("head", "linear", (spec.num_classes, c_in)))
    return out


@dataclass
class ModelState:
    """Backbone parameters ``theta``, adapter parameters ``phi`` and the set
    of frozen parameter names."""

    spec: BackboneSpec
    theta: dict[str, np.ndarray]
    phi: dict[str, np.ndarray] = field(default_factory=dict)
    frozen: frozenset = frozenset()

    @property
    def params(self) -> dict[str, np.ndarray]:
        return {**self.theta, **self.phi}

    def replace(self, **changes) -> "ModelState":
        return dataclasses.replace(self, **changes)

    def num_backbone_params(self) -> int:
        return int(sum(v.size for v in self.theta.values()))


def build_backbone(spec: BackboneSpec, seed: int) -> ModelState:
    """Fan-in scaled uniform weights (He bound), zero biases."""
    rng = np.random.default_rng(seed)
    theta = {}
    for layer in layers(spec):
        fan_in = int(np.prod(layer.dims[1:]))
        bound = np.sqrt(6.0 / fan_in)
        theta[f"bb/{layer.id}/w"] = rng.uniform(-bound, bound, size=layer.dims)
        theta[f"bb/{layer.id}/b"] = np.zeros(layer.out_dim)
    return ModelState(spec, theta)


def _linear(h, w, b, extra=None):
    # W (d_out, d_in) or per-sample (N, d_out, d_in); same batched product either way
    n, d_in = h.shape
    y = dc.reshape(dc.matmul(w, dc.reshape(h, (n, d_in, 1))), (n, w.shape[-2]))
    if extra is not None:
        y = y + extra
    return y + b


def forward_adapted(state: ModelState, offsets: Mapping | None, x, params: Mapping | None = None,
                    return_features: bool = False, head_extra=None):
    """Logits ``(N, num_classes)`` under per-sample adapted weights.

    ``offsets`` maps layer ids to :class:`~hyperadapt.adapters.LayerOffset`
    values whose leading axis is the batch; ``None`` runs the plain
    backbone. ``params`` optionally supplies graph nodes for theta so that
    gradients flow into them. With ``return_features`` the pooled
    penultimate features are returned as well. ``head_extra`` is added to
    the head's pre-bias output (used for late fusion of side information).
    """
    from .adapters import adapted_weight

    spec = state.spec
    nodes = {k: dc.as_node(v) for k, v in (params if params is not None else state.theta).items()
             if k.startswith("bb/")}
    h = dc.as_node(x)
    if h.shape[1:] != spec.input_shape:
        raise dc.ShapeError(f"batch shape {h.shape[1:]} does not match backbone input {spec.input_shape}")
    offsets = offsets or {}
    known = {layer.id for layer in layers(spec)}
    unknown = set(offsets) - known
    if unknown:
        raise KeyError(f"offsets for unknown layers {sorted(unknown)}")
    features = None
    for layer in layers(spec):
        w = nodes[f"bb/{layer.id}/w"]
        if layer.id in offsets:
            w = adapted_weight(layer, w, offsets[layer.id])
        b = nodes[f"bb/{layer.id}/b"]
        if layer.kind == "conv":
            h = dc.relu(dc.conv2d(h, w, "same") + dc.reshape(b, (1, layer.out_dim, 1, 1)))
        else:
            if h.value.ndim == 4:
                h = dc.mean(h, axis=(2, 3))
            if layer.id == "head":
                features = h
                h = _linear(h, w, b, head_extra)
            else:
                h = dc.relu(_linear(h, w, b))
    if return_features:
        return h, features
    return h
