"""Patient-conditioned offset generators.

Each adapted layer receives its offset from small generator networks fed
with the patient embedding. Linear layers get an additive low-rank offset
``W + A @ B``; conv kernels get a channel-wise multiplicative modulation
``Theta[i, j] * (1 + M[i, j])`` with ``M = A @ B``. With sharing enabled,
layers of the same kind and output width draw ``A`` from one generator.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import diffcore as dc
from .backbone import BackboneSpec, Layer, layers

DEPTH_POLICIES = ("none", "head_only", "last_stage", "all_but_stem", "all")


@dataclass(frozen=True)
class LayerEntry:
    id: str
    kind: str
    dims: tuple[int, ...]
    adapt: bool

    @property
    def out_dim(self) -> int:
        return self.dims[0]

    @property
    def in_dim(self) -> int:
        return self.dims[1]

    @property
    def layer(self) -> Layer:
        return Layer(self.id, self.kind, self.dims)


@dataclass(frozen=True)
class AdapterConfig:
    rank: int = 2
    conv_mode: str = "channelwise"   # "channelwise" | "dense"
    linear_mode: str = "lowrank"     # "lowrank" | "dense"
    # factor the channel modulation matrix as A @ B; otherwise generate M whole
    lowrank_modulation: bool = True
    sharing: bool = True
    hidden: int = 32
    depth: str = "all_but_stem"

    def __post_init__(self):
        if self.rank < 1:
            raise ValueError("rank must be >= 1")
        if self.conv_mode not in ("channelwise", "dense"):
            raise ValueError(f"conv_mode must be 'channelwise' or 'dense', got {self.conv_mode!r}")
        if self.linear_mode not in ("lowrank", "dense"):
            raise ValueError(f"linear_mode must be 'lowrank' or 'dense', got {self.linear_mode!r}")
        if self.hidden < 1:
            raise ValueError("hidden must be >= 1")
        if self.depth not in DEPTH_POLICIES:
            raise ValueError(f"unknown depth policy {self.depth!r}; choose from {DEPTH_POLICIES}")


def build_registry(spec: BackboneSpec, depth: str) -> list[LayerEntry]:
    all_layers = layers(spec)
    n = len(all_layers)
    if depth == "none":
        chosen = set()
    elif depth == "head_only":
        chosen = {n - 1}
    elif depth == "last_stage":
        chosen = {n - 2, n - 1} if n > 2 else {n - 1}
    elif depth == "all_but_stem":
        chosen = set(range(1, n))
    elif depth == "all":
        chosen = set(range(n))
    else:
        raise ValueError(f"unknown depth policy {depth!r}; choose from {DEPTH_POLICIES}")
    return [LayerEntry(layer.id, layer.kind, layer.dims, i in chosen) for i, layer in enumerate(all_layers)]


def group_shared(registry: Sequence[LayerEntry]) -> dict[tuple[str, int], list[str]]:
    """Adapted layers keyed by (kind, output width); kinds never share."""
    groups: dict[tuple[str, int], list[str]] = {}
    for entry in registry:
        if entry.adapt:
            groups.setdefault((entry.kind, entry.out_dim), []).append(entry.id)
    return groups


def _form(entry: LayerEntry, config: AdapterConfig) -> str:
    """How the offset of ``entry`` is parameterized: lowrank, full or dense."""
    if entry.kind == "linear":
        return "lowrank" if config.linear_mode == "lowrank" else "dense"
    if config.conv_mode == "dense":
        return "dense"
    return "lowrank" if config.lowrank_modulation else "full"


@dataclass(frozen=True)
class Slot:
    """One generator network producing a flattened factor."""

    name: str
    out_size: int
    zero_init: bool


def slots(registry: Sequence[LayerEntry], config: AdapterConfig) -> tuple[list[Slot], dict]:
    """Generator slots and, per adapted layer, the slot names it consumes."""
    k = config.rank
    out: dict[str, Slot] = {}
    wiring: dict[str, dict[str, str]] = {}
    for entry in registry:
        if not entry.adapt:
            continue
        form = _form(entry, config)
        if form == "lowrank":
            if config.sharing:
                a_name = f"A/{entry.kind}{entry.out_dim}"
            else:
                a_name = f"A/{entry.id}"
            out.setdefault(a_name, Slot(a_name, entry.out_dim * k, True))
            b_name = f"B/{entry.id}"
            out[b_name] = Slot(b_name, k * entry.in_dim, False)
            wiring[entry.id] = {"A": a_name, "B": b_name}
        elif form == "full":
            name = f"M/{entry.id}"
            out[name] = Slot(name, entry.out_dim * entry.in_dim, True)
            wiring[entry.id] = {"full": name}
        else:
            name = f"D/{entry.id}"
            out[name] = Slot(name, int(np.prod(entry.dims)), True)
            wiring[entry.id] = {"full": name}
    return list(out.values()), wiring


def init_generators(registry: Sequence[LayerEntry], config: AdapterConfig, embed_dim: int,
                    rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Hidden layer per slot, then a linear map to the flattened factor.

    Slots feeding ``A`` (and every full or dense offset) start with a zero
    output layer so every generated offset is exactly zero at init. ``B``
    slots start random, otherwise ``A @ B`` would sit at a saddle.
    """
    params = {}
    h = config.hidden
    for slot in slots(registry, config)[0]:
        bound = np.sqrt(6.0 / embed_dim)
        params[f"gen/{slot.name}/w1"] = rng.uniform(-bound, bound, size=(embed_dim, h))
        params[f"gen/{slot.name}/b1"] = np.zeros(h)
        if slot.zero_init:
            params[f"gen/{slot.name}/w2"] = np.zeros((h, slot.out_size))
        else:
            b2 = 1.0 / np.sqrt(h)
            params[f"gen/{slot.name}/w2"] = rng.uniform(-b2, b2, size=(h, slot.out_size))
        params[f"gen/{slot.name}/b2"] = np.zeros(slot.out_size)
    return params


@dataclass
class LayerOffset:
    """Generated offset for one layer, batched over patients.

    Low-rank offsets carry ``A`` ``(N, out, k)`` and ``B`` ``(N, k, in)``;
    full channel modulations and dense offsets carry ``full`` instead.
    """

    kind: str
    form: str
    A: dc.Node | None = None
    B: dc.Node | None = None
    full: dc.Node | None = None


OffsetSet = dict  # layer id -> LayerOffset


def check_rank(registry: Sequence[LayerEntry], config: AdapterConfig):
    for entry in registry:
        if entry.adapt and _form(entry, config) == "lowrank" and config.rank > min(entry.out_dim, entry.in_dim):
            raise ValueError(f"rank {config.rank} exceeds min dimension of layer {entry.id} {entry.dims[:2]}")


def generate_offsets(e, params: Mapping, registry: Sequence[LayerEntry], config: AdapterConfig) -> OffsetSet:
    e = dc.as_node(e)
    if e.value.ndim != 2:
        raise dc.ShapeError(f"patient embeddings must be (N, dim), got {e.shape}")
    check_rank(registry, config)
    n = e.shape[0]
    k = config.rank
    p = {key: dc.as_node(v) for key, v in params.items() if key.startswith("gen/")}
    slot_list, wiring = slots(registry, config)
    flat = {}
    for slot in slot_list:
        hidden = dc.relu(e @ p[f"gen/{slot.name}/w1"] + p[f"gen/{slot.name}/b1"])
        flat[slot.name] = hidden @ p[f"gen/{slot.name}/w2"] + p[f"gen/{slot.name}/b2"]
    offsets = {}
    for entry in registry:
        if not entry.adapt:
            continue
        form = _form(entry, config)
        wires = wiring[entry.id]
        if form == "lowrank":
            A = dc.reshape(flat[wires["A"]], (n, entry.out_dim, k))
            B = dc.reshape(flat[wires["B"]], (n, k, entry.in_dim))
            offsets[entry.id] = LayerOffset(entry.kind, form, A=A, B=B)
        elif form == "full":
            M = dc.reshape(flat[wires["full"]], (n, entry.out_dim, entry.in_dim))
            offsets[entry.id] = LayerOffset(entry.kind, form, full=M)
        else:
            D = dc.reshape(flat[wires["full"]], (n,) + entry.dims)
            offsets[entry.id] = LayerOffset(entry.kind, form, full=D)
    return offsets


def apply_linear(W, A, B) -> dc.Node:
    """``W + A @ B``; ``A``/``B`` may carry a leading batch axis."""
    W, A, B = dc.as_node(W), dc.as_node(A), dc.as_node(B)
    if A.shape[-2] != W.shape[-2] or B.shape[-1] != W.shape[-1] or A.shape[-1] != B.shape[-2]:
        raise dc.ShapeError(f"factor shapes {A.shape} @ {B.shape} do not fit weight {W.shape}")
    return W + dc.lowrank_product(A, B)


def apply_modulation(theta, M) -> dc.Node:
    """Scale every spatial slice ``theta[i, j]`` by ``1 + M[i, j]``."""
    theta, M = dc.as_node(theta), dc.as_node(M)
    if M.shape[-2:] != theta.shape[-4:-2]:
        raise dc.ShapeError(f"modulation {M.shape} does not fit kernel {theta.shape}")
    return theta * (dc.reshape(M, M.shape + (1, 1)) + 1.0)


def apply_conv(theta, A, B) -> dc.Node:
    A, B = dc.as_node(A), dc.as_node(B)
    if A.shape[-1] != B.shape[-2]:
        raise dc.ShapeError(f"factor shapes {A.shape} @ {B.shape} are incompatible")
    return apply_modulation(theta, dc.lowrank_product(A, B))


def adapted_weight(layer, w, offset: LayerOffset) -> dc.Node:
    if offset.form == "lowrank":
        if layer.kind == "linear":
            return apply_linear(w, offset.A, offset.B)
        return apply_conv(w, offset.A, offset.B)
    if offset.form == "full":
        return apply_modulation(w, offset.full)
    return w + offset.full


# ------------------------------------------------------------- accounting

@dataclass(frozen=True)
class LayerCount:
    id: str
    kind: str
    form: str
    dense: int      # size of a full weight offset for the layer
    factored: int   # k * (out + in) for low-rank layers, else the generated size
    generated: int  # outputs this layer's own slots produce (shared A counted once overall)


@dataclass(frozen=True)
class ParameterCount:
    layers: tuple[LayerCount, ...]
    generator_params: int
    generated: int
    dense_equivalent: int
    slots: int = 0
    per_slot: dict = field(default_factory=dict, compare=False)

    def to_dict(self):
        return {
            "generator_params": self.generator_params,
            "generated": self.generated,
            "dense_equivalent": self.dense_equivalent,
            "slots": self.slots,
            "layers": [dataclasses.asdict(c) for c in self.layers],
        }


def count_parameters(registry: Sequence[LayerEntry], config: AdapterConfig, embed_dim: int = 16) -> ParameterCount:
    k, h = config.rank, config.hidden
    slot_list, wiring = slots(registry, config)
    sizes = {s.name: s.out_size for s in slot_list}
    rows = []
    for entry in registry:
        if not entry.adapt:
            continue
        form = _form(entry, config)
        dense = int(np.prod(entry.dims))
        if form == "lowrank":
            factored = k * (entry.out_dim + entry.in_dim)
        else:
            factored = sizes[wiring[entry.id]["full"]]
        own = sum(sizes[name] for name in wiring[entry.id].values())
        rows.append(LayerCount(entry.id, entry.kind, form, dense, factored, own))
    per_slot = {s.name: embed_dim * h + h + h * s.out_size + s.out_size for s in slot_list}
    return ParameterCount(
        layers=tuple(rows),
        generator_params=int(sum(per_slot.values())),
        generated=int(sum(sizes.values())),
        dense_equivalent=int(sum(r.dense for r in rows)),
        slots=len(slot_list),
        per_slot=per_slot,
    )
