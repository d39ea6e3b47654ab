"""Patient attribute schema, validation and the categorical/continuous embedder."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Mapping, NamedTuple, Sequence

import numpy as np

from . import diffcore as dc


class _Missing:
    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self):
        return "MISSING"

    def __reduce__(self):
        return (_Missing, ())


MISSING = _Missing()


def is_missing(value) -> bool:
    return value is MISSING


@dataclass(frozen=True)
class AttributeSpec:
    name: str
    kind: str  # "categorical" | "continuous"
    cardinality: int | None = None
    embed_dim: int | None = None
    median: float = 0.0
    scale: float = 1.0

    def __post_init__(self):
        if self.kind == "categorical":
            if self.cardinality is None or self.cardinality < 1:
                raise ValueError(f"{self.name}: cardinality must be >= 1")
            if self.embed_dim is None:
                object.__setattr__(self, "embed_dim", 4)
            if self.embed_dim < 1:
                raise ValueError(f"{self.name}: embed_dim must be >= 1")
        elif self.kind == "continuous":
            if not self.scale > 0:
                raise ValueError(f"{self.name}: scale must be > 0")
        else:
            raise ValueError(f"{self.name}: unknown attribute kind {self.kind!r}")


@dataclass(frozen=True)
class AttributeSchema:
    attributes: tuple[AttributeSpec, ...]

    def __post_init__(self):
        object.__setattr__(self, "attributes", tuple(self.attributes))
        names = [a.name for a in self.attributes]
        if len(set(names)) != len(names):
            raise ValueError(f"attribute names must be unique: {names}")

    @property
    def names(self) -> list[str]:
        return [a.name for a in self.attributes]

    @property
    def categorical(self) -> list[AttributeSpec]:
        return [a for a in self.attributes if a.kind == "categorical"]

    @property
    def continuous(self) -> list[AttributeSpec]:
        return [a for a in self.attributes if a.kind == "continuous"]

    def __getitem__(self, name: str) -> AttributeSpec:
        for a in self.attributes:
            if a.name == name:
                return a
        raise KeyError(name)

    def to_dict(self):
        return [dataclasses.asdict(a) for a in self.attributes]

    @classmethod
    def from_dict(cls, items: Sequence[Mapping]):
        return cls(tuple(AttributeSpec(**dict(item)) for item in items))


class RecordViolation(NamedTuple):
    attribute: str
    problem: str


def validate_record(schema: AttributeSchema, record: Mapping) -> list[RecordViolation]:
    """Return every way ``record`` disagrees with ``schema``; empty means valid."""
    problems = []
    for name in record:
        if name not in schema.names:
            problems.append(RecordViolation(name, "not in schema"))
    for spec in schema.attributes:
        if spec.name not in record:
            problems.append(RecordViolation(spec.name, "absent (use MISSING for unknown values)"))
            continue
        value = record[spec.name]
        if is_missing(value):
            continue
        if spec.kind == "categorical":
            if isinstance(value, (bool, np.bool_)) or not isinstance(value, (int, np.integer)):
                problems.append(RecordViolation(spec.name, f"expected category index, got {value!r}"))
            elif not 0 <= value < spec.cardinality:
                problems.append(RecordViolation(spec.name, f"index {value} out of range [0, {spec.cardinality})"))
        else:
            if isinstance(value, (bool, np.bool_)) or not isinstance(value, (int, float, np.integer, np.floating)):
                problems.append(RecordViolation(spec.name, f"expected real value, got {value!r}"))
            elif not np.isfinite(value):
                problems.append(RecordViolation(spec.name, "non-finite value"))
    return problems


def encode_continuous(schema: AttributeSchema, record: Mapping) -> np.ndarray:
    """Per continuous attribute: normalized median-imputed value, then missing indicator."""
    out = []
    for spec in schema.continuous:
        value = record[spec.name]
        if is_missing(value):
            out += [0.0, 1.0]
        else:
            out += [(float(value) - spec.median) / spec.scale, 0.0]
    return np.array(out, dtype=dc.DTYPE)


def encode_categorical(schema: AttributeSchema, record: Mapping) -> np.ndarray:
    """Lookup row per categorical attribute; MISSING maps to row ``cardinality``."""
    return np.array([spec.cardinality if is_missing(record[spec.name]) else int(record[spec.name])
                     for spec in schema.categorical], dtype=np.int64)


@dataclass
class EncodedAttributes:
    categorical: np.ndarray  # (N, n_categorical) int
    continuous: np.ndarray   # (N, 2 * n_continuous)

    def __len__(self):
        return len(self.categorical)

    def take(self, idx) -> "EncodedAttributes":
        return EncodedAttributes(self.categorical[idx], self.continuous[idx])


def encode_records(schema: AttributeSchema, records: Sequence[Mapping]) -> EncodedAttributes:
    n = len(records)
    cat = np.zeros((n, len(schema.categorical)), dtype=np.int64)
    cont = np.zeros((n, 2 * len(schema.continuous)), dtype=dc.DTYPE)
    for i, rec in enumerate(records):
        cat[i] = encode_categorical(schema, rec)
        cont[i] = encode_continuous(schema, rec)
    return EncodedAttributes(cat, cont)


def fit_normalization(schema: AttributeSchema, records: Sequence[Mapping]) -> AttributeSchema:
    """Freeze median and scale of every continuous attribute from ``records``.

    Scale is the interquartile range over 1.349 (the normal-consistent
    value), falling back to the standard deviation and then 1.
    """
    specs = []
    for spec in schema.attributes:
        if spec.kind == "continuous":
            values = np.array([r[spec.name] for r in records if not is_missing(r[spec.name])], dtype=float)
            if values.size:
                median = float(np.median(values))
                q75, q25 = np.percentile(values, [75, 25])
                scale = float((q75 - q25) / 1.349)
                if not scale > 0:
                    scale = float(values.std()) or 1.0
                spec = dataclasses.replace(spec, median=median, scale=scale)
        specs.append(spec)
    return AttributeSchema(tuple(specs))


# ----------------------------------------------------------------- embedder

def _uniform(rng, fan_in, shape):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_embedder(schema: AttributeSchema, rng: np.random.Generator, embed_dim: int = 16,
                  cont_hidden: int = 16, fusion_hidden: int = 32) -> dict[str, np.ndarray]:
    params = {}
    width = 0
    for spec in schema.categorical:
        # the extra final row is the MISSING embedding, drawn like the others
        params[f"embed/cat/{spec.name}"] = rng.normal(0.0, 1.0, size=(spec.cardinality + 1, spec.embed_dim))
        width += spec.embed_dim
    n_cont = 2 * len(schema.continuous)
    if n_cont:
        params["embed/cont/w"] = _uniform(rng, n_cont, (n_cont, cont_hidden))
        params["embed/cont/b"] = np.zeros(cont_hidden)
        width += cont_hidden
    if width == 0:
        raise ValueError("schema has no attributes to embed")
    params["embed/fuse/w1"] = _uniform(rng, width, (width, fusion_hidden))
    params["embed/fuse/b1"] = np.zeros(fusion_hidden)
    params["embed/fuse/w2"] = _uniform(rng, fusion_hidden, (fusion_hidden, embed_dim)) / np.sqrt(2.0)
    params["embed/fuse/b2"] = np.zeros(embed_dim)
    return params


def embedder_dim(params: Mapping) -> int:
    return np.shape(params["embed/fuse/b2"])[0]


def embed_batch(schema: AttributeSchema, encoded: EncodedAttributes, params: Mapping) -> dc.Node:
    """Fused patient embeddings ``(N, dim)`` for a batch of encoded records."""
    p = {k: dc.as_node(v) for k, v in params.items() if k.startswith("embed/")}
    parts = []
    for j, spec in enumerate(schema.categorical):
        parts.append(dc.gather(p[f"embed/cat/{spec.name}"], encoded.categorical[:, j]))
    if schema.continuous:
        cont = dc.constant(encoded.continuous)
        parts.append(dc.relu(cont @ p["embed/cont/w"] + p["embed/cont/b"]))
    z = parts[0] if len(parts) == 1 else dc.concat(parts, axis=1)
    hidden = dc.relu(z @ p["embed/fuse/w1"] + p["embed/fuse/b1"])
    return hidden @ p["embed/fuse/w2"] + p["embed/fuse/b2"]


def embed_patient(schema: AttributeSchema, record: Mapping, params: Mapping) -> np.ndarray:
    """Embedding vector of a single validated record."""
    enc = encode_records(schema, [record])
    return embed_batch(schema, enc, params).value[0]
