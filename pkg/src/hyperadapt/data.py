"""Synthetic subgroup-shifted datasets, their Bayes oracle, stratified splits
and CSV ingestion."""
from __future__ import annotations

import csv
import re
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import logsumexp

from .attributes import MISSING, AttributeSchema, AttributeSpec, is_missing, validate_record
from .hashing import canonical_json, hex_digest


@dataclass(frozen=True)
class SyntheticConfig:
    """Gaussian class-conditionals ``x = mu_y + delta_g + noise * N(0, I)``.

    ``class_means`` is ``(C, F)``; when omitted, class ``y`` lights up the
    ``y``-th block of ``F // C`` features with height ``mean_scale``.
    ``group_shifts`` is ``(G, F)``; when omitted, group ``g`` is moved by
    ``shift * g / (G - 1)`` along ``mu_1 - mu_0`` (ordinal, growing shifts).
    """

    num_groups: int = 3
    num_classes: int = 3
    feature_dim: int = 12
    group_sizes: tuple[int, ...] = (2400, 1200, 400)
    class_priors: tuple[tuple[float, ...], ...] | None = None
    class_means: tuple[tuple[float, ...], ...] | None = None
    group_shifts: tuple[tuple[float, ...], ...] | None = None
    mean_scale: float = 1.0
    shift: float = 1.0
    noise: float = 0.8
    rendering: str = "image"
    image_shape: tuple[int, int, int] = (3, 16, 16)
    missing_rate: float = 0.0
    age_base: float = 45.0
    age_per_shift: float = 15.0
    age_noise: float = 8.0
    group_embed_dim: int = 4

    def __post_init__(self):
        def tup(x):
            return None if x is None else tuple(tuple(float(v) for v in row) for row in x)
        object.__setattr__(self, "group_sizes", tuple(int(n) for n in self.group_sizes))
        object.__setattr__(self, "image_shape", tuple(self.image_shape))
        for name in ("class_priors", "class_means", "group_shifts"):
            object.__setattr__(self, name, tup(getattr(self, name)))
        if self.num_groups < 1 or self.num_classes < 1 or self.feature_dim < 1:
            raise ValueError("num_groups, num_classes and feature_dim must be >= 1")
        if len(self.group_sizes) != self.num_groups or min(self.group_sizes) < 1:
            raise ValueError("group_sizes needs one entry >= 1 per group")
        if not self.noise > 0:
            raise ValueError("noise must be > 0")
        if not 0.0 <= self.missing_rate < 1.0:
            raise ValueError("missing_rate must lie in [0, 1)")
        if self.rendering not in ("vector", "image"):
            raise ValueError(f"rendering must be 'vector' or 'image', got {self.rendering!r}")
        priors = self.priors()
        if priors.shape != (self.num_groups, self.num_classes) or np.any(priors < 0) \
                or np.any(np.abs(priors.sum(axis=1) - 1.0) > 1e-9):
            raise ValueError("class_priors must hold one probability vector per group")
        if self.means().shape != (self.num_classes, self.feature_dim):
            raise ValueError("class_means must be (num_classes, feature_dim)")
        if self.shifts().shape != (self.num_groups, self.feature_dim):
            raise ValueError("group_shifts must be (num_groups, feature_dim)")

    def priors(self) -> np.ndarray:
        if self.class_priors is None:
            return np.full((self.num_groups, self.num_classes), 1.0 / self.num_classes)
        return np.array(self.class_priors)

    def means(self) -> np.ndarray:
        if self.class_means is not None:
            return np.array(self.class_means)
        mu = np.zeros((self.num_classes, self.feature_dim))
        block = max(self.feature_dim // self.num_classes, 1)
        for y in range(self.num_classes):
            start = (y * block) % self.feature_dim
            mu[y, start:start + block] = self.mean_scale
        return mu

    def shifts(self) -> np.ndarray:
        if self.group_shifts is not None:
            return np.array(self.group_shifts)
        delta = np.zeros((self.num_groups, self.feature_dim))
        if self.num_groups > 1 and self.num_classes > 1:
            mu = self.means()
            for g in range(self.num_groups):
                delta[g] = self.shift * g / (self.num_groups - 1) * (mu[1] - mu[0])
        return delta

    def group_weights(self) -> np.ndarray:
        sizes = np.array(self.group_sizes, dtype=float)
        return sizes / sizes.sum()

    def schema(self) -> AttributeSchema:
        return AttributeSchema((
            AttributeSpec("group", "categorical", cardinality=self.num_groups, embed_dim=self.group_embed_dim),
            AttributeSpec("age", "continuous"),
        ))


@dataclass
class Dataset:
    features: np.ndarray      # (N, F) raw feature vectors
    inputs: np.ndarray        # (N, *input_shape) rendered model inputs
    labels: np.ndarray
    groups: np.ndarray
    records: list[dict]
    schema: AttributeSchema
    num_classes: int
    num_groups: int

    def __len__(self):
        return len(self.labels)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.features[idx], self.inputs[idx], self.labels[idx], self.groups[idx],
                       [self.records[i] for i in idx], self.schema, self.num_classes, self.num_groups)

    def hash(self) -> str:
        """64-bit FNV-1a over features, labels, groups and records."""
        records = [{k: (None if is_missing(v) else v) for k, v in r.items()} for r in self.records]
        blob = b"".join([
            np.ascontiguousarray(self.features, dtype="<f8").tobytes(),
            np.ascontiguousarray(self.labels, dtype="<i8").tobytes(),
            np.ascontiguousarray(self.groups, dtype="<i8").tobytes(),
            canonical_json(records).encode(),
        ])
        return hex_digest(blob)


def _grid(q: int) -> tuple[int, int]:
    gh = int(np.floor(np.sqrt(q)))
    while q % gh:
        gh -= 1
    return gh, q // gh


def render_image(features: np.ndarray, shape: Sequence[int]) -> np.ndarray:
    """Tile ``(N, F)`` features into ``(N, C, H, W)`` images.

    Each channel holds ``F // C`` features laid out as constant blocks on a
    near-square grid.
    """
    c, h, w = shape
    n, f = features.shape
    if f % c:
        raise ValueError(f"feature_dim {f} is not divisible by {c} channels")
    gh, gw = _grid(f // c)
    if h % gh or w % gw:
        raise ValueError(f"image {h}x{w} cannot be tiled by a {gh}x{gw} grid")
    grid = features.reshape(n, c, gh, gw)
    return np.repeat(np.repeat(grid, h // gh, axis=2), w // gw, axis=3)


def render(features: np.ndarray, rendering: str, image_shape=(3, 16, 16)) -> np.ndarray:
    if rendering == "vector":
        return np.array(features, dtype=np.float64)
    if rendering == "image":
        return render_image(features, image_shape)
    raise ValueError(f"unknown rendering {rendering!r}")


def generate(config: SyntheticConfig, seed: int) -> Dataset:
    rng = np.random.default_rng(seed)
    mu, delta, priors = config.means(), config.shifts(), config.priors()
    feats, labels, groups, records = [], [], [], []
    for g, n_g in enumerate(config.group_sizes):
        y = rng.choice(config.num_classes, size=n_g, p=priors[g])
        x = mu[y] + delta[g] + config.noise * rng.standard_normal((n_g, config.feature_dim))
        age = config.age_base + config.age_per_shift * np.linalg.norm(delta[g]) \
            + config.age_noise * rng.standard_normal(n_g)
        drop = rng.random((n_g, 2)) < config.missing_rate
        for i in range(n_g):
            records.append({
                "group": MISSING if drop[i, 0] else g,
                "age": MISSING if drop[i, 1] else float(age[i]),
            })
        feats.append(x)
        labels.append(y)
        groups.append(np.full(n_g, g))
    features = np.concatenate(feats)
    return Dataset(features, render(features, config.rendering, config.image_shape),
                   np.concatenate(labels).astype(np.int64), np.concatenate(groups).astype(np.int64),
                   records, config.schema(), config.num_classes, config.num_groups)


@dataclass(frozen=True)
class BayesAccuracy:
    aware: float
    blind: float
    aware_per_group: tuple[float, ...]
    blind_per_group: tuple[float, ...]
    aware_stderr: float
    blind_stderr: float
    gap_stderr: float
    num_samples: int

    @property
    def gap(self) -> float:
        return self.aware - self.blind


def class_log_likelihood(x: np.ndarray, config: SyntheticConfig) -> np.ndarray:
    """``log pi_g(y) + log N(x; mu_y + delta_g, noise^2 I)`` as ``(N, G, C)``, up to a constant."""
    mu, delta = config.means(), config.shifts()
    centers = mu[None, :, :] + delta[:, None, :]           # (G, C, F)
    sq = ((x[:, None, None, :] - centers[None]) ** 2).sum(axis=-1)
    with np.errstate(divide="ignore"):
        log_prior = np.log(config.priors())
    return log_prior[None] - sq / (2.0 * config.noise ** 2)


def bayes_accuracy(config: SyntheticConfig, num_mc: int, seed: int) -> BayesAccuracy:
    """Monte-Carlo accuracy of the group-aware and group-blind Bayes classifiers."""
    rng = np.random.default_rng(seed)
    weights = config.group_weights()
    mu, delta, priors = config.means(), config.shifts(), config.priors()
    g = rng.choice(config.num_groups, size=num_mc, p=weights)
    # inverse-CDF draw of each sample's class from its group's prior
    cdf = np.cumsum(priors, axis=1)
    y = np.minimum((rng.random(num_mc)[:, None] >= cdf[g]).sum(axis=1), config.num_classes - 1)
    x = mu[y] + delta[g] + config.noise * rng.standard_normal((num_mc, config.feature_dim))
    ll = class_log_likelihood(x, config)
    aware_pred = np.argmax(ll[np.arange(num_mc), g], axis=1)
    blind_pred = np.argmax(logsumexp(ll + np.log(weights)[None, :, None], axis=1), axis=1)
    aware_ok = aware_pred == y
    blind_ok = blind_pred == y
    per_group = lambda ok: tuple(float(ok[g == k].mean()) if np.any(g == k) else float("nan")
                                 for k in range(config.num_groups))
    diff = aware_ok.astype(float) - blind_ok.astype(float)
    return BayesAccuracy(
        aware=float(aware_ok.mean()),
        blind=float(blind_ok.mean()),
        aware_per_group=per_group(aware_ok),
        blind_per_group=per_group(blind_ok),
        aware_stderr=float(aware_ok.std() / np.sqrt(num_mc)),
        blind_stderr=float(blind_ok.std() / np.sqrt(num_mc)),
        gap_stderr=float(diff.std() / np.sqrt(num_mc)),
        num_samples=num_mc,
    )


@dataclass(frozen=True)
class SplitSet:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray


def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def split(dataset: Dataset, seed: int, ratios=(0.6, 0.2, 0.2)) -> SplitSet:
    """Stratified by (group, class); each cell is cut 6:2:2 after a seeded shuffle."""
    if len(dataset) == 0:
        raise ValueError("cannot split an empty dataset")
    rng = np.random.default_rng(seed)
    parts = ([], [], [])
    cells = sorted(set(zip(dataset.groups.tolist(), dataset.labels.tolist())))
    for g, y in cells:
        idx = np.flatnonzero((dataset.groups == g) & (dataset.labels == y))
        if len(idx) < 5:
            warnings.warn(f"cell (group={g}, class={y}) has only {len(idx)} samples; split is best effort")
        idx = rng.permutation(idx)
        n_train = _round_half_up(ratios[0] * len(idx))
        n_val = min(_round_half_up(ratios[1] * len(idx)), len(idx) - n_train)
        parts[0].append(idx[:n_train])
        parts[1].append(idx[n_train:n_train + n_val])
        parts[2].append(idx[n_train + n_val:])
    return SplitSet(*(np.sort(np.concatenate(p)).astype(np.int64) for p in parts))


class CSVFormatError(ValueError):
    pass


_FEATURE_COLUMN = re.compile(r"^f\d+$")


def load_csv(path, schema: AttributeSchema, num_classes: int, rendering: str = "vector",
             image_shape=(3, 16, 16), label_column: str = "label",
             group_attribute: str | None = None) -> Dataset:
    """Read a UTF-8 CSV with schema columns, feature columns ``f0, f1, ...``
    and a label column. Empty cells and ``NA`` are MISSING.

    The group id of each sample is taken from ``group_attribute`` (default:
    the first categorical attribute), which must be observed in every row.
    """
    if group_attribute is None:
        if not schema.categorical:
            raise ValueError("schema needs a categorical attribute to define groups")
        group_attribute = schema.categorical[0].name
    group_spec = schema[group_attribute]
    with open(Path(path), newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise CSVFormatError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        feature_cols = [h for h in header if _FEATURE_COLUMN.match(h)]
        feature_cols.sort(key=lambda h: int(h[1:]))
        for h in header:
            if h not in schema.names and h != label_column and h not in feature_cols:
                raise CSVFormatError(f"{path}: unknown column {h!r}")
        for name in schema.names + [label_column]:
            if name not in header:
                raise CSVFormatError(f"{path}: missing column {name!r}")
        if not feature_cols:
            raise CSVFormatError(f"{path}: no feature columns (expected f0, f1, ...)")
        pos = {h: i for i, h in enumerate(header)}
        feats, labels, records = [], [], []
        for row_no, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise CSVFormatError(f"{path}: row {row_no} has {len(row)} cells, expected {len(header)}")
            try:
                record = {}
                for spec in schema.attributes:
                    cell = row[pos[spec.name]].strip()
                    if cell == "" or cell == "NA":
                        record[spec.name] = MISSING
                    elif spec.kind == "categorical":
                        record[spec.name] = int(cell)
                    else:
                        record[spec.name] = float(cell)
                x = [float(row[pos[h]]) for h in feature_cols]
                label = int(row[pos[label_column]])
            except ValueError as exc:
                raise CSVFormatError(f"{path}: row {row_no}: {exc}") from None
            if not 0 <= label < num_classes:
                raise CSVFormatError(f"{path}: row {row_no}: label {label} outside [0, {num_classes})")
            problems = validate_record(schema, record)
            if problems:
                raise CSVFormatError(f"{path}: row {row_no}: {problems[0].attribute}: {problems[0].problem}")
            if is_missing(record[group_attribute]):
                raise CSVFormatError(f"{path}: row {row_no}: group attribute {group_attribute!r} is missing")
            if not np.all(np.isfinite(x)):
                raise CSVFormatError(f"{path}: row {row_no}: non-finite feature")
            feats.append(x)
            labels.append(label)
            records.append(record)
    features = np.array(feats, dtype=np.float64).reshape(len(feats), len(feature_cols))
    groups = np.array([r[group_attribute] for r in records], dtype=np.int64)
    return Dataset(features, render(features, rendering, image_shape), np.array(labels, dtype=np.int64),
                   groups, records, schema, num_classes, group_spec.cardinality)
