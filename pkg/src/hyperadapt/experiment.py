"""Experiment configs, multi-seed runs, rank/depth sweeps, the component
ablation and embedding export. Reports are deterministic JSON files."""
from __future__ import annotations

import csv
import dataclasses
import json
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import yaml

from .adapters import DEPTH_POLICIES, AdapterConfig, build_registry, check_rank, count_parameters
from .attributes import AttributeSchema
from .backbone import BackboneSpec
from .data import Dataset, SyntheticConfig, generate, load_csv, split
from .hashing import canonical_json, hex_digest
from .metrics import linear_probe, write_embeddings_csv
from .training import (METHODS, EmbedderConfig, GroupModels, MethodResult, Model, TaskData, TrainConfig,
                       TrainHistory, predict_features, prepare_task, pretrain_model, run_method, train)

LAYER_TAGS = ("patient", "penultimate")
SCALAR_METRICS = ("accuracy", "precision", "recall", "f1", "worst_group_f1", "worst_group_accuracy",
                  "eopp0", "eopp1", "eodds")
ABLATION_ROWS = (
    ("dense", dict(conv_mode="dense", linear_mode="dense", sharing=False)),
    ("channelwise", dict(conv_mode="channelwise", lowrank_modulation=False, linear_mode="dense", sharing=False)),
    ("channelwise+lowrank", dict(conv_mode="channelwise", lowrank_modulation=True, linear_mode="lowrank",
                                 sharing=False)),
    ("channelwise+lowrank+sharing", dict(conv_mode="channelwise", lowrank_modulation=True,
                                         linear_mode="lowrank", sharing=True)),
)


class ConfigError(ValueError):
    """Invalid experiment configuration; ``field`` names the offending key."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}" if field else message)
        self.field = field


class RunFailure(RuntimeError):
    def __init__(self, method: str, seed: int, cause: Exception):
        super().__init__(f"{method} (seed {seed}) failed: {cause}")
        self.method, self.seed = method, seed


# ------------------------------------------------------------------ config

@dataclass(frozen=True)
class CSVSource:
    path: str
    schema: tuple
    num_classes: int
    rendering: str = "vector"
    image_shape: tuple = (3, 16, 16)
    label_column: str = "label"
    group_attribute: str | None = None

    def attribute_schema(self) -> AttributeSchema:
        return AttributeSchema.from_dict(self.schema)


@dataclass(frozen=True)
class SweepGrid:
    ranks: tuple[int, ...] = (1, 2)
    depths: tuple[str, ...] = ("head_only", "last_stage", "all_but_stem", "all")


@dataclass(frozen=True)
class AblationConfig:
    param_cap: int = 50_000_000


@dataclass(frozen=True)
class ExperimentConfig:
    seeds: tuple[int, ...] = (0, 1, 2)
    methods: tuple[str, ...] = ("vanilla", "group_models", "concat_fusion", "hyperadapt")
    synthetic: SyntheticConfig | None = None
    csv: CSVSource | None = None
    backbone: BackboneSpec = field(default_factory=BackboneSpec)
    adapter: AdapterConfig = field(default_factory=AdapterConfig)
    embedder: EmbedderConfig = field(default_factory=EmbedderConfig)
    pretrain: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=12, lr=3e-3, stage="pretrain"))
    adapt: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=12, lr=1e-2, stage="adapt"))
    sweep: SweepGrid = field(default_factory=SweepGrid)
    ablation: AblationConfig = field(default_factory=AblationConfig)
    output_dir: str = "runs"

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def resolved(self) -> dict:
        """Every setting with defaults filled in; the output directory is left
        out so that relocating a run does not change its hash."""
        out = {}
        for f in dataclasses.fields(self):
            if f.name == "output_dir":
                continue
            value = getattr(self, f.name)
            out[f.name] = dataclasses.asdict(value) if dataclasses.is_dataclass(value) else value
        return json.loads(json.dumps(out))  # tuples become lists

    def hash(self) -> str:
        return hex_digest(canonical_json(self.resolved()).encode())


def _build(cls, raw, where: str, **fixed):
    if raw is None:
        raw = {}
    if not isinstance(raw, Mapping):
        raise ConfigError(where, f"expected a mapping, got {type(raw).__name__}")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"{where}.{unknown[0]}", f"unknown key (allowed: {', '.join(sorted(known))})")
    kwargs = {**dict(raw), **fixed}
    for key, value in kwargs.items():
        if isinstance(value, list):
            kwargs[key] = tuple(tuple(v) if isinstance(v, list) else v for v in value)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(where, str(exc)) from None


def _mapping(raw: Mapping, key: str) -> dict:
    value = raw.get(key) or {}
    if not isinstance(value, Mapping):
        raise ConfigError(key, f"expected a mapping, got {type(value).__name__}")
    return dict(value)


def parse_config(raw: Mapping, base_dir: str | Path = ".") -> ExperimentConfig:
    """Validate a config mapping into an :class:`ExperimentConfig`."""
    if raw is None:
        raw = {}
    if not isinstance(raw, Mapping):
        raise ConfigError("", "config must be a mapping at top level")
    top = {f.name for f in dataclasses.fields(ExperimentConfig)}
    unknown = sorted(set(raw) - top)
    if unknown:
        raise ConfigError(unknown[0], f"unknown key (allowed: {', '.join(sorted(top))})")
    if "synthetic" in raw and "csv" in raw:
        raise ConfigError("csv", "give either a synthetic config or a csv source, not both")

    seeds = raw.get("seeds", [0, 1, 2])
    if isinstance(seeds, int):
        seeds = [seeds]
    if not isinstance(seeds, list) or not seeds or not all(isinstance(s, int) and s >= 0 for s in seeds):
        raise ConfigError("seeds", "need a non-empty list of non-negative integers")
    methods = raw.get("methods", list(ExperimentConfig.methods))
    if not isinstance(methods, list) or not methods:
        raise ConfigError("methods", "need a non-empty list")
    for m in methods:
        if m not in METHODS:
            raise ConfigError("methods", f"unknown method {m!r}; choose from {', '.join(METHODS)}")

    if "csv" in raw:
        source = raw["csv"]
        if not isinstance(source, Mapping) or "path" not in source:
            raise ConfigError("csv.path", "required")
        path = Path(source["path"])
        if not path.is_absolute():
            path = Path(base_dir) / path
        csv_cfg = _build(CSVSource, {**source, "path": str(path)}, "csv")
        try:
            csv_cfg.attribute_schema()
        except (TypeError, ValueError) as exc:
            raise ConfigError("csv.schema", str(exc)) from None
        synthetic = None
        num_classes, rendering, image_shape = csv_cfg.num_classes, csv_cfg.rendering, csv_cfg.image_shape
    else:
        synthetic = _build(SyntheticConfig, raw.get("synthetic"), "synthetic")
        csv_cfg = None
        num_classes, rendering, image_shape = synthetic.num_classes, synthetic.rendering, synthetic.image_shape

    if not isinstance(raw.get("backbone") or {}, Mapping):
        raise ConfigError("backbone", "expected a mapping")
    bb_raw = dict(raw.get("backbone") or {})
    if bb_raw.get("kind", "smallcnn") == "smallcnn":
        if rendering != "image":
            raise ConfigError("backbone.kind", "smallcnn needs image rendering; use kind: mlp for vectors")
        bb_raw.setdefault("num_classes", num_classes)
        bb_raw.setdefault("input_shape", list(image_shape))
    backbone = _build(BackboneSpec, bb_raw, "backbone")
    if backbone.num_classes != num_classes:
        raise ConfigError("backbone", f"backbone predicts {backbone.num_classes} classes, data has {num_classes}")
    if synthetic is not None and backbone.kind == "mlp" and backbone.input_shape != (synthetic.feature_dim,):
        raise ConfigError("backbone.dims", f"first width must equal feature_dim={synthetic.feature_dim}")

    adapter = _build(AdapterConfig, raw.get("adapter"), "adapter")
    try:
        check_rank(build_registry(backbone, adapter.depth), adapter)
    except ValueError as exc:
        raise ConfigError("adapter.rank", str(exc)) from None
    pretrain = _build(TrainConfig, {"epochs": 12, "lr": 3e-3, **_mapping(raw, "pretrain")}, "pretrain",
                      stage="pretrain")
    adapt = _build(TrainConfig, {"epochs": 12, "lr": 1e-2, **_mapping(raw, "adapt")}, "adapt", stage="adapt")
    sweep = _build(SweepGrid, raw.get("sweep"), "sweep")
    for d in sweep.depths:
        if d not in DEPTH_POLICIES:
            raise ConfigError("sweep.depths", f"unknown depth policy {d!r}; choose from {DEPTH_POLICIES}")
    if any(not isinstance(r, int) or r < 1 for r in sweep.ranks):
        raise ConfigError("sweep.ranks", "ranks must be positive integers")
    output_dir = raw.get("output_dir", "runs")
    if not isinstance(output_dir, str):
        raise ConfigError("output_dir", "expected a path string")
    return ExperimentConfig(
        seeds=tuple(seeds), methods=tuple(methods), synthetic=synthetic, csv=csv_cfg, backbone=backbone,
        adapter=adapter, embedder=_build(EmbedderConfig, raw.get("embedder"), "embedder"),
        pretrain=pretrain, adapt=adapt, sweep=sweep, ablation=_build(AblationConfig, raw.get("ablation"), "ablation"),
        output_dir=output_dir)


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError("", f"cannot read config {path}: {exc.strerror}") from None
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError("", f"{path} is not valid YAML: {exc}") from None
    return parse_config(raw if raw is not None else {}, base_dir=path.parent)


def worker_count() -> int:
    value = os.environ.get("HYPERADAPT_THREADS", "1")
    try:
        n = int(value)
    except ValueError:
        raise ConfigError("HYPERADAPT_THREADS", f"expected a positive integer, got {value!r}") from None
    if n < 1:
        raise ConfigError("HYPERADAPT_THREADS", "must be >= 1")
    return n


# ---------------------------------------------------------------- execution

def load_dataset(config: ExperimentConfig, seed: int) -> Dataset:
    """A fresh synthetic draw per seed, or the CSV file for every seed."""
    if config.synthetic is not None:
        return generate(config.synthetic, seed)
    src = config.csv
    return load_csv(src.path, src.attribute_schema(), src.num_classes, src.rendering, src.image_shape,
                    src.label_column, src.group_attribute)


@dataclass
class SeedContext:
    dataset: Dataset
    task: TaskData
    vanilla: Model
    history: TrainHistory


def prepare_seed(config: ExperimentConfig, seed: int) -> SeedContext:
    """Load data, split it and pretrain the pooled backbone for one seed."""
    dataset = load_dataset(config, seed)
    task = prepare_task(dataset, split(dataset, seed))
    try:
        vanilla, history = train(pretrain_model(config.backbone, seed), task.train, task.val,
                                 config.pretrain.replace(seed=seed))
    except Exception as exc:
        raise RunFailure("pretrain", seed, exc) from exc
    return SeedContext(dataset, task, vanilla, history)


def _history_dict(history: TrainHistory) -> dict:
    return history.to_dict()


def parameter_summary(result: MethodResult, config: ExperimentConfig, adapter: AdapterConfig) -> dict:
    model = result.model
    if isinstance(model, GroupModels):
        per_group = model.fallback.state.num_backbone_params()
        return {"backbone": per_group * max(len(model.models), 1), "stage2_trainable": 0}
    state = model.state
    # a plain pooled model has no second stage
    trainable = model.trainable("adapt") if state.frozen else []
    out = {"backbone": state.num_backbone_params(),
           "stage2_trainable": int(sum(state.params[k].size for k in trainable))}
    if model.kind == "hyperadapt":
        embed = sum(v.size for k, v in state.phi.items() if k.startswith("embed/"))
        out["embedder"] = int(embed)
        out["hyperadapt"] = count_parameters(model.registry, adapter, config.embedder.dim).to_dict()
    return out


def group_separation(model, task: TaskData) -> float | None:
    """Out-of-fold AUC of a linear probe for group on test penultimate features."""
    if isinstance(model, GroupModels) or len(np.unique(task.test.groups)) < 2:
        return None
    try:
        return linear_probe(predict_features(model, task.test), task.test.groups, kind="discrete").separation
    except ValueError:
        return None


def method_payload(result: MethodResult, ctx: SeedContext, config: ExperimentConfig, seed: int,
                   adapter: AdapterConfig | None = None) -> dict:
    adapter = adapter or config.adapter
    return {
        "method": result.method,
        "seed": seed,
        "config_hash": config.hash(),
        "dataset_hash": ctx.dataset.hash(),
        "metrics": result.report.to_dict(),
        "flags": result.flags,
        "parameters": parameter_summary(result, config, adapter),
        "probe": {"group_separation": group_separation(result.model, ctx.task)},
        "history": {stage: _history_dict(h) for stage, h in result.histories.items()},
    }


def run_seed(config: ExperimentConfig, seed: int, methods: Sequence[str] | None = None,
             adapter: AdapterConfig | None = None, ctx: SeedContext | None = None) -> dict[str, dict]:
    ctx = ctx or prepare_seed(config, seed)
    adapter = adapter or config.adapter
    out = {}
    for method in methods or config.methods:
        try:
            result = run_method(method, ctx.task, ctx.vanilla, config.pretrain.replace(seed=seed),
                                config.adapt.replace(seed=seed), adapter, config.embedder, seed, ctx.history)
        except Exception as exc:
            raise RunFailure(method, seed, exc) from exc
        out[method] = method_payload(result, ctx, config, seed, adapter)
    return out


def _map_seeds(fn, config: ExperimentConfig, *args):
    seeds = list(config.seeds)
    workers = min(worker_count(), len(seeds))
    if workers <= 1:
        return [fn(config, s, *args) for s in seeds]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, [config] * len(seeds), seeds, *[[a] * len(seeds) for a in args]))


def _write_json(path: Path, obj) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _write_table(path: Path, rows: list[dict], columns: Sequence[str]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([row[c] for c in columns])
    return path


def aggregate(payloads: dict[str, list[dict]]) -> dict:
    """Mean over seeds of every scalar metric, per method."""
    out = {}
    for method, runs in payloads.items():
        per_seed = {m: [r["metrics"][m] for r in runs] for m in SCALAR_METRICS}
        seps = [r["probe"]["group_separation"] for r in runs]
        if all(s is not None for s in seps):
            per_seed["group_separation"] = seps
        group_f1 = np.array([r["metrics"]["group_f1"] for r in runs])
        out[method] = {
            "seeds": [r["seed"] for r in runs],
            "mean": {m: float(np.mean(v)) for m, v in per_seed.items()},
            "per_seed": per_seed,
            "mean_group_f1": [float(v) for v in group_f1.mean(axis=0)],
        }
    return out


@dataclass
class RunOutcome:
    files: list[Path]
    aggregate: dict
    payloads: dict[str, list[dict]]
    seconds: float


def run(config: ExperimentConfig, out_dir: str | Path | None = None) -> RunOutcome:
    """Run every configured method over every seed; write one report per
    (method, seed) under ``runs/`` and ``aggregate.json``."""
    start = time.perf_counter()
    out = Path(out_dir if out_dir is not None else config.output_dir)
    per_seed = _map_seeds(run_seed, config)
    payloads = {m: [seed_out[m] for seed_out in per_seed] for m in config.methods}
    files = []
    echo = config.resolved()
    for method, runs in payloads.items():
        for payload in runs:
            files.append(_write_json(out / "runs" / f"{method}_seed{payload['seed']}.json",
                                     {"config": echo, **payload}))
    agg = {
        "config": echo,
        "config_hash": config.hash(),
        "dataset_hashes": {str(r["seed"]): r["dataset_hash"] for r in payloads[config.methods[0]]},
        "methods": aggregate(payloads),
    }
    files.append(_write_json(out / "aggregate.json", agg))
    return RunOutcome(files, agg, payloads, time.perf_counter() - start)


def format_table(agg_methods: Mapping[str, Mapping], columns=("accuracy", "f1", "worst_group_f1", "eopp1",
                                                                  "eodds")) -> str:
    width = max(len(m) for m in agg_methods) + 2
    lines = ["method".ljust(width) + "".join(c.rjust(16) for c in columns)]
    for method, stats in agg_methods.items():
        lines.append(method.ljust(width) + "".join(f"{stats['mean'][c]:16.4f}" for c in columns))
    return "\n".join(lines)


# ------------------------------------------------------------ sweep / ablate

def _grid_adapters(config: ExperimentConfig, axis: str) -> list[tuple[str, AdapterConfig]]:
    if axis == "rank":
        if not config.sweep.ranks:
            raise ConfigError("sweep.ranks", "empty grid")
        points = [(f"rank={r}", dataclasses.replace(config.adapter, rank=r)) for r in config.sweep.ranks]
    elif axis == "depth":
        if not config.sweep.depths:
            raise ConfigError("sweep.depths", "empty grid")
        points = [(f"depth={d}", dataclasses.replace(config.adapter, depth=d)) for d in config.sweep.depths]
    else:
        raise ConfigError("axis", f"unknown sweep axis {axis!r}; choose rank or depth")
    for name, adapter in points:
        try:
            check_rank(build_registry(config.backbone, adapter.depth), adapter)
        except ValueError as exc:
            raise ConfigError(f"sweep ({name})", str(exc)) from None
    return points


def _adapter_rows(config: ExperimentConfig, points: Sequence[tuple[str, AdapterConfig]]):
    """Train HyperAdapt at every grid point; stage 1 is shared per seed."""
    seeds_out = _map_seeds(_adapter_seed_job, config, tuple(points))
    rows = []
    for i, (name, adapter) in enumerate(points):
        runs = [s[i] for s in seeds_out]
        count = count_parameters(build_registry(config.backbone, adapter.depth), adapter, config.embedder.dim)
        row = {"setting": name, "generator_params": count.generator_params, "generated": count.generated,
               "dense_equivalent": count.dense_equivalent,
               "dataset_hashes": [r["dataset_hash"] for r in runs]}
        for metric in ("accuracy", "f1", "worst_group_f1"):
            row[metric] = float(np.mean([r["metrics"][metric] for r in runs]))
        row["per_seed"] = {str(r["seed"]): {m: r["metrics"][m] for m in ("accuracy", "f1")} for r in runs}
        rows.append(row)
    return rows


def _adapter_seed_job(config: ExperimentConfig, seed: int, points):
    ctx = prepare_seed(config, seed)
    return [run_seed(config, seed, ["hyperadapt"], adapter, ctx)["hyperadapt"] for _, adapter in points]


TABLE_COLUMNS = ("setting", "generator_params", "generated", "accuracy", "f1", "worst_group_f1")


def sweep(config: ExperimentConfig, axis: str, out_dir: str | Path | None = None) -> list[dict]:
    """HyperAdapt at each rank or depth grid point; rows sorted by parameter count."""
    points = _grid_adapters(config, axis)
    rows = sorted(_adapter_rows(config, points), key=lambda r: (r["generator_params"], r["generated"]))
    out = Path(out_dir if out_dir is not None else config.output_dir)
    _write_json(out / f"sweep_{axis}.json", {"config": config.resolved(), "config_hash": config.hash(),
                                              "axis": axis, "rows": rows})
    _write_table(out / f"sweep_{axis}.csv", rows, TABLE_COLUMNS)
    return rows


class ParameterCapExceeded(ConfigError):
    pass


def ablation_adapters(config: ExperimentConfig) -> list[tuple[str, AdapterConfig]]:
    return [(name, dataclasses.replace(config.adapter, **changes)) for name, changes in ABLATION_ROWS]


def ablate(config: ExperimentConfig, out_dir: str | Path | None = None, allow_large: bool = False,
           train_rows: bool = True) -> list[dict]:
    """The four generator designs from fully dense to shared low-rank."""
    points = ablation_adapters(config)
    for name, adapter in points:
        count = count_parameters(build_registry(config.backbone, adapter.depth), adapter, config.embedder.dim)
        if count.generator_params > config.ablation.param_cap and not allow_large:
            raise ParameterCapExceeded(
                "ablation.param_cap",
                f"row {name!r} needs {count.generator_params} generator parameters, above the cap of "
                f"{config.ablation.param_cap}; raise the cap or pass the override flag")
        try:
            check_rank(build_registry(config.backbone, adapter.depth), adapter)
        except ValueError as exc:
            raise ConfigError(f"ablation ({name})", str(exc)) from None
    if train_rows:
        rows = _adapter_rows(config, points)
    else:
        rows = []
        for name, adapter in points:
            count = count_parameters(build_registry(config.backbone, adapter.depth), adapter, config.embedder.dim)
            rows.append({"setting": name, "generator_params": count.generator_params,
                         "generated": count.generated, "dense_equivalent": count.dense_equivalent})
    out = Path(out_dir if out_dir is not None else config.output_dir)
    _write_json(out / "ablation.json", {"config": config.resolved(), "config_hash": config.hash(), "rows": rows})
    if train_rows:
        _write_table(out / "ablation.csv", rows, TABLE_COLUMNS)
    return rows


# ------------------------------------------------------------------ export

def embeddings_for(model: Model, task_batch, layer: str) -> np.ndarray:
    if layer not in LAYER_TAGS:
        raise ValueError(f"unknown layer tag {layer!r}; choose from {LAYER_TAGS}")
    if layer == "penultimate":
        return predict_features(model, task_batch)
    if model.schema is None:
        raise ValueError(f"model kind {model.kind!r} has no patient embedding")
    return model.embed(task_batch.enc).value


def export_embeddings(model: Model, dataset: Dataset, idx, task_batch, layer: str, path) -> Path:
    """Write embeddings, label, group and the raw record of each sample in ``idx``."""
    emb = embeddings_for(model, task_batch, layer)
    records = [dataset.records[i] for i in idx]
    return write_embeddings_csv(path, emb, task_batch.labels, task_batch.groups, records, dataset.schema.names)


def export_run(config: ExperimentConfig, layer: str, method: str = "hyperadapt", seed: int | None = None,
               split_name: str = "test", out_dir: str | Path | None = None) -> Path:
    """Train ``method`` for one seed and export the requested embeddings."""
    if layer not in LAYER_TAGS:
        raise ConfigError("layer", f"unknown layer tag {layer!r}; choose from {', '.join(LAYER_TAGS)}")
    if method not in METHODS or method == "group_models":
        raise ConfigError("method", f"cannot export embeddings for {method!r}")
    if layer == "patient" and method not in ("hyperadapt", "concat_fusion"):
        raise ConfigError("layer", f"{method} has no patient embedding")
    if split_name not in ("train", "val", "test"):
        raise ConfigError("split", "choose train, val or test")
    seed = config.seeds[0] if seed is None else seed
    ctx = prepare_seed(config, seed)
    if method == "vanilla":
        model = ctx.vanilla
    else:
        try:
            model = run_method(method, ctx.task, ctx.vanilla, config.pretrain.replace(seed=seed),
                               config.adapt.replace(seed=seed), config.adapter, config.embedder, seed).model
        except Exception as exc:
            raise RunFailure(method, seed, exc) from exc
    idx = getattr(split(ctx.dataset, seed), split_name)
    out = Path(out_dir if out_dir is not None else config.output_dir)
    return export_embeddings(model, ctx.dataset, idx, getattr(ctx.task, split_name), layer,
                             out / "embeddings" / f"{method}_seed{seed}_{layer}_{split_name}.csv")
