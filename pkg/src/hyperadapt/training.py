"""Two-stage training (pooled backbone pretraining, then frozen-backbone
adapter training), the Adam optimizer and the comparison baselines."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import diffcore as dc
from .adapters import AdapterConfig, LayerEntry, build_registry, generate_offsets, init_generators
from .attributes import AttributeSchema, EncodedAttributes, embed_batch, encode_records, fit_normalization, init_embedder
from .backbone import BackboneSpec, ModelState, build_backbone, forward_adapted
from .data import Dataset, SplitSet
from .metrics import SubgroupReport, subgroup_report

BASELINES = ("vanilla", "vanilla_finetune_head", "group_models", "concat_fusion")
METHODS = BASELINES + ("hyperadapt",)


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, reason: str = "non-finite loss"):
        super().__init__(f"training diverged at epoch {epoch}: {reason}")
        self.epoch = epoch


class NonFiniteGradient(FloatingPointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 64
    lr: float = 1e-3
    decay: float = 10.0
    decay_period: int | None = None  # None: decay once, at the midpoint
    seed: int = 0
    stage: str = "pretrain"          # "pretrain" | "adapt"
    baseline: str = "none"

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.lr < 0:
            raise ValueError("lr must be >= 0")
        if not self.decay > 1:
            raise ValueError("decay factor must be > 1")
        if self.decay_period is not None and self.decay_period < 1:
            raise ValueError("decay_period must be >= 1")
        if self.stage not in ("pretrain", "adapt"):
            raise ValueError(f"stage must be 'pretrain' or 'adapt', got {self.stage!r}")
        if self.baseline not in ("none",) + BASELINES:
            raise ValueError(f"unknown baseline kind {self.baseline!r}")

    @property
    def period(self) -> int:
        return self.decay_period if self.decay_period is not None else max(self.epochs // 2, 1)

    def lr_at(self, epoch: int) -> float:
        """Learning rate for 0-based ``epoch``."""
        return self.lr / self.decay ** (epoch // self.period)

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)


@dataclass(frozen=True)
class EmbedderConfig:
    dim: int = 16
    cont_hidden: int = 16
    fusion_hidden: int = 32


# ------------------------------------------------------------------ Adam

@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray], moments: AdamState,
              t: int, lr: float, frozen=(), beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update; returns new ``(params, moments)``.

    Frozen tensors are passed through untouched. A missing gradient counts
    as zero. Inputs are never modified in place.
    """
    if t < 1:
        raise ValueError("Adam step counter starts at 1")
    for name, g in grads.items():
        if name not in frozen and not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient for {name!r}; step rejected")
    new_params, m_out, v_out = dict(params), dict(moments.m), dict(moments.v)
    c1, c2 = 1.0 - beta1 ** t, 1.0 - beta2 ** t
    for name, p in params.items():
        if name in frozen:
            continue
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        m = beta1 * moments.m.get(name, 0.0) + (1.0 - beta1) * g
        v = beta2 * moments.v.get(name, 0.0) + (1.0 - beta2) * g * g
        m_out[name], v_out[name] = m, v
        new_params[name] = p - lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return new_params, AdamState(m_out, v_out, t)


# ----------------------------------------------------------------- models

@dataclass
class Batch:
    inputs: np.ndarray
    labels: np.ndarray
    groups: np.ndarray
    enc: EncodedAttributes | None = None

    def __len__(self):
        return len(self.labels)

    def take(self, idx) -> "Batch":
        return Batch(self.inputs[idx], self.labels[idx], self.groups[idx],
                     None if self.enc is None else self.enc.take(idx))


def make_batch(dataset: Dataset, schema: AttributeSchema | None, idx=None) -> Batch:
    ds = dataset if idx is None else dataset.subset(idx)
    enc = encode_records(schema, ds.records) if schema is not None else None
    return Batch(ds.inputs, ds.labels, ds.groups, enc)


@dataclass
class Model:
    """A backbone plus, optionally, the attribute pathway that conditions it.

    ``kind`` is ``backbone`` (plain f(x; theta)), ``hyperadapt`` (offsets
    generated from the patient embedding) or ``concat_fusion`` (patient
    embedding concatenated to the pooled features before the head).
    """

    state: ModelState
    kind: str = "backbone"
    schema: AttributeSchema | None = None
    registry: tuple[LayerEntry, ...] = ()
    adapter: AdapterConfig | None = None

    def replace(self, **changes) -> "Model":
        return dataclasses.replace(self, **changes)

    def embed(self, enc, params=None):
        return embed_batch(self.schema, enc, params if params is not None else self.state.phi)

    def offsets(self, enc, params=None):
        params = params if params is not None else self.state.params
        return generate_offsets(self.embed(enc, params), params, self.registry, self.adapter)

    def forward(self, inputs, enc, params=None, return_features=False):
        params = params if params is not None else self.state.params
        if self.kind == "backbone":
            return forward_adapted(self.state, None, inputs, params, return_features)
        if self.kind == "hyperadapt":
            offsets = generate_offsets(self.embed(enc, params), params, self.registry, self.adapter)
            return forward_adapted(self.state, offsets, inputs, params, return_features)
        if self.kind == "concat_fusion":
            e = self.embed(enc, params)
            w = dc.as_node(params["cf/w"])
            n, d = e.shape
            extra = dc.reshape(dc.matmul(w, dc.reshape(e, (n, d, 1))), (n, w.shape[0]))
            return forward_adapted(self.state, None, inputs, params, return_features, head_extra=extra)
        raise ValueError(f"unknown model kind {self.kind!r}")

    def trainable(self, stage: str) -> list[str]:
        """Pretraining updates theta; adaptation updates phi plus any theta left unfrozen."""
        pool = list(self.state.theta) if stage == "pretrain" else list(self.state.phi) + list(self.state.theta)
        return [k for k in pool if k not in self.state.frozen]


def pretrain_model(spec: BackboneSpec, seed: int) -> Model:
    return Model(build_backbone(spec, seed))


def attach_hyperadapt(backbone: Model, schema: AttributeSchema, adapter: AdapterConfig,
                      embedder: EmbedderConfig, seed: int) -> Model:
    """Wrap a pretrained backbone with freshly initialized embedder and generators."""
    rng = np.random.default_rng([seed, 1])
    registry = tuple(build_registry(backbone.state.spec, adapter.depth))
    phi = init_embedder(schema, rng, embedder.dim, embedder.cont_hidden, embedder.fusion_hidden)
    phi.update(init_generators(registry, adapter, embedder.dim, rng))
    state = backbone.state.replace(phi=phi, frozen=frozenset(backbone.state.theta))
    return Model(state, "hyperadapt", schema, registry, adapter)


def attach_concat_fusion(backbone: Model, schema: AttributeSchema, embedder: EmbedderConfig, seed: int) -> Model:
    """Embedder output enters the head through extra zero-initialized columns."""
    rng = np.random.default_rng([seed, 2])
    phi = init_embedder(schema, rng, embedder.dim, embedder.cont_hidden, embedder.fusion_hidden)
    phi["cf/w"] = np.zeros((backbone.state.spec.num_classes, embedder.dim))
    # features stay frozen; the head is refit jointly with the fusion columns
    state = backbone.state.replace(phi=phi, frozen=_all_but_head(backbone.state.theta))
    return Model(state, "concat_fusion", schema)


def finetune_head_model(backbone: Model) -> Model:
    return backbone.replace(state=backbone.state.replace(frozen=_all_but_head(backbone.state.theta)))


def _all_but_head(theta) -> frozenset:
    return frozenset(k for k in theta if not k.startswith("bb/head/"))


# ---------------------------------------------------------------- training

@dataclass
class TrainHistory:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    val_f1: list[float] = field(default_factory=list)
    lr: list[float] = field(default_factory=list)
    best_epoch: int = 0

    def to_dict(self):
        return dataclasses.asdict(self)


def _param_nodes(params: Mapping[str, np.ndarray], trainable: Sequence[str]):
    train = set(trainable)
    return {k: (dc.parameter(v, name=k) if k in train else dc.constant(v, name=k)) for k, v in params.items()}


def predict_logits(model: Model, batch: Batch, batch_size: int = 512, params=None) -> np.ndarray:
    params = params if params is not None else model.state.params
    out = []
    for start in range(0, len(batch), batch_size):
        sl = slice(start, start + batch_size)
        enc = None if batch.enc is None else batch.enc.take(sl)
        out.append(model.forward(batch.inputs[sl], enc, params).value)
    return np.concatenate(out) if out else np.zeros((0, model.state.spec.num_classes))


def predict_features(model: Model, batch: Batch, batch_size: int = 512) -> np.ndarray:
    params = model.state.params
    out = []
    for start in range(0, len(batch), batch_size):
        sl = slice(start, start + batch_size)
        enc = None if batch.enc is None else batch.enc.take(sl)
        out.append(model.forward(batch.inputs[sl], enc, params, return_features=True)[1].value)
    return np.concatenate(out)


def _xent(logits: np.ndarray, labels: np.ndarray) -> float:
    if len(labels) == 0:
        return float("nan")
    return float(dc.softmax_xent(dc.constant(logits), labels).value)


def evaluate(model: Model, batch: Batch, num_groups: int) -> SubgroupReport:
    pred = np.argmax(predict_logits(model, batch), axis=1)
    return subgroup_report(pred, batch.labels, batch.groups, model.state.spec.num_classes, num_groups)


def _stored(model: Model, params: dict[str, np.ndarray]) -> Model:
    theta = {k: params[k] for k in model.state.theta}
    phi = {k: params[k] for k in model.state.phi}
    return model.replace(state=model.state.replace(theta=theta, phi=phi))


# overflow surfaces as NonFiniteError / TrainingDiverged, so numpy's warnings are redundant
@np.errstate(over="ignore", invalid="ignore")
def train(model: Model, train_batch: Batch, val_batch: Batch, config: TrainConfig, grad_hook=None):
    """Minimize mean cross-entropy over ``train_batch``.

    Stage ``pretrain`` updates unfrozen theta, stage ``adapt`` unfrozen phi.
    Shuffling is derived from ``config.seed`` and the epoch index. The
    returned model carries the parameters of the epoch with the best
    validation macro-F1 (earliest on ties). ``grad_hook(epoch, grads)``, if
    given, sees the gradients of every step before they are applied.
    """
    trainable = model.trainable(config.stage)
    params = dict(model.state.params)
    moments = AdamState()
    history = TrainHistory()
    best_f1, best_params = -np.inf, params
    num_classes = model.state.spec.num_classes
    step = 0
    for epoch in range(config.epochs):
        lr = config.lr_at(epoch)
        history.lr.append(lr)
        order = np.random.default_rng([config.seed, epoch]).permutation(len(train_batch))
        losses, sizes = [], []
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            mb = train_batch.take(idx)
            nodes = _param_nodes(params, trainable)
            try:
                logits = model.forward(mb.inputs, mb.enc, nodes)
                loss = dc.softmax_xent(logits, mb.labels)
                grads_map = dc.backward(loss)
            except dc.NonFiniteError as exc:
                raise TrainingDiverged(epoch, str(exc)) from None
            grads = {k: grads_map[nodes[k]] for k in trainable if nodes[k].id in grads_map}
            if grad_hook is not None:
                grad_hook(epoch, grads)
            step += 1
            try:
                params, moments = adam_step(params, grads, moments, step, lr,
                                            frozen=set(params) - set(trainable))
            except NonFiniteGradient as exc:
                raise TrainingDiverged(epoch, str(exc)) from None
            losses.append(float(loss.value))
            sizes.append(len(idx))
        train_loss = float(np.average(losses, weights=sizes))
        if not np.isfinite(train_loss):
            raise TrainingDiverged(epoch)
        snapshot = _stored(model, params)
        try:
            logits = predict_logits(snapshot, val_batch)
        except dc.NonFiniteError as exc:
            raise TrainingDiverged(epoch, str(exc)) from None
        pred = np.argmax(logits, axis=1)
        report = subgroup_report(pred, val_batch.labels, val_batch.groups, num_classes,
                                 int(max(val_batch.groups.max(initial=0), train_batch.groups.max(initial=0))) + 1)
        history.train_loss.append(train_loss)
        history.val_loss.append(_xent(logits, val_batch.labels))
        history.val_f1.append(report.f1)
        if report.f1 > best_f1:
            best_f1, best_params, history.best_epoch = report.f1, params, epoch
    return _stored(model, best_params), history


# --------------------------------------------------------------- baselines

@dataclass
class GroupModels:
    """One backbone per group; groups without training data fall back to the pooled model."""

    models: dict[int, Model]
    fallback: Model
    flags: dict[int, str] = field(default_factory=dict)
    train_counts: dict[int, int] = field(default_factory=dict)

    def predict_logits(self, batch: Batch) -> np.ndarray:
        out = np.zeros((len(batch), self.fallback.state.spec.num_classes))
        for g in np.unique(batch.groups):
            idx = np.flatnonzero(batch.groups == g)
            out[idx] = predict_logits(self.models.get(int(g), self.fallback), batch.take(idx))
        return out


def fit_group_models(spec: BackboneSpec, train_batch: Batch, val_batch: Batch, config: TrainConfig,
                     num_groups: int, fallback: Model, seed: int):
    """Train a fresh backbone per group on that group's samples only.

    Every group model starts from the same seed as the pooled model, so a
    single-group task reproduces the pooled model exactly. A group with no
    validation samples is selected on the full validation split.
    """
    models, flags, counts, histories = {}, {}, {}, {}
    for g in range(num_groups):
        tr = np.flatnonzero(train_batch.groups == g)
        va = np.flatnonzero(val_batch.groups == g)
        counts[g] = len(tr)
        if len(tr) == 0:
            flags[g] = "no training samples; using the pooled model"
            continue
        val_g = val_batch.take(va) if len(va) else val_batch
        models[g], histories[g] = train(pretrain_model(spec, seed), train_batch.take(tr), val_g, config)
    return GroupModels(models, fallback, flags, counts), histories


@dataclass
class MethodResult:
    method: str
    report: SubgroupReport
    histories: dict[str, TrainHistory]
    flags: dict = field(default_factory=dict)
    model: Model | GroupModels | None = None


@dataclass
class TaskData:
    """Encoded splits plus what methods need to know about the task."""

    train: Batch
    val: Batch
    test: Batch
    schema: AttributeSchema
    num_groups: int
    num_classes: int


def prepare_task(dataset: Dataset, splits: SplitSet) -> TaskData:
    """Encode all splits with normalization frozen from the training split."""
    train_ds = dataset.subset(splits.train)
    schema = fit_normalization(dataset.schema, train_ds.records)
    return TaskData(make_batch(dataset, schema, splits.train), make_batch(dataset, schema, splits.val),
                    make_batch(dataset, schema, splits.test), schema, dataset.num_groups, dataset.num_classes)


def _report(logits: np.ndarray, batch: Batch, task: TaskData) -> SubgroupReport:
    return subgroup_report(np.argmax(logits, axis=1), batch.labels, batch.groups, task.num_classes, task.num_groups)


def run_method(method: str, task: TaskData, vanilla: Model, pretrain_cfg: TrainConfig, adapt_cfg: TrainConfig,
               adapter: AdapterConfig, embedder: EmbedderConfig, seed: int,
               pretrain_history: TrainHistory | None = None) -> MethodResult:
    """Train ``method`` on top of the pooled stage-1 model ``vanilla`` and
    report its subgroup metrics on the test split."""
    hist = {"pretrain": pretrain_history} if pretrain_history is not None else {}
    if method == "vanilla":
        return MethodResult(method, _report(predict_logits(vanilla, task.test), task.test, task), hist, model=vanilla)
    if method == "group_models":
        cfg = pretrain_cfg.replace(baseline="group_models")
        gm, ghist = fit_group_models(vanilla.state.spec, task.train, task.val, cfg, task.num_groups, vanilla, seed)
        hist.update({f"group{g}": h for g, h in ghist.items()})
        return MethodResult(method, _report(gm.predict_logits(task.test), task.test, task), hist,
                            {str(g): f for g, f in gm.flags.items()}, gm)
    if method == "vanilla_finetune_head":
        model = finetune_head_model(vanilla)
        cfg = adapt_cfg.replace(baseline="vanilla_finetune_head")
    elif method == "concat_fusion":
        model = attach_concat_fusion(vanilla, task.schema, embedder, seed)
        cfg = adapt_cfg.replace(baseline="concat_fusion")
    elif method == "hyperadapt":
        model = attach_hyperadapt(vanilla, task.schema, adapter, embedder, seed)
        cfg = adapt_cfg
    else:
        raise ValueError(f"unknown method {method!r}; choose from {METHODS}")
    model, history = train(model, task.train, task.val, cfg.replace(stage="adapt"))
    hist["adapt"] = history
    return MethodResult(method, _report(predict_logits(model, task.test), task.test, task), hist, model=model)
