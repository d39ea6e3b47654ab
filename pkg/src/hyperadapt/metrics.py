"""Subgroup performance, fairness gaps, linear probes and embedding export."""
from __future__ import annotations

import csv
import itertools
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from sklearn.linear_model import LinearRegression, LogisticRegression
from sklearn.metrics import roc_auc_score
from sklearn.model_selection import KFold, StratifiedKFold, cross_val_predict

from .attributes import is_missing


@dataclass(frozen=True)
class GroupConfusion:
    """One-vs-rest counts; ``counts[g, c]`` is ``(TP, FP, FN, TN)``."""

    counts: np.ndarray  # (G, C, 4) int

    @property
    def tp(self):
        return self.counts[..., 0]

    @property
    def fp(self):
        return self.counts[..., 1]

    @property
    def fn(self):
        return self.counts[..., 2]

    @property
    def tn(self):
        return self.counts[..., 3]

    @property
    def num_groups(self):
        return self.counts.shape[0]

    @property
    def num_classes(self):
        return self.counts.shape[1]

    def group_sizes(self) -> np.ndarray:
        # every sample is a positive or a negative for class 0
        return self.counts[:, 0, :].sum(axis=1)

    def pooled(self) -> "GroupConfusion":
        return GroupConfusion(self.counts.sum(axis=0, keepdims=True))


def confusion(predictions, labels, groups, num_classes: int, num_groups: int) -> GroupConfusion:
    pred = np.asarray(predictions, dtype=np.int64)
    lab = np.asarray(labels, dtype=np.int64)
    grp = np.asarray(groups, dtype=np.int64)
    if not (len(pred) == len(lab) == len(grp)):
        raise ValueError(f"length mismatch: {len(pred)} predictions, {len(lab)} labels, {len(grp)} groups")
    for name, arr, hi in (("prediction", pred, num_classes), ("label", lab, num_classes), ("group", grp, num_groups)):
        if arr.size and (arr.min() < 0 or arr.max() >= hi):
            raise ValueError(f"{name} values must lie in [0, {hi})")
    counts = np.zeros((num_groups, num_classes, 4), dtype=np.int64)
    classes = np.arange(num_classes)
    for g in range(num_groups):
        m = grp == g
        p = pred[m][:, None] == classes
        t = lab[m][:, None] == classes
        counts[g, :, 0] = (p & t).sum(axis=0)
        counts[g, :, 1] = (p & ~t).sum(axis=0)
        counts[g, :, 2] = (~p & t).sum(axis=0)
        counts[g, :, 3] = (~p & ~t).sum(axis=0)
    return GroupConfusion(counts)


def _ratio(num, den):
    num, den = np.asarray(num, dtype=float), np.asarray(den, dtype=float)
    return np.divide(num, den, out=np.zeros_like(num), where=den > 0)


@dataclass(frozen=True)
class PRF1:
    precision: float
    recall: float
    f1: float


def _macro(tp, fp, fn) -> PRF1:
    p = _ratio(tp, tp + fp)
    r = _ratio(tp, tp + fn)
    f1 = _ratio(2 * p * r, p + r)
    return PRF1(float(p.mean()), float(r.mean()), float(f1.mean()))


def prf1(conf: GroupConfusion) -> tuple[PRF1, list[PRF1]]:
    """Macro precision, recall and F1, overall and per group; 0/0 counts as 0."""
    pooled = conf.pooled()
    overall = _macro(pooled.tp[0], pooled.fp[0], pooled.fn[0])
    per_group = [_macro(conf.tp[g], conf.fp[g], conf.fn[g]) for g in range(conf.num_groups)]
    return overall, per_group


def accuracy(conf: GroupConfusion) -> tuple[float, list[float]]:
    correct = conf.tp.sum(axis=1)
    sizes = conf.group_sizes()
    overall = float(correct.sum() / sizes.sum()) if sizes.sum() else 0.0
    return overall, [float(c / n) if n else 0.0 for c, n in zip(correct, sizes)]


@dataclass(frozen=True)
class FairnessGaps:
    eopp0: float
    eopp1: float
    eodds: float
    # (group, class) pairs left out of a class's gap for lacking positives or negatives
    excluded: tuple[tuple[int, int], ...] = ()


def fairness_gaps(conf: GroupConfusion) -> FairnessGaps:
    """Per class, the largest between-group gap in TPR (Eopp1), TNR (Eopp0)
    and the mean of TPR and FPR gaps (Eodds), averaged over classes.

    Binary tasks use class 1 as the positive class only. Groups without
    positives (or negatives) for a class do not take part in that class's
    TPR (or TNR/FPR) comparison.
    """
    if conf.num_groups < 2:
        raise ValueError("fairness gaps need at least two groups")
    tpr = _ratio(conf.tp, conf.tp + conf.fn)
    tnr = _ratio(conf.tn, conf.tn + conf.fp)
    fpr = _ratio(conf.fp, conf.fp + conf.tn)
    has_pos = (conf.tp + conf.fn) > 0
    has_neg = (conf.tn + conf.fp) > 0
    excluded = []
    e0, e1, eo = [], [], []
    classes = [1] if conf.num_classes == 2 else range(conf.num_classes)
    for c in classes:
        for g in range(conf.num_groups):
            if not (has_pos[g, c] and has_neg[g, c]):
                excluded.append((g, c))
        tp_groups = np.flatnonzero(has_pos[:, c])
        tn_groups = np.flatnonzero(has_neg[:, c])
        both = np.flatnonzero(has_pos[:, c] & has_neg[:, c])
        e1.append(_max_pairwise(lambda a, b: abs(tpr[a, c] - tpr[b, c]), tp_groups))
        e0.append(_max_pairwise(lambda a, b: abs(tnr[a, c] - tnr[b, c]), tn_groups))
        eo.append(_max_pairwise(lambda a, b: (abs(tpr[a, c] - tpr[b, c]) + abs(fpr[a, c] - fpr[b, c])) / 2, both))
    return FairnessGaps(float(np.mean(e0)), float(np.mean(e1)), float(np.mean(eo)), tuple(excluded))


def _max_pairwise(gap, members) -> float:
    return max((gap(a, b) for a, b in itertools.combinations(members, 2)), default=0.0)


@dataclass
class SubgroupReport:
    accuracy: float
    precision: float
    recall: float
    f1: float
    group_accuracy: list[float]
    group_precision: list[float]
    group_recall: list[float]
    group_f1: list[float]
    group_counts: list[int]
    eopp0: float
    eopp1: float
    eodds: float
    excluded: list = field(default_factory=list)

    @property
    def worst_group_f1(self) -> float:
        present = [f for f, n in zip(self.group_f1, self.group_counts) if n > 0]
        return min(present)

    @property
    def worst_group_accuracy(self) -> float:
        present = [a for a, n in zip(self.group_accuracy, self.group_counts) if n > 0]
        return min(present)

    def to_dict(self):
        out = asdict(self)
        out["excluded"] = [list(p) for p in self.excluded]
        out["worst_group_f1"] = self.worst_group_f1
        out["worst_group_accuracy"] = self.worst_group_accuracy
        return out


def subgroup_report(predictions, labels, groups, num_classes: int, num_groups: int) -> SubgroupReport:
    conf = confusion(predictions, labels, groups, num_classes, num_groups)
    acc, group_acc = accuracy(conf)
    overall, per_group = prf1(conf)
    if num_groups >= 2:
        gaps = fairness_gaps(conf)
    else:
        gaps = FairnessGaps(0.0, 0.0, 0.0)
    return SubgroupReport(
        accuracy=acc, precision=overall.precision, recall=overall.recall, f1=overall.f1,
        group_accuracy=group_acc,
        group_precision=[m.precision for m in per_group],
        group_recall=[m.recall for m in per_group],
        group_f1=[m.f1 for m in per_group],
        group_counts=[int(n) for n in conf.group_sizes()],
        eopp0=gaps.eopp0, eopp1=gaps.eopp1, eodds=gaps.eodds,
        excluded=list(gaps.excluded),
    )


# ---------------------------------------------------------------- probing

@dataclass
class ProbeResult:
    axis: np.ndarray          # (D,) for continuous/binary targets, (K, D) one-vs-rest otherwise
    projections: np.ndarray   # (N,) or (N, K)
    separation: float         # Pearson r (continuous) or mean one-vs-rest AUC (discrete)
    kind: str


def linear_probe(embeddings, targets, kind: str = "auto", folds: int = 5, seed: int = 0) -> ProbeResult:
    """Fit a linear probe for ``targets`` on ``embeddings``.

    The axis and projections come from a fit on all samples. The separation
    statistic is computed on out-of-fold projections, so it measures how well
    the attribute can be decoded rather than how well the probe memorizes.
    """
    X = np.asarray(embeddings, dtype=np.float64)
    t = np.asarray(targets)
    if X.ndim != 2 or len(X) != len(t):
        raise ValueError("embeddings must be (N, D) with one target per row")
    values = np.unique(t)
    if len(values) < 2:
        raise ValueError("linear probe needs at least two distinct target values")
    if np.all(np.ptp(X, axis=0) == 0):
        raise ValueError("embeddings are constant; nothing to probe")
    if kind == "auto":
        kind = "continuous" if np.issubdtype(t.dtype, np.floating) and len(values) > 10 else "discrete"
    folds = max(2, min(folds, len(X)))
    if kind == "continuous":
        t = t.astype(np.float64)
        model = LinearRegression().fit(X, t)
        proj = X @ model.coef_
        oof = cross_val_predict(LinearRegression(), X, t, cv=KFold(folds, shuffle=True, random_state=seed))
        sep = float(np.corrcoef(oof, t)[0, 1]) if np.std(oof) > 0 else 0.0
        return ProbeResult(model.coef_.copy(), proj, sep, kind)
    classes = values
    folds = max(2, min(folds, min(np.sum(t == v) for v in classes)))
    model = LogisticRegression(max_iter=2000)
    model.fit(X, t)
    cv = StratifiedKFold(folds, shuffle=True, random_state=seed)
    oof = cross_val_predict(LogisticRegression(max_iter=2000), X, t, cv=cv, method="decision_function")
    if len(classes) == 2:
        axis = model.coef_[0].copy()
        sep = float(roc_auc_score(t == classes[1], oof))
        return ProbeResult(axis, X @ axis, sep, kind)
    aucs = [roc_auc_score(t == c, oof[:, k]) for k, c in enumerate(classes)]
    axis = model.coef_.copy()
    return ProbeResult(axis, X @ axis.T, float(np.mean(aucs)), kind)


def write_embeddings_csv(path, embeddings, labels, groups, records, attribute_names) -> Path:
    """One row per sample: ``emb_0..emb_{D-1}``, label, group, then ``attr_<name>`` per attribute."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    emb = np.asarray(embeddings, dtype=np.float64)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow([f"emb_{j}" for j in range(emb.shape[1])] + ["label", "group"]
                        + [f"attr_{a}" for a in attribute_names])
        for row, y, g, rec in zip(emb, labels, groups, records):
            attrs = ["NA" if is_missing(rec[a]) else repr(rec[a]) for a in attribute_names]
            writer.writerow([repr(float(v)) for v in row] + [int(y), int(g)] + attrs)
    return path
