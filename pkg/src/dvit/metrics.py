"""Evaluation metrics: confusion-matrix statistics (overall and mean
accuracy, Cohen's kappa, macro precision/recall/F1, per-class variants)
and the Kernel Inception Distance over caller-supplied feature vectors.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

__all__ = [
    "MetricError", "ConfusionMatrix", "confusion",
    "overall_accuracy", "mean_accuracy", "cohen_kappa",
    "per_class_precision", "per_class_recall", "per_class_f1", "per_class_kappa",
    "macro_precision", "macro_recall", "macro_f1",
    "normalized_confusion", "MetricsReport", "compute_report",
    "KidEstimate", "kid",
]


class MetricError(ValueError):
    """Raised for undefined metrics (empty matrix, empty class, degenerate kappa)."""


@dataclass
class ConfusionMatrix:
    """C x C counts; rows are true classes, columns predicted classes."""

    counts: np.ndarray
    class_names: list[str]

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        C = len(self.class_names)
        if self.counts.shape != (C, C):
            raise MetricError(f"counts shape {self.counts.shape} does not match "
                              f"{C} class names")
        if (self.counts < 0).any():
            raise MetricError("confusion counts must be non-negative")

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def confusion(true_labels, predicted_labels, num_classes: int,
              class_names: Optional[Sequence[str]] = None) -> ConfusionMatrix:
    t = np.asarray(true_labels, dtype=np.int64)
    p = np.asarray(predicted_labels, dtype=np.int64)
    if t.shape != p.shape or t.ndim != 1:
        raise MetricError(f"label arrays must be equal-length vectors, "
                          f"got {t.shape} and {p.shape}")
    for name, arr in (("true", t), ("predicted", p)):
        if arr.size and (arr.min() < 0 or arr.max() >= num_classes):
            raise MetricError(f"{name} labels outside [0, {num_classes})")
    counts = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(counts, (t, p), 1)
    names = list(class_names) if class_names else [str(i) for i in range(num_classes)]
    return ConfusionMatrix(counts=counts, class_names=names)


def _require_total(m: ConfusionMatrix) -> int:
    if m.total == 0:
        raise MetricError("confusion matrix is empty")
    return m.total


def overall_accuracy(m: ConfusionMatrix) -> float:
    return float(np.trace(m.counts) / _require_total(m))


def mean_accuracy(m: ConfusionMatrix) -> float:
    _require_total(m)
    rows = m.counts.sum(axis=1)
    empty = np.nonzero(rows == 0)[0]
    if empty.size:
        raise MetricError(f"mean accuracy undefined: class "
                          f"{m.class_names[empty[0]]!r} has no samples")
    return float(np.mean(np.diag(m.counts) / rows))


def cohen_kappa(m: ConfusionMatrix) -> float:
    total = _require_total(m)
    po = np.trace(m.counts) / total
    pe = float(m.counts.sum(axis=1) @ m.counts.sum(axis=0)) / (total * total)
    if pe == 1.0:
        raise MetricError("kappa undefined: chance agreement is 1 "
                          "(single populated class on both axes)")
    return float((po - pe) / (1.0 - pe))


def _per_class(numer: np.ndarray, denom: np.ndarray,
               warnings: Optional[list] = None, what: str = "",
               names: Optional[list] = None) -> np.ndarray:
    out = np.zeros(len(denom), dtype=np.float64)
    for i, (n, d) in enumerate(zip(numer, denom)):
        if d == 0:
            if warnings is not None:
                warnings.append(f"{what} for class {names[i]!r} has zero denominator; "
                                f"reported as 0")
        else:
            out[i] = n / d
    return out


def per_class_precision(m: ConfusionMatrix, warnings: Optional[list] = None) -> np.ndarray:
    return _per_class(np.diag(m.counts), m.counts.sum(axis=0), warnings,
                      "precision", m.class_names)


def per_class_recall(m: ConfusionMatrix, warnings: Optional[list] = None) -> np.ndarray:
    return _per_class(np.diag(m.counts), m.counts.sum(axis=1), warnings,
                      "recall", m.class_names)


def per_class_f1(m: ConfusionMatrix, warnings: Optional[list] = None) -> np.ndarray:
    p = per_class_precision(m)
    r = per_class_recall(m)
    return _per_class(2 * p * r, p + r, warnings, "F1", m.class_names)


def per_class_kappa(m: ConfusionMatrix, warnings: Optional[list] = None) -> np.ndarray:
    """Kappa of each class's one-vs-rest binarized 2x2 matrix; 0 when degenerate."""
    total = _require_total(m)
    out = np.zeros(m.num_classes, dtype=np.float64)
    for i in range(m.num_classes):
        tp = m.counts[i, i]
        fn = m.counts[i].sum() - tp
        fp = m.counts[:, i].sum() - tp
        tn = total - tp - fn - fp
        binary = ConfusionMatrix(np.array([[tp, fn], [fp, tn]]), [m.class_names[i], "rest"])
        try:
            out[i] = cohen_kappa(binary)
        except MetricError:
            if warnings is not None:
                warnings.append(f"per-class kappa for {m.class_names[i]!r} is "
                                f"degenerate; reported as 0")
    return out


def macro_precision(m: ConfusionMatrix) -> float:
    return float(per_class_precision(m).mean())


def macro_recall(m: ConfusionMatrix) -> float:
    return float(per_class_recall(m).mean())


def macro_f1(m: ConfusionMatrix) -> float:
    return float(per_class_f1(m).mean())


def normalized_confusion(m: ConfusionMatrix) -> np.ndarray:
    """Row-normalized counts; empty rows stay all-zero."""
    rows = m.counts.sum(axis=1, keepdims=True)
    return np.divide(m.counts, rows, out=np.zeros(m.counts.shape, dtype=np.float64),
                     where=rows > 0)


@dataclass
class MetricsReport:
    class_names: list[str]
    overall_accuracy: float
    mean_accuracy: float
    kappa: float
    macro_precision: float
    macro_recall: float
    macro_f1: float
    per_class_accuracy: list[float]
    per_class_precision: list[float]
    per_class_f1: list[float]
    per_class_kappa: list[float]
    normalized_confusion: list[list[float]]
    warnings: list[str] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(self.__dict__, indent=2, sort_keys=True)

    def to_text(self) -> str:
        lines = [
            f"overall accuracy : {self.overall_accuracy:.4f}",
            f"mean accuracy    : {self.mean_accuracy:.4f}",
            f"kappa            : {self.kappa:.4f}",
            f"macro precision  : {self.macro_precision:.4f}",
            f"macro recall     : {self.macro_recall:.4f}",
            f"macro F1         : {self.macro_f1:.4f}",
            "",
            f"{'class':<20} {'accuracy':>9} {'precision':>10} {'F1':>9} {'kappa':>9}",
        ]
        for i, name in enumerate(self.class_names):
            lines.append(f"{name:<20} {self.per_class_accuracy[i]:>9.4f} "
                         f"{self.per_class_precision[i]:>10.4f} "
                         f"{self.per_class_f1[i]:>9.4f} {self.per_class_kappa[i]:>9.4f}")
        for w in self.warnings:
            lines.append(f"warning: {w}")
        return "\n".join(lines) + "\n"


def compute_report(m: ConfusionMatrix) -> MetricsReport:
    warnings: list[str] = []
    recall = per_class_recall(m, warnings)
    precision = per_class_precision(m, warnings)
    f1 = per_class_f1(m, warnings)
    pck = per_class_kappa(m, warnings)
    return MetricsReport(
        class_names=list(m.class_names),
        overall_accuracy=overall_accuracy(m),
        mean_accuracy=mean_accuracy(m),
        kappa=cohen_kappa(m),
        macro_precision=float(precision.mean()),
        macro_recall=float(recall.mean()),
        macro_f1=float(f1.mean()),
        per_class_accuracy=recall.tolist(),
        per_class_precision=precision.tolist(),
        per_class_f1=f1.tolist(),
        per_class_kappa=pck.tolist(),
        normalized_confusion=normalized_confusion(m).tolist(),
        warnings=warnings,
    )


# -- kernel inception distance ------------------------------------------------

@dataclass
class KidEstimate:
    value: float                 # mean unbiased MMD^2, scaled by 1000
    subsets: int
    subset_size: int
    kernel_degree: int
    kernel_scale: float          # the 1/d factor inside the kernel
    feature_dim: int


def _poly_kernel(a: np.ndarray, b: np.ndarray, degree: int, scale: float) -> np.ndarray:
    return (a @ b.T * scale + 1.0) ** degree


def kid(features_real: np.ndarray, features_gen: np.ndarray,
        subsets: int = 100, subset_size: Optional[int] = None,
        degree: int = 3, seed: int = 0) -> KidEstimate:
    """Mean over random subsets of the unbiased MMD^2 with kernel
    k(x, y) = (x.y/d + 1)^degree, reported in units of 1e-3.
    """
    real = np.asarray(features_real, dtype=np.float64)
    gen = np.asarray(features_gen, dtype=np.float64)
    if real.ndim != 2 or gen.ndim != 2 or real.shape[1] != gen.shape[1]:
        raise MetricError(f"feature sets must be 2-D with equal width, "
                          f"got {real.shape} and {gen.shape}")
    n, d = real.shape
    m = gen.shape[0]
    if d < 1:
        raise MetricError("feature dimension must be >= 1")
    if subsets < 1:
        raise MetricError(f"need at least one subset, got {subsets}")
    s = subset_size if subset_size is not None else min(1000, n, m)
    if s < 2:
        raise MetricError(f"subset size must be >= 2, got {s}")
    if n < s or m < s:
        raise MetricError(f"need at least {s} samples per side, got {n} and {m}")
    scale = 1.0 / d
    rng = np.random.default_rng(seed)
    values = np.empty(subsets, dtype=np.float64)
    for t in range(subsets):
        xr = real[rng.choice(n, size=s, replace=False)]
        xg = gen[rng.choice(m, size=s, replace=False)]
        kxx = _poly_kernel(xr, xr, degree, scale)
        kyy = _poly_kernel(xg, xg, degree, scale)
        kxy = _poly_kernel(xr, xg, degree, scale)
        sum_off_xx = kxx.sum() - np.trace(kxx)
        sum_off_yy = kyy.sum() - np.trace(kyy)
        values[t] = (sum_off_xx + sum_off_yy) / (s * (s - 1)) - 2.0 * kxy.mean()
    return KidEstimate(value=float(values.mean() * 1000.0), subsets=subsets,
                       subset_size=s, kernel_degree=degree, kernel_scale=scale,
                       feature_dim=d)
