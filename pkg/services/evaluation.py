"""Dataset splits and classification metrics (accuracy, confusion, one-vs-rest ROC and PR)."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import pandas as pd
from sklearn.metrics import auc, average_precision_score, confusion_matrix, precision_recall_curve, roc_curve
from sklearn.preprocessing import label_binarize

from services.errors import ShapeError, ValidationError
from services.neural import CLASS_NAMES, N_CLASSES

TEST_PERCENT = 20
VAL_PERCENT = 16  # 20% of the remaining 80%
MIN_SPLIT_IDS = 5


@dataclass
class SplitManifest:
    train: list[int]
    val: list[int]
    test: list[int]
    seed: int
    subject_level: bool = False
    fractions: dict[str, float] = field(default_factory=lambda: {"train": 0.64, "val": 0.16, "test": 0.2})

    def to_dict(self) -> dict[str, Any]:
        return {
            "train": list(self.train),
            "val": list(self.val),
            "test": list(self.test),
            "seed": self.seed,
            "subject_level": self.subject_level,
            "fractions": dict(self.fractions),
        }

    @classmethod
    def from_dict(cls, doc: dict[str, Any]) -> "SplitManifest":
        return cls(
            train=[int(i) for i in doc["train"]],
            val=[int(i) for i in doc["val"]],
            test=[int(i) for i in doc["test"]],
            seed=int(doc["seed"]),
            subject_level=bool(doc.get("subject_level", False)),
        )


def _rounded_share(n: int, percent: int) -> int:
    # floor(n * percent / 100 + 0.5) in integers
    return (n * percent + 50) // 100


def split_dataset(ids: Sequence[int], seed: int, *, groups: Sequence[str] | None = None) -> SplitManifest:
    """Random 64/16/20 train/val/test split of ``ids``; with ``groups`` whole groups move together."""
    ids = [int(i) for i in ids]
    if len(set(ids)) != len(ids):
        raise ValidationError("split ids must be unique", stage="split")
    if len(ids) < MIN_SPLIT_IDS:
        raise ValidationError(f"need at least {MIN_SPLIT_IDS} ids to split, got {len(ids)}", stage="split")
    rng = np.random.default_rng(seed)

    if groups is None:
        order = [ids[k] for k in rng.permutation(len(ids))]
        n_test = _rounded_share(len(ids), TEST_PERCENT)
        n_val = _rounded_share(len(ids), VAL_PERCENT)
        test, val, train = order[:n_test], order[n_test:n_test + n_val], order[n_test + n_val:]
        return SplitManifest(train=sorted(train), val=sorted(val), test=sorted(test), seed=int(seed))

    if len(groups) != len(ids):
        raise ShapeError(f"{len(groups)} group labels for {len(ids)} ids", stage="split")
    subjects = sorted(set(groups))
    if len(subjects) < 3:
        raise ValidationError(f"subject-level split needs >= 3 subjects, got {len(subjects)}", stage="split")
    shuffled = [subjects[k] for k in rng.permutation(len(subjects))]
    n_test = max(1, _rounded_share(len(subjects), TEST_PERCENT))
    n_val = max(1, _rounded_share(len(subjects), VAL_PERCENT))
    if n_test + n_val >= len(subjects):
        n_val = max(1, len(subjects) - n_test - 1)
    test_s = set(shuffled[:n_test])
    val_s = set(shuffled[n_test:n_test + n_val])
    parts: dict[str, list[int]] = {"train": [], "val": [], "test": []}
    for i, g in zip(ids, groups):
        parts["test" if g in test_s else "val" if g in val_s else "train"].append(i)
    return SplitManifest(
        train=sorted(parts["train"]),
        val=sorted(parts["val"]),
        test=sorted(parts["test"]),
        seed=int(seed),
        subject_level=True,
    )


def confusion_and_accuracy(preds: Sequence[int], labels: Sequence[int]) -> dict[str, Any]:
    p = np.asarray(preds, dtype=np.int64)
    y = np.asarray(labels, dtype=np.int64)
    if p.shape != y.shape:
        raise ShapeError(f"{p.shape[0]} predictions for {y.shape[0]} labels", stage="evaluate")
    if y.size == 0:
        return {"accuracy": 0.0, "confusion": np.zeros((N_CLASSES, N_CLASSES), dtype=int).tolist()}
    cm = confusion_matrix(y, p, labels=list(range(N_CLASSES)))
    return {"accuracy": float(np.trace(cm)) / float(y.size), "confusion": cm.tolist()}


def _check_scores(scores: np.ndarray, labels: np.ndarray) -> None:
    if scores.ndim != 2 or scores.shape[1] != N_CLASSES or scores.shape[0] != labels.shape[0]:
        raise ShapeError(f"scores must be N x {N_CLASSES} for {labels.shape[0]} labels, got {scores.shape}")
    if not np.all(np.isfinite(scores)):
        raise ValidationError("scores contain non-finite values", stage="evaluate")


def _threshold(value: float) -> float | None:
    return None if not math.isfinite(value) else float(value)


def _macro(values: list[float | None]) -> float | None:
    present = [v for v in values if v is not None]
    return float(np.mean(present)) if present else None


def roc_auc_ovr(scores: np.ndarray, labels: Sequence[int]) -> dict[str, Any]:
    """Per-class one-vs-rest ROC (threshold, fpr, tpr) points and trapezoid AUC; absent classes give None."""
    S = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    _check_scores(S, y)
    Y = label_binarize(y, classes=list(range(N_CLASSES)))
    curves: list[list[list[float | None]] | None] = []
    aucs: list[float | None] = []
    for c in range(N_CLASSES):
        pos = int(Y[:, c].sum())
        if pos == 0 or pos == y.size:
            curves.append(None)
            aucs.append(None)
            continue
        fpr, tpr, thr = roc_curve(Y[:, c], S[:, c], drop_intermediate=False)
        curves.append([[_threshold(t), float(x), float(v)] for t, x, v in zip(thr, fpr, tpr)])
        aucs.append(float(auc(fpr, tpr)))
    return {"curves": curves, "auc": aucs, "auc_macro": _macro(aucs)}


def precision_recall_ap(scores: np.ndarray, labels: Sequence[int]) -> dict[str, Any]:
    """Per-class (threshold, recall, precision) points and step-wise average precision."""
    S = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    _check_scores(S, y)
    Y = label_binarize(y, classes=list(range(N_CLASSES)))
    curves: list[list[list[float | None]] | None] = []
    aps: list[float | None] = []
    for c in range(N_CLASSES):
        if int(Y[:, c].sum()) == 0:
            curves.append(None)
            aps.append(None)
            continue
        precision, recall, thr = precision_recall_curve(Y[:, c], S[:, c])
        # the final (recall 0, precision 1) point carries no threshold
        thresholds = [_threshold(t) for t in thr] + [None]
        curves.append([[t, float(r), float(p)] for t, r, p in zip(thresholds, recall, precision)])
        aps.append(float(average_precision_score(Y[:, c], S[:, c])))
    return {"curves": curves, "ap": aps, "ap_macro": _macro(aps)}


@dataclass
class MetricsReport:
    accuracy: float
    confusion: list[list[int]]
    roc: dict[str, Any]
    pr: dict[str, Any]
    n_samples: int

    @property
    def auc_macro(self) -> float | None:
        return self.roc["auc_macro"]

    @property
    def ap_macro(self) -> float | None:
        return self.pr["ap_macro"]

    def to_dict(self) -> dict[str, Any]:
        per_class = {}
        for c, name in enumerate(CLASS_NAMES):
            per_class[name] = {
                "auc": self.roc["auc"][c],
                "ap": self.pr["ap"][c],
                "roc": self.roc["curves"][c],
                "pr": self.pr["curves"][c],
                "support": int(sum(self.confusion[c])),
            }
        return {
            "accuracy": self.accuracy,
            "auc_macro": self.auc_macro,
            "ap_macro": self.ap_macro,
            "confusion": self.confusion,
            "classes": list(CLASS_NAMES),
            "per_class": per_class,
            "n_samples": self.n_samples,
        }

    @classmethod
    def from_dict(cls, doc: dict[str, Any]) -> "MetricsReport":
        per_class = [doc["per_class"][name] for name in CLASS_NAMES]
        aucs = [c["auc"] for c in per_class]
        aps = [c["ap"] for c in per_class]
        return cls(
            accuracy=float(doc["accuracy"]),
            confusion=[[int(v) for v in row] for row in doc["confusion"]],
            roc={"curves": [c["roc"] for c in per_class], "auc": aucs, "auc_macro": _macro(aucs)},
            pr={"curves": [c["pr"] for c in per_class], "ap": aps, "ap_macro": _macro(aps)},
            n_samples=int(doc["n_samples"]),
        )


def metrics_report(preds: Sequence[int], scores: np.ndarray, labels: Sequence[int]) -> MetricsReport:
    frag = confusion_and_accuracy(preds, labels)
    y = np.asarray(labels, dtype=np.int64)
    if y.size == 0:
        raise ValidationError("cannot build a metrics report from zero samples", stage="evaluate")
    return MetricsReport(
        accuracy=frag["accuracy"],
        confusion=frag["confusion"],
        roc=roc_auc_ovr(scores, y),
        pr=precision_recall_ap(scores, y),
        n_samples=int(y.size),
    )


def _curve_frame(points: list[list[float | None]]) -> pd.DataFrame:
    return pd.DataFrame(points, columns=["threshold", "x", "y"])


def export_curves_csv(report: MetricsReport, out_dir: str | Path) -> list[Path]:
    """roc_<class>.csv (x = fpr, y = tpr) and pr_<class>.csv (x = recall, y = precision)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []
    for c, name in enumerate(CLASS_NAMES):
        for kind, curves in (("roc", report.roc["curves"]), ("pr", report.pr["curves"])):
            points = curves[c] or []
            path = out / f"{kind}_{name}.csv"
            _curve_frame(points).to_csv(path, index=False, float_format="%.10g", lineterminator="\n")
            written.append(path)
    return written


def strategies_frame(accuracies: dict[str, float]) -> pd.DataFrame:
    rows = [{"strategy": k, "accuracy": accuracies[k]} for k in sorted(accuracies)]
    return pd.DataFrame(rows, columns=["strategy", "accuracy"])
