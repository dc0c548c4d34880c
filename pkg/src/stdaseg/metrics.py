"""Confusion-matrix accumulation and per-class IoU / F1 scores."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

IGNORE_INDEX = 255


class ConfusionMatrix:
    """K x K pixel tallies; rows are ground truth, columns are predictions."""

    def __init__(self, num_classes: int, counts: Optional[np.ndarray] = None):
        self.num_classes = int(num_classes)
        if counts is None:
            counts = np.zeros((self.num_classes, self.num_classes), dtype=np.int64)
        counts = np.asarray(counts, dtype=np.int64)
        if counts.shape != (self.num_classes, self.num_classes):
            raise ValueError(f"counts must be {self.num_classes}x{self.num_classes}, got {counts.shape}")
        if (counts < 0).any():
            raise ValueError("confusion counts must be nonnegative")
        self.counts = counts

    def accumulate(self, prediction, label, ignore_index: int = IGNORE_INDEX) -> "ConfusionMatrix":
        """Add the tallies of one prediction/label pair in place and return self."""
        prediction = np.asarray(prediction)
        label = np.asarray(label)
        if prediction.shape != label.shape:
            raise ValueError(f"prediction {prediction.shape} and label {label.shape} differ in shape")
        keep = label != ignore_index
        gt = label[keep].astype(np.int64)
        pr = prediction[keep].astype(np.int64)
        k = self.num_classes
        for name, arr in (("label", gt), ("prediction", pr)):
            if arr.size and (arr.min() < 0 or arr.max() >= k):
                raise ValueError(f"{name} contains class ids outside 0..{k - 1}")
        self.counts += np.bincount(gt * k + pr, minlength=k * k).reshape(k, k)
        return self

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.num_classes != self.num_classes:
            raise ValueError("cannot add confusion matrices with different class counts")
        return ConfusionMatrix(self.num_classes, self.counts + other.counts)

    def __eq__(self, other) -> bool:
        return isinstance(other, ConfusionMatrix) and np.array_equal(self.counts, other.counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def tp_fp_fn(self, i: int) -> tuple[int, int, int]:
        tp = int(self.counts[i, i])
        fp = int(self.counts[:, i].sum()) - tp
        fn = int(self.counts[i, :].sum()) - tp
        return tp, fp, fn


def iou(cm: ConfusionMatrix, i: int) -> float:
    """tp / (tp + fp + fn); NaN when the class is absent from truth and prediction."""
    tp, fp, fn = cm.tp_fp_fn(i)
    denom = tp + fp + fn
    return float("nan") if denom == 0 else tp / denom


def f1(cm: ConfusionMatrix, i: int) -> float:
    """Harmonic mean of precision and recall, written as 2tp / (2tp + fp + fn).

    The rewrite is algebraically identical to 2PR / (P + R) and stays defined
    when tp = 0.
    """
    tp, fp, fn = cm.tp_fp_fn(i)
    denom = 2 * tp + fp + fn
    return float("nan") if denom == 0 else 2 * tp / denom


@dataclass
class EvalReport:
    """Per-class scores plus unweighted means. NaN marks degenerate classes."""

    class_names: list[str]
    iou: list[float]
    f1: list[float]
    miou: float
    mf1: float
    confusion: list[list[int]] = field(default_factory=list)

    def to_dict(self) -> dict:
        def clean(v):
            return None if v is None or np.isnan(v) else float(v)

        return {
            "class_names": list(self.class_names),
            "iou": [clean(v) for v in self.iou],
            "f1": [clean(v) for v in self.f1],
            "miou": clean(self.miou),
            "mf1": clean(self.mf1),
            "confusion": self.confusion,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        nan = float("nan")

        def back(v):
            return nan if v is None else float(v)

        return cls(
            class_names=list(d["class_names"]),
            iou=[back(v) for v in d["iou"]],
            f1=[back(v) for v in d["f1"]],
            miou=back(d["miou"]),
            mf1=back(d["mf1"]),
            confusion=d.get("confusion", []),
        )

    def to_table(self) -> str:
        """Fixed-width table: one IoU/F1 column pair per class, then the overall pair."""
        names = list(self.class_names) + ["Overall"]
        ious = list(self.iou) + [self.miou]
        f1s = list(self.f1) + [self.mf1]
        width = max(14, *(len(n) + 2 for n in names))

        def fmt(v):
            return "-" if np.isnan(v) else f"{100 * v:.2f}"

        head = "".join(n.center(width) for n in names)
        sub = "".join(("IoU".center(width // 2) + "F1".center(width - width // 2)) for _ in names)
        row = "".join((fmt(a).center(width // 2) + fmt(b).center(width - width // 2)) for a, b in zip(ious, f1s))
        return "\n".join([head, sub, row])


def summarize(cm: ConfusionMatrix, class_names: Optional[Sequence[str]] = None) -> EvalReport:
    k = cm.num_classes
    if class_names is None:
        class_names = [f"class_{i}" for i in range(k)]
    if len(class_names) != k:
        raise ValueError(f"expected {k} class names, got {len(class_names)}")
    ious = [iou(cm, i) for i in range(k)]
    f1s = [f1(cm, i) for i in range(k)]

    def mean(vals):
        vals = [v for v in vals if not np.isnan(v)]
        return float(np.mean(vals)) if vals else float("nan")

    return EvalReport(
        class_names=list(class_names),
        iou=ious,
        f1=f1s,
        miou=mean(ious),
        mf1=mean(f1s),
        confusion=cm.counts.tolist(),
    )
