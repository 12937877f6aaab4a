"""Confusion-matrix metrics and the three validation protocols.

* MSS: every modality present.
* System-level MISS: one row per non-empty modality subset plus their
  unweighted mean.
* Sensor-level MISS: every modality present, one row per corruption condition
  plus the mean.
"""

from __future__ import annotations

import itertools
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import DataError, EvalError
from .mff import MODALITIES
from .segnet import IGNORE_INDEX, SegModel, load_checkpoint
from .synthdata import Condition, corrupt
from .trainer import TrainConfig, predict


def confusion(pred: np.ndarray, gt: np.ndarray, num_classes: int, ignore_index: int = IGNORE_INDEX) -> np.ndarray:
    """``K x K`` counts, rows ground truth, columns prediction."""
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise DataError(f"prediction {pred.shape} and label {gt.shape} extents differ")
    valid = gt != ignore_index
    g, p = gt[valid].astype(np.int64), pred[valid].astype(np.int64)
    if np.any((g < 0) | (g >= num_classes)):
        raise DataError(f"ground truth label outside 0..{num_classes - 1}")
    if np.any((p < 0) | (p >= num_classes)):
        raise DataError(f"predicted label outside 0..{num_classes - 1}")
    return np.bincount(g * num_classes + p, minlength=num_classes**2).reshape(num_classes, num_classes)


def _ratio(num: float, den: float) -> float:
    return num / den if den else 0.0


def metrics(cm: np.ndarray) -> dict:
    """Per-class IoU, F1 and Acc (recall) plus means over classes seen in gt or pred."""
    cm = np.asarray(cm, dtype=np.int64)
    k = cm.shape[0]
    per = {"iou": [], "f1": [], "acc": []}
    defined = []
    for c in range(k):
        tp = int(cm[c, c])
        fp = int(cm[:, c].sum()) - tp
        fn = int(cm[c, :].sum()) - tp
        if tp + fp + fn == 0:
            defined.append(False)
            for key in per:
                per[key].append(None)
            continue
        defined.append(True)
        precision, recall = _ratio(tp, tp + fp), _ratio(tp, tp + fn)
        per["iou"].append(_ratio(tp, tp + fp + fn))
        per["f1"].append(_ratio(2 * precision * recall, precision + recall))
        per["acc"].append(recall)
    means = {}
    for key, name in (("iou", "mIoU"), ("f1", "mF1"), ("acc", "mAcc")):
        vals = [v for v in per[key] if v is not None]
        means[name] = sum(vals) / len(vals) if vals else 0.0
    total = int(cm.sum())
    means["aAcc"] = _ratio(int(np.trace(cm)), total)
    return {"per_class": per, "means": means, "defined": defined}


def subset_name(subset: Sequence[str]) -> str:
    return "".join(m for m in MODALITIES if m in subset)


def all_subsets(modalities: Sequence[str] = MODALITIES) -> list[tuple]:
    """Non-empty subsets ordered by size, then canonical order."""
    return [c for r in range(1, len(modalities) + 1) for c in itertools.combinations(modalities, r)]


@dataclass
class EvalReport:
    per_class: dict
    means: dict
    miss_table: list = field(default_factory=list)
    mean_row: dict | None = None
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "per_class": self.per_class,
            "means": self.means,
            "miss_table": self.miss_table,
            "mean_row": self.mean_row,
            "meta": self.meta,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_csv(self) -> str:
        lines = ["row,miou,f1,acc,aacc"]
        rows = self.miss_table + ([self.mean_row] if self.mean_row else [])
        if not rows:
            m = self.means
            rows = [{"subset": "RDEL", "miou": m["mIoU"], "f1": m["mF1"], "acc": m["mAcc"], "aacc": m["aAcc"]}]
        for r in rows:
            label = r.get("condition", r.get("subset"))
            lines.append(f"{label},{r['miou']!r},{r['f1']!r},{r['acc']!r},{r.get('aacc', float('nan'))!r}")
        return "\n".join(lines) + "\n"


def _as_model(checkpoint) -> SegModel:
    if isinstance(checkpoint, SegModel):
        return checkpoint
    return load_checkpoint(checkpoint, requires_grad=False)


def split_confusion(model: SegModel, dataset, available: Sequence[str] = MODALITIES,
                    cfg: TrainConfig | None = None, condition: Condition | None = None,
                    threads: int = 1) -> np.ndarray:
    """Confusion matrix summed over a split in sample order."""
    if len(dataset) == 0:
        raise EvalError("dataset is empty")
    k = model.num_classes

    def one(i):
        s = dataset[i]
        if condition is not None:
            s = corrupt(s, condition)
        return confusion(predict(model, s, available, cfg), s.y, k)

    idx = range(len(dataset))
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            parts = list(pool.map(one, idx))
    else:
        parts = [one(i) for i in idx]
    cm = np.zeros((k, k), dtype=np.int64)
    for part in parts:
        cm += part
    return cm


def _row(label_key: str, label: str, cm: np.ndarray) -> dict:
    m = metrics(cm)["means"]
    return {label_key: label, "miou": m["mIoU"], "f1": m["mF1"], "acc": m["mAcc"], "aacc": m["aAcc"]}


def _mean_row(label_key: str, rows: list) -> dict:
    out = {label_key: "Mean"}
    for key in ("miou", "f1", "acc", "aacc"):
        out[key] = math.fsum(r[key] for r in rows) / len(rows)
    return out


def _report(cm: np.ndarray, meta: dict) -> EvalReport:
    m = metrics(cm)
    return EvalReport(m["per_class"], m["means"], meta=meta)


def eval_mss(checkpoint, dataset, cfg: TrainConfig | None = None, available: Sequence[str] = MODALITIES,
             threads: int = 1) -> EvalReport:
    model = _as_model(checkpoint)
    cm = split_confusion(model, dataset, available, cfg, threads=threads)
    return _report(cm, {"mode": "mss", "modalities": subset_name(available), "samples": len(dataset)})


def eval_miss_system(checkpoint, dataset, cfg: TrainConfig | None = None, threads: int = 1) -> EvalReport:
    model = _as_model(checkpoint)
    rows, full_cm = [], None
    for subset in all_subsets():
        cm = split_confusion(model, dataset, subset, cfg, threads=threads)
        rows.append(_row("subset", subset_name(subset), cm))
        if len(subset) == len(MODALITIES):
            full_cm = cm
    report = _report(full_cm, {"mode": "miss", "samples": len(dataset)})
    report.miss_table = rows
    report.mean_row = _mean_row("subset", rows)
    return report


def eval_miss_sensor(checkpoint, dataset, conditions: Sequence, cfg: TrainConfig | None = None,
                     threads: int = 1) -> EvalReport:
    if not conditions:
        raise EvalError("sensor-level evaluation needs at least one condition")
    conds = [Condition.parse(c) if isinstance(c, str) else c for c in conditions]
    model = _as_model(checkpoint)
    rows, first_cm = [], None
    for cond in conds:
        cm = split_confusion(model, dataset, MODALITIES, cfg, cond, threads=threads)
        first_cm = cm if first_cm is None else first_cm
        row = _row("condition", str(cond), cm)
        row["subset"] = subset_name(MODALITIES)
        rows.append(row)
    report = _report(first_cm, {"mode": "sensor", "samples": len(dataset), "conditions": [str(c) for c in conds]})
    report.miss_table = rows
    report.mean_row = _mean_row("condition", rows)
    return report
