"""Confusion matrices, per-class IoU, mIoU and per-setting result tables."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np
import torch

from .domains import CLASS_NAMES
from .errors import ConfigError, EmptyEvaluationError, ShapeError


def predict_labels(q):
    """Per-pixel argmax over the class axis; ties go to the lowest index.

    Accepts N x C x H x W (torch or numpy) or a single C x H x W map.
    """
    q = q.detach().cpu().numpy() if isinstance(q, torch.Tensor) else np.asarray(q)
    return np.argmax(q, axis=-3)  # numpy argmax returns the first maximal index


class ConfusionMatrix:
    """counts[g, p] = number of pixels with ground truth g predicted as p."""

    def __init__(self, num_classes, counts=None):
        self.num_classes = num_classes
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64) if counts is None else counts.astype(np.int64)

    def accumulate(self, pred, gt):
        pred, gt = np.asarray(pred), np.asarray(gt)
        if pred.shape != gt.shape:
            raise ShapeError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
        C = self.num_classes
        for arr, what in ((pred, "prediction"), (gt, "ground truth")):
            if arr.size and (arr.min() < 0 or arr.max() >= C):
                raise ValueError(f"{what} label out of range [0, {C})")
        idx = gt.astype(np.int64).ravel() * C + pred.astype(np.int64).ravel()
        self.counts += np.bincount(idx, minlength=C * C).reshape(C, C)
        return self

    def merge(self, other):
        if other.num_classes != self.num_classes:
            raise ShapeError("cannot merge confusion matrices of different class counts")
        return ConfusionMatrix(self.num_classes, self.counts + other.counts)

    @property
    def total(self):
        return int(self.counts.sum())


def accumulate(cm: ConfusionMatrix, pred, gt):
    return cm.accumulate(pred, gt)


def iou(cm: ConfusionMatrix):
    """Per-class IoU (NaN where undefined) and mIoU over the defined classes."""
    tp = np.diag(cm.counts).astype(np.float64)
    fp = cm.counts.sum(axis=0) - tp
    fn = cm.counts.sum(axis=1) - tp
    denom = tp + fp + fn
    defined = denom > 0
    if not defined.any():
        raise EmptyEvaluationError("no class has any ground-truth or predicted pixel")
    per_class = np.full(cm.num_classes, np.nan)
    per_class[defined] = tp[defined] / denom[defined]
    return per_class, float(per_class[defined].mean())


@torch.no_grad()
def evaluate_model(model, images, labels, num_classes, batch=50):
    """Confusion matrix of a segmentation model on N x H x W x 3 images."""
    cm = ConfusionMatrix(num_classes)
    was_training = model.training
    model.eval()
    for i in range(0, len(images), batch):
        x = torch.from_numpy(np.array(images[i:i + batch])).permute(0, 3, 1, 2)
        x = x.to(next(model.parameters()).dtype)
        cm.accumulate(predict_labels(model(x)), labels[i:i + batch])
    model.train(was_training)
    return cm


@dataclass
class DomainResult:
    domain: str
    per_class_iou: np.ndarray
    miou: float

    @classmethod
    def from_cm(cls, domain, cm):
        per_class, m = iou(cm)
        return cls(domain, per_class, m)


@dataclass
class MetricsReport:
    method: str
    results: list[DomainResult]
    avg_miou: float
    deltas: dict[str, float] = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    def miou(self, domain):
        for r in self.results:
            if r.domain == domain:
                return r.miou
        raise KeyError(domain)


def report(method, results, baseline: MetricsReport | None = None, metadata=None):
    """Assemble a report with the unweighted domain average and deltas against a baseline."""
    if not results:
        raise ConfigError("report needs at least one domain result")
    C = {len(r.per_class_iou) for r in results}
    if len(C) != 1:
        raise ConfigError("inconsistent class counts across domains")
    avg = float(np.mean([r.miou for r in results]))
    deltas = {}
    if baseline is not None:
        base = {r.domain: r.miou for r in baseline.results}
        missing = [r.domain for r in results if r.domain not in base]
        if missing:
            raise ConfigError(f"baseline {baseline.method!r} has no result for {missing}")
        deltas = {r.domain: r.miou - base[r.domain] for r in results}
        deltas["avg"] = avg - baseline.avg_miou
    return MetricsReport(method, list(results), avg, deltas, dict(metadata or {}))


CSV_FIELDS = ("method", "domain", "row", "class", "value")


def report_rows(rep: MetricsReport, class_names=CLASS_NAMES):
    """Machine-readable rows: one per (domain, class), then mIoU, delta and Avg summaries."""
    rows = []
    for r in rep.results:
        for c, v in enumerate(r.per_class_iou):
            rows.append((rep.method, r.domain, "iou", class_names[c], _fmt(v)))
        rows.append((rep.method, r.domain, "miou", "", _fmt(r.miou)))
        if r.domain in rep.deltas:
            rows.append((rep.method, r.domain, "delta", "", _fmt(rep.deltas[r.domain])))
    rows.append((rep.method, "", "avg", "", _fmt(rep.avg_miou)))
    if "avg" in rep.deltas:
        rows.append((rep.method, "", "avg_delta", "", _fmt(rep.deltas["avg"])))
    return rows


def _fmt(v):
    return "nan" if v is None or (isinstance(v, float) and np.isnan(v)) else f"{float(v):.4f}"


def write_csv(reports, path_or_buffer, class_names=CLASS_NAMES):
    own = isinstance(path_or_buffer, (str, bytes)) or hasattr(path_or_buffer, "__fspath__")
    fh = open(path_or_buffer, "w", newline="") if own else path_or_buffer
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_FIELDS)
        for rep in reports:
            w.writerows(report_rows(rep, class_names))
    finally:
        if own:
            fh.close()


def read_csv(path_or_text, class_names=CLASS_NAMES):
    """Inverse of :func:`write_csv` (values come back rounded to 4 decimals)."""
    text = path_or_text if "\n" in str(path_or_text) else open(path_or_text).read()
    reader = csv.DictReader(io.StringIO(text))
    by_method: dict[str, dict] = {}
    for row in reader:
        m = by_method.setdefault(row["method"], {"domains": {}, "avg": None, "deltas": {}})
        v = float(row["value"])
        if row["row"] == "iou":
            d = m["domains"].setdefault(row["domain"], {"iou": [np.nan] * len(class_names), "miou": None})
            d["iou"][class_names.index(row["class"])] = v
        elif row["row"] == "miou":
            m["domains"].setdefault(row["domain"], {"iou": [np.nan] * len(class_names), "miou": None})["miou"] = v
        elif row["row"] == "delta":
            m["deltas"][row["domain"]] = v
        elif row["row"] == "avg":
            m["avg"] = v
        elif row["row"] == "avg_delta":
            m["deltas"]["avg"] = v
    out = []
    for method, m in by_method.items():
        results = [DomainResult(d, np.asarray(v["iou"]), v["miou"]) for d, v in m["domains"].items()]
        out.append(MetricsReport(method, results, m["avg"], m["deltas"]))
    return out


def render_table(reports, class_names=CLASS_NAMES):
    """Human-readable table in percent: per-class IoU, mIoU with signed delta, Avg."""
    head = f"{'method':<22}{'domain':<10}" + "".join(f"{c[:7]:>8}" for c in class_names) + f"{'mIoU':>16}{'Avg':>8}"
    lines = [head, "-" * len(head)]
    for rep in reports:
        for i, r in enumerate(rep.results):
            cells = "".join(f"{'-' if np.isnan(v) else f'{100 * v:.1f}':>8}" for v in r.per_class_iou)
            m = f"{100 * r.miou:.1f}"
            if r.domain in rep.deltas:
                m += f" ({round(100 * rep.deltas[r.domain], 1) + 0.0:+.1f})"  # no "-0.0"
            avg = f"{100 * rep.avg_miou:.1f}" if i == 0 else ""
            lines.append(f"{rep.method if i == 0 else '':<22}{r.domain:<10}{cells}{m:>16}{avg:>8}")
    return "\n".join(lines)
