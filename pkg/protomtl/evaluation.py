"""Dense-prediction metrics, model evaluation and run comparison.

Metrics are backed by accumulators that can be updated shard by shard and
merged; merged results equal a single pass exactly. Counts are integers and
float sums use :func:`math.fsum`, so the order of samples does not matter.

The boundary metric (odsF) is simplified: one dataset-wide threshold and
pixel-exact matching without a correspondence tolerance.
"""

import logging
import math
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
import torch

from .exceptions import ValidationError
from .model import PrototypeMTLNet
from .models import DatasetManifest, MetricEntry, MetricReport, RunComparison, TaskSpec
from .synthdata import PartialLabelBatch, load_split
from .utils import read_csv, write_csv

logger = logging.getLogger("protomtl.evaluation")

ODS_NOTE = (
    "odsF uses one dataset-wide threshold and pixel-exact matching "
    "(no boundary correspondence tolerance)"
)
REPORT_COLUMNS = ("task", "metric", "value", "protocol")


def _numpy(x) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        return x.detach().cpu().numpy()
    return np.asarray(x)


def _check_shapes(pred: np.ndarray, label: np.ndarray) -> None:
    if pred.shape != label.shape:
        raise ValidationError(f"Shape mismatch: {pred.shape} vs {label.shape}")


class ConfusionMatrix:
    """Dataset-wide confusion matrix, rows are labels and columns predictions."""

    def __init__(self, num_classes: int):
        if num_classes < 1:
            raise ValidationError(f"num_classes must be >= 1, got {num_classes}")
        self.num_classes = num_classes
        self.matrix = np.zeros((num_classes, num_classes), dtype=np.int64)

    def update(self, pred, label) -> "ConfusionMatrix":
        pred = _numpy(pred).astype(np.int64).reshape(-1)
        label = _numpy(label).astype(np.int64).reshape(-1)
        _check_shapes(pred, label)
        n = self.num_classes
        for name, values in (("prediction", pred), ("label", label)):
            if values.size and (values.min() < 0 or values.max() >= n):
                raise ValidationError(f"{name} class out of range 0..{n - 1}")
        self.matrix += np.bincount(n * label + pred, minlength=n * n).reshape(n, n)
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.num_classes != self.num_classes:
            raise ValidationError("Cannot merge confusion matrices of different sizes")
        merged = ConfusionMatrix(self.num_classes)
        merged.matrix = self.matrix + other.matrix
        return merged

    def iou(self) -> np.ndarray:
        """IoU per class; NaN for classes absent from the labels."""
        intersection = np.diag(self.matrix)
        union = self.matrix.sum(0) + self.matrix.sum(1) - intersection
        present = self.matrix.sum(1) > 0
        result = np.full(self.num_classes, np.nan)
        result[present] = intersection[present] / union[present]
        return result

    def miou(self) -> float:
        if self.matrix.sum() == 0:
            raise ValidationError("mIoU of an empty evaluation set")
        iou = self.iou()
        return float(math.fsum(iou[~np.isnan(iou)]) / np.count_nonzero(~np.isnan(iou)))


class MeanMeter:
    """Exact mean of per-pixel values accumulated over shards."""

    def __init__(self):
        self.values: List[np.ndarray] = []

    def update(self, values) -> "MeanMeter":
        self.values.append(_numpy(values).astype(np.float64).reshape(-1))
        return self

    def merge(self, other: "MeanMeter") -> "MeanMeter":
        merged = MeanMeter()
        merged.values = self.values + other.values
        return merged

    @property
    def count(self) -> int:
        return sum(v.size for v in self.values)

    def mean(self) -> float:
        if self.count == 0:
            raise ValidationError("Mean of an empty evaluation set")
        return math.fsum(np.concatenate(self.values)) / self.count


def absolute_errors(pred, label) -> np.ndarray:
    pred, label = _numpy(pred).astype(np.float64), _numpy(label).astype(np.float64)
    _check_shapes(pred, label)
    return np.abs(pred - label)


def angular_errors(pred, label, eps: float = 1e-8) -> np.ndarray:
    """Per-pixel angle in degrees between ``[B, 3, H, W]`` normal fields."""
    pred, label = _numpy(pred).astype(np.float64), _numpy(label).astype(np.float64)
    _check_shapes(pred, label)
    if pred.ndim != 4 or pred.shape[1] != 3:
        raise ValidationError(f"Expected normals [B, 3, H, W], got {pred.shape}")
    pred = pred / np.maximum(np.linalg.norm(pred, axis=1, keepdims=True), eps)
    label = label / np.maximum(np.linalg.norm(label, axis=1, keepdims=True), eps)
    cosine = np.clip(np.sum(pred * label, axis=1), -1.0, 1.0)
    return np.degrees(np.arccos(cosine))


def miou(pred_classes, labels, num_classes: Optional[int] = None) -> float:
    """Mean IoU over the classes present in ``labels``."""
    pred_classes, labels = _numpy(pred_classes), _numpy(labels)
    if labels.size == 0:
        raise ValidationError("mIoU of an empty evaluation set")
    if num_classes is None:
        num_classes = int(max(pred_classes.max(), labels.max())) + 1
    return ConfusionMatrix(num_classes).update(pred_classes, labels).miou()


def mean_angular_error(pred_normals, label_normals) -> float:
    """Mean angular error in degrees; inputs are renormalized per pixel."""
    return MeanMeter().update(angular_errors(pred_normals, label_normals)).mean()


def abs_err(pred_depth, label_depth) -> float:
    return MeanMeter().update(absolute_errors(pred_depth, label_depth)).mean()


class FMeasureAccumulator:
    """Per-threshold true/false positive counts for binary predictions.

    A pixel is predicted positive at threshold ``thr`` when its probability is
    ``>= thr``. Thresholds are uniform on [0, 1].
    """

    def __init__(self, thresholds: int = 255):
        if thresholds < 1:
            raise ValidationError(f"Need at least one threshold, got {thresholds}")
        self.thresholds = np.linspace(0.0, 1.0, thresholds)
        self.tp = np.zeros(thresholds, dtype=np.int64)
        self.fp = np.zeros(thresholds, dtype=np.int64)
        self.positives = 0

    def update(self, prob, labels) -> "FMeasureAccumulator":
        prob = _numpy(prob).astype(np.float64).reshape(-1)
        labels = _numpy(labels).reshape(-1).astype(bool)
        _check_shapes(prob, labels)
        if prob.size and (prob.min() < 0.0 or prob.max() > 1.0):
            raise ValidationError("Probabilities must lie in [0, 1]")
        positive = np.sort(prob[labels])
        negative = np.sort(prob[~labels])
        self.tp += positive.size - np.searchsorted(positive, self.thresholds, side="left")
        self.fp += negative.size - np.searchsorted(negative, self.thresholds, side="left")
        self.positives += positive.size
        return self

    def merge(self, other: "FMeasureAccumulator") -> "FMeasureAccumulator":
        if not np.array_equal(self.thresholds, other.thresholds):
            raise ValidationError("Cannot merge accumulators with different thresholds")
        merged = FMeasureAccumulator(len(self.thresholds))
        merged.tp = self.tp + other.tp
        merged.fp = self.fp + other.fp
        merged.positives = self.positives + other.positives
        return merged

    def f_measures(self) -> np.ndarray:
        """F1 at each threshold; 0 where precision and recall are both 0."""
        if self.positives == 0:
            raise ValidationError("F-measure is undefined without positive labels")
        tp = self.tp.astype(np.float64)
        predicted = tp + self.fp
        precision = np.divide(tp, predicted, out=np.zeros_like(tp), where=predicted > 0)
        recall = tp / self.positives
        denom = precision + recall
        return np.divide(
            2.0 * precision * recall, denom, out=np.zeros_like(tp), where=denom > 0
        )

    def best(self) -> float:
        return float(self.f_measures().max())


def max_f_measure(pred_prob, binary_labels, thresholds: int = 255) -> float:
    """Maximum over thresholds of the set-wide F1."""
    return FMeasureAccumulator(thresholds).update(pred_prob, binary_labels).best()


def ods_f_measure(pred_boundary_prob, boundary_labels, thresholds: int = 255) -> float:
    """Boundary F1 at the single best dataset-wide threshold.

    Matching is pixel-exact; there is no correspondence tolerance.
    """
    return FMeasureAccumulator(thresholds).update(pred_boundary_prob, boundary_labels).best()


def ois_f_measure(pred_boundary_prob, boundary_labels, thresholds: int = 255) -> float:
    """Mean over images of the per-image best F1.

    Images without positive pixels are skipped.
    """
    prob, labels = _numpy(pred_boundary_prob), _numpy(boundary_labels)
    _check_shapes(prob, labels)
    scores = [
        max_f_measure(p, y, thresholds) for p, y in zip(prob, labels) if np.any(y)
    ]
    if not scores:
        raise ValidationError("F-measure is undefined without positive labels")
    return math.fsum(scores) / len(scores)


def _task_accumulator(task: TaskSpec):
    if task.metric == "miou":
        return ConfusionMatrix(task.class_count)
    if task.metric in ("max_f", "ods_f"):
        return FMeasureAccumulator()
    return MeanMeter()


def _update(accumulator, task: TaskSpec, prediction: torch.Tensor, label: torch.Tensor):
    if task.metric == "miou":
        accumulator.update(prediction.argmax(dim=1), label)
    elif task.metric in ("max_f", "ods_f"):
        accumulator.update(torch.softmax(prediction, dim=1)[:, 1], label)
    elif task.metric == "mean_angular_error":
        accumulator.update(angular_errors(prediction, label))
    else:
        accumulator.update(absolute_errors(prediction, label))


def _result(accumulator, task: TaskSpec) -> float:
    if task.metric == "miou":
        return accumulator.miou()
    if task.metric in ("max_f", "ods_f"):
        return accumulator.best()
    return accumulator.mean()


def evaluate(
    model: PrototypeMTLNet,
    data: PartialLabelBatch,
    tasks: Sequence[TaskSpec],
    protocol: str,
    batch_size: int = 32,
) -> MetricReport:
    """Evaluate a model on a loaded split.

    The model runs under :meth:`PrototypeMTLNet.inference`, so no parameter
    or buffer changes. Only labeled (sample, task) pairs are scored.

    Parameters
    ----------
    model : PrototypeMTLNet
        Model to evaluate
    data : PartialLabelBatch
        Loaded split, usually the fully labeled test split
    tasks : sequence of TaskSpec
        Tasks in id order
    protocol : str
        Label protocol tag recorded in the report
    batch_size : int = 32
        Forward-pass batch size

    Returns
    -------
    MetricReport
        One entry per task
    """
    accumulators = {task.id: _task_accumulator(task) for task in tasks}
    with model.inference():
        for start in range(0, len(data), batch_size):
            batch = data.select(range(start, min(start + batch_size, len(data))))
            output = model(batch.images)
            for task in tasks:
                rows = batch.label_mask[:, task.id]
                if rows.any():
                    _update(
                        accumulators[task.id],
                        task,
                        output.predictions[task.id][rows],
                        batch.labels[task.id][rows],
                    )

    entries = [
        MetricEntry(task=t.name, metric=t.metric, value=_result(accumulators[t.id], t))
        for t in tasks
    ]
    notes = ODS_NOTE if any(t.metric == "ods_f" for t in tasks) else ""
    return MetricReport(protocol=protocol, entries=entries, notes=notes)


def evaluate_split(
    model: PrototypeMTLNet,
    manifest: DatasetManifest,
    split: str = "test",
    protocol: Optional[str] = None,
) -> MetricReport:
    """Load a split of a dataset and :func:`evaluate` the model on it."""
    data = load_split(manifest, split)
    report = evaluate(model, data, manifest.tasks, protocol or str(manifest.protocol))
    for entry in report.entries:
        logger.info(f"{split} {entry.task} {entry.metric} = {entry.value:.4f}")
    return report


def _check_same_tasks(reports: Sequence[MetricReport]) -> None:
    first = [(e.task, e.metric) for e in reports[0].entries]
    for report in reports[1:]:
        if [(e.task, e.metric) for e in report.entries] != first:
            raise ValidationError("Reports cover different tasks or metrics")


def mean_ranks(reports: Sequence[MetricReport]) -> List[float]:
    """Mean rank of each report across tasks (1 = best, ties share the average)."""
    if not reports:
        raise ValidationError("No reports to rank")
    _check_same_tasks(reports)
    totals = [0.0] * len(reports)
    n_tasks = len(reports[0].entries)
    for position in range(n_tasks):
        entries = [r.entries[position] for r in reports]
        sign = 1.0 if entries[0].higher_is_better else -1.0
        scores = [sign * e.value for e in entries]
        for i, score in enumerate(scores):
            better = sum(1 for s in scores if s > score)
            ties = sum(1 for s in scores if s == score) - 1
            totals[i] += 1.0 + better + 0.5 * ties
    return [total / n_tasks for total in totals]


def compare_runs(report_a: MetricReport, report_b: MetricReport) -> RunComparison:
    """Signed per-task improvement of ``report_b`` over ``report_a``.

    Higher-is-better metrics give ``b - a``, lower-is-better ones ``a - b``.

    Raises
    ------
    ValidationError
        If the reports cover different tasks
    """
    _check_same_tasks([report_a, report_b])
    deltas: Dict[str, float] = {}
    for a, b in zip(report_a.entries, report_b.entries):
        deltas[a.task] = b.value - a.value if a.higher_is_better else a.value - b.value
    rank_a, rank_b = mean_ranks([report_a, report_b])
    return RunComparison(deltas=deltas, mean_rank_a=rank_a, mean_rank_b=rank_b)


def write_report(report: MetricReport, path: Union[str, Path]) -> Path:
    """Write a report as CSV with columns task, metric, value, protocol."""
    rows = [(e.task, e.metric, e.value, report.protocol) for e in report.entries]
    return write_csv(path, REPORT_COLUMNS, rows)


def read_report(path: Union[str, Path]) -> MetricReport:
    """Read a report written by :func:`write_report`."""
    try:
        rows = read_csv(path)
        entries = [
            MetricEntry(task=r["task"], metric=r["metric"], value=float(r["value"]))
            for r in rows
        ]
    except (OSError, KeyError, ValueError) as e:
        raise ValidationError(f"Malformed report {path}: {e}") from e
    if not entries:
        raise ValidationError(f"Report {path} is empty")
    return MetricReport(protocol=rows[0]["protocol"], entries=entries)
