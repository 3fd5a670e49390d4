# polarseg/services/evaluation_service.py
"""Confusion-matrix metrics and full-frame evaluation of a model over a sample set."""
from concurrent.futures import ThreadPoolExecutor
from typing import Iterable, List, Optional, Sequence

import numpy as np

from api.models import BranchSpec, ClassMetrics, ClassSchema, MetricsReport, Sample
from config import logger, settings
from core.errors import InputValidationError, ShapeMismatchError
from core.tensor import no_grad
from nn.eafnet import DOWNSAMPLE, EAFNet
from services.dataset_service import branch_inputs


class ConfusionMatrix:
    """K x K int64 counts; rows are ground truth, columns are predictions."""

    def __init__(self, num_classes: int, counts: Optional[np.ndarray] = None):
        self.num_classes = num_classes
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64) if counts is None \
            else np.asarray(counts, dtype=np.int64)
        if self.counts.shape != (num_classes, num_classes) or np.any(self.counts < 0):
            raise InputValidationError("Confusion counts must be a nonnegative K x K matrix",
                                       details={"shape": list(self.counts.shape)})

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.num_classes != self.num_classes:
            raise ShapeMismatchError("Cannot merge confusion matrices of different class counts",
                                     details={"lhs": self.num_classes, "rhs": other.num_classes})
        return ConfusionMatrix(self.num_classes, self.counts + other.counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def __eq__(self, other) -> bool:
        return isinstance(other, ConfusionMatrix) and np.array_equal(self.counts, other.counts)

    def __repr__(self) -> str:
        return f"ConfusionMatrix(num_classes={self.num_classes}, total={self.total})"


def update_confusion(cm: ConfusionMatrix, labels: np.ndarray, predictions: np.ndarray,
                     ignore_ids: Iterable[int] = ()) -> ConfusionMatrix:
    """Return cm plus the counts of every non-ignored pixel."""
    labels = np.asarray(labels, dtype=np.int64)
    predictions = np.asarray(predictions, dtype=np.int64)
    if labels.shape != predictions.shape:
        raise ShapeMismatchError(f"labels {labels.shape} and predictions {predictions.shape} disagree",
                                 details={"labels": list(labels.shape), "predictions": list(predictions.shape)})
    k = cm.num_classes
    valid = ~np.isin(labels, list(ignore_ids))
    if np.any(valid & ((labels < 0) | (labels >= k))) or np.any((predictions < 0) | (predictions >= k)):
        raise InputValidationError(f"class ids outside [0, {k})")
    flat = labels[valid] * k + predictions[valid]
    return cm.merge(ConfusionMatrix(k, np.bincount(flat, minlength=k * k).reshape(k, k)))


def _ratio(numerator: int, denominator: int) -> Optional[float]:
    return None if denominator == 0 else numerator / denominator


def compute_metrics(cm: ConfusionMatrix, evaluated: Sequence[int],
                    class_names: Optional[Sequence[str]] = None) -> MetricsReport:
    """Per-class IoU/precision/recall; mIoU averages evaluated classes whose IoU is defined."""
    counts = cm.counts
    names = list(class_names) if class_names is not None else [str(i) for i in range(cm.num_classes)]
    classes: List[ClassMetrics] = []
    for c in range(cm.num_classes):
        tp = int(counts[c, c])
        fp = int(counts[:, c].sum()) - tp
        fn = int(counts[c, :].sum()) - tp
        classes.append(ClassMetrics(class_id=c, name=names[c], iou=_ratio(tp, tp + fp + fn),
                                    precision=_ratio(tp, tp + fp), recall=_ratio(tp, tp + fn),
                                    evaluated=c in evaluated))
    defined = [m.iou for m in classes if m.evaluated and m.iou is not None]
    miou = float(np.mean(defined)) if defined else None
    return MetricsReport(classes=classes, miou=miou)


def pad_to_multiple(array: np.ndarray, multiple: int = DOWNSAMPLE) -> np.ndarray:
    h, w = array.shape[2:]
    pad_h, pad_w = -h % multiple, -w % multiple
    if not pad_h and not pad_w:
        return array
    return np.pad(array, ((0, 0), (0, 0), (0, pad_h), (0, pad_w)), mode="reflect")


def predict(model: EAFNet, inputs: Sequence[np.ndarray]) -> np.ndarray:
    """Arg-max class map (N x H x W) at full frame; ties go to the lowest class id."""
    h, w = inputs[0].shape[2:]
    model.eval()
    with no_grad():
        logits = model([pad_to_multiple(x) for x in inputs])
    return np.argmax(logits.data[:, :, :h, :w], axis=1)


def _evaluate_shard(model: EAFNet, samples: Sequence[Sample], branches: Sequence[BranchSpec],
                    schema: ClassSchema) -> ConfusionMatrix:
    cm = ConfusionMatrix(schema.num_classes)
    for sample in samples:
        predictions = predict(model, branch_inputs([sample], branches))
        cm = update_confusion(cm, sample.label[None], predictions, schema.ignore_ids)
    return cm


def evaluate_confusion(model: EAFNet, samples: Sequence[Sample], schema: ClassSchema,
                       shards: int = 1, workers: Optional[int] = None) -> ConfusionMatrix:
    if not samples:
        raise InputValidationError("evaluate needs at least one sample")
    branches = model.cfg.branches
    parts = [list(part) for part in np.array_split(np.arange(len(samples)), shards)]
    groups = [[samples[i] for i in part] for part in parts]
    model.eval()
    with ThreadPoolExecutor(max_workers=workers or settings.EVAL_WORKERS) as pool:
        matrices = list(pool.map(lambda g: _evaluate_shard(model, g, branches, schema), groups))
    cm = ConfusionMatrix(schema.num_classes)
    for part in matrices:
        cm = cm.merge(part)
    if cm.total == 0:
        logger.warning("evaluate: every pixel is ignored; all metrics are undefined")
    return cm


def evaluate(model: EAFNet, samples: Sequence[Sample], schema: ClassSchema, shards: int = 1,
             ignore_background_in_miou: bool = True, workers: Optional[int] = None) -> MetricsReport:
    cm = evaluate_confusion(model, samples, schema, shards, workers)
    evaluated = schema.evaluated if ignore_background_in_miou else list(range(schema.num_classes))
    report = compute_metrics(cm, evaluated, schema.class_names)
    logger.info(f"Evaluated {len(samples)} samples in {shards} shard(s): mIoU={report.miou}")
    return report
