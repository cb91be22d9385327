import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
import pandas as pd
from sklearn.metrics import multilabel_confusion_matrix

from src.data_processing.record_io import ClassSet
from src.errors import DegenerateNormalization, LengthMismatch, MalformedClassMap, ShapeMismatch

logger = logging.getLogger(__name__)

LabelMatrix = Union[np.ndarray, Sequence[ClassSet]]


@dataclass(frozen=True)
class WeightMatrix:
    values: np.ndarray
    class_names: List[str]

    def __post_init__(self):
        size = len(self.class_names)
        if self.values.shape != (size, size):
            raise ShapeMismatch(f"weight matrix must be {size}x{size}, got {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise MalformedClassMap("weight matrix has non-finite entries")
        if not np.allclose(np.diag(self.values), 1.0):
            raise MalformedClassMap("weight matrix diagonal must be 1")


def load_weight_matrix(path, class_names: Optional[List[str]] = None) -> WeightMatrix:
    """
    Read the reward matrix CSV: a header row of class abbreviations, then one row per class.

    Args:
        path: CSV file
        class_names (List[str], optional): Expected class order; columns must match it

    Returns:
        WeightMatrix: Validated matrix
    """
    df = pd.read_csv(path)
    names = [str(c).strip() for c in df.columns]
    if class_names is not None and names != list(class_names):
        raise MalformedClassMap(f"weight matrix classes in {path} do not follow the class map order")
    return WeightMatrix(values=df.to_numpy(dtype=np.float64), class_names=names)


def as_label_matrix(labels: LabelMatrix) -> np.ndarray:
    if isinstance(labels, np.ndarray):
        return labels.astype(bool)
    return np.array([s.to_array() for s in labels], dtype=bool).reshape(len(labels), -1)


def confusion_weights(truth: np.ndarray, pred: np.ndarray) -> np.ndarray:
    """
    Multi-label confusion weight: each record spreads 1/n over truth x pred pairs, n = max(1, |truth U pred|).

    Args:
        truth (np.ndarray): (N, C) boolean labels
        pred (np.ndarray): (N, C) boolean outputs

    Returns:
        np.ndarray: (C, C) matrix, rows truth and columns prediction
    """
    truth = truth.astype(np.float64)
    pred = pred.astype(np.float64)
    n = np.maximum(1.0, np.logical_or(truth, pred).sum(axis=1))
    return (truth / n[:, None]).T @ pred


def challenge_score(truth: LabelMatrix, pred: LabelMatrix, weights: WeightMatrix, normal_index: int) -> float:
    """
    Normalized challenge score: 1 for a perfect classifier, 0 for one that always answers normal.

    Args:
        truth (LabelMatrix): True labels per record
        pred (LabelMatrix): Predicted labels per record
        weights (WeightMatrix): Reward matrix
        normal_index (int): Column of the normal class

    Returns:
        float: s_normalized

    Raises:
        LengthMismatch: Different record counts or no records
        DegenerateNormalization: The perfect and always-normal scores coincide
    """
    truth = as_label_matrix(truth)
    pred = as_label_matrix(pred)
    if truth.shape != pred.shape or len(truth) == 0:
        raise LengthMismatch(f"truth {truth.shape} and predictions {pred.shape} must align and be non-empty")

    w = weights.values
    observed = float(np.sum(w * confusion_weights(truth, pred)))
    correct = float(np.sum(w * confusion_weights(truth, truth)))

    inactive_pred = np.zeros_like(truth)
    inactive_pred[:, normal_index] = True
    inactive = float(np.sum(w * confusion_weights(truth, inactive_pred)))

    if correct == inactive:
        raise DegenerateNormalization("perfect and always-normal scores are equal; score is undefined")
    return (observed - inactive) / (correct - inactive)


def _ratio(numerator: float, denominator: float) -> Optional[float]:
    return numerator / denominator if denominator > 0 else None


def class_stats(truth: LabelMatrix, pred: LabelMatrix, class_names: List[str]) -> pd.DataFrame:
    """
    Per-class confusion counts with sensitivity, specificity and F1.

    Undefined ratios are left empty (NaN) and skipped by ``macro_averages``.

    Args:
        truth (LabelMatrix): True labels
        pred (LabelMatrix): Predicted labels
        class_names (List[str]): Abbreviations in column order

    Returns:
        pd.DataFrame: One row per class
    """
    truth = as_label_matrix(truth)
    pred = as_label_matrix(pred)
    if truth.shape != pred.shape:
        raise LengthMismatch(f"truth {truth.shape} and predictions {pred.shape} must align")

    matrices = multilabel_confusion_matrix(truth, pred, labels=list(range(truth.shape[1])))
    rows = []
    for name, matrix in zip(class_names, matrices):
        (tn, fp), (fn, tp) = matrix
        rows.append({
            "class": name,
            "TP": int(tp),
            "FP": int(fp),
            "FN": int(fn),
            "TN": int(tn),
            "sensitivity": _ratio(tp, tp + fn),
            "specificity": _ratio(tn, tn + fp),
            "F1": _ratio(2 * tp, 2 * tp + fp + fn),
        })
    return pd.DataFrame(rows).astype({"sensitivity": float, "specificity": float, "F1": float})


def macro_averages(stats: pd.DataFrame) -> Dict[str, float]:
    # pandas mean skips NaN, so undefined classes drop out
    return {col: float(stats[col].mean()) for col in ("sensitivity", "specificity", "F1")}


def metrics_report(
    truth: LabelMatrix,
    pred: LabelMatrix,
    weights: WeightMatrix,
    normal_index: int,
    output_path=None,
) -> Dict[str, object]:
    """
    Per-class table plus a summary block with macro means and s_normalized.

    Args:
        truth (LabelMatrix): True labels
        pred (LabelMatrix): Predicted labels
        weights (WeightMatrix): Reward matrix (its class names label the rows)
        normal_index (int): Normal class column
        output_path (optional): CSV destination for the per-class table

    Returns:
        Dict[str, object]: {"per_class": DataFrame, "summary": dict}
    """
    stats = class_stats(truth, pred, weights.class_names)
    summary = macro_averages(stats)
    summary["s_normalized"] = challenge_score(truth, pred, weights, normal_index)
    summary["records"] = int(len(as_label_matrix(truth)))

    if output_path is not None:
        output_path = Path(output_path)
        output_path.parent.mkdir(parents=True, exist_ok=True)
        stats.to_csv(output_path, index=False)
        logger.info(f"Wrote per-class metrics to {output_path}")

    return {"per_class": stats, "summary": summary}


def format_summary(summary: Dict[str, object]) -> str:
    return json.dumps(summary, indent=2, sort_keys=True)
