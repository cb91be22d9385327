import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Union

import numpy as np
import pandas as pd

from src.data_processing.preprocess import SignalPreprocessor
from src.data_processing.record_io import ClassMap, ClassSet, EcgRecord
from src.errors import MalformedClassMap, ModelClassMapMismatch
from src.evaluation.threshold_tuner import ThresholdVector
from src.model.checkpoint import Checkpoint
from src.model.se_resnet import ModelParams, forward

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Prediction:
    probabilities: np.ndarray
    binary: ClassSet
    per_patch: np.ndarray


def apply_thresholds(probabilities: np.ndarray, thresholds: ThresholdVector) -> ClassSet:
    """Class c is set iff p_c >= t_c; an empty set is a valid answer."""
    return ClassSet.from_array(np.asarray(probabilities) >= thresholds.values)


def _check_class_map(models: Sequence, class_map: Optional[ClassMap]) -> None:
    if class_map is None:
        return
    identity = class_map.identity()
    for checkpoint in models:
        if isinstance(checkpoint, Checkpoint) and checkpoint.class_map_identity != identity:
            raise ModelClassMapMismatch(
                f"checkpoint classes {checkpoint.class_names[:3]}... were trained with a different class map"
            )


class Predictor:
    def __init__(self, models: Sequence[Union[Checkpoint, ModelParams]], class_map: Optional[ClassMap] = None,
                 jobs: int = 1):
        """
        Initialize the Predictor over one model or a cross-fold ensemble.

        Args:
            models (Sequence): Loaded checkpoints or in-memory parameters, averaged with equal weight
            class_map (ClassMap, optional): Requested class map; checked against every checkpoint
            jobs (int): Worker threads for multi-record prediction
        """
        if not models:
            raise ValueError("at least one model is required")
        _check_class_map(models, class_map)
        self.models = [m.params if isinstance(m, Checkpoint) else m for m in models]
        self.jobs = max(1, jobs)
        self.preprocessor = SignalPreprocessor()
        self.logger = logging.getLogger(__name__)

    def patch_probabilities(self, record: EcgRecord) -> np.ndarray:
        """
        Eval-mode probabilities for every patch, averaged over models.

        Args:
            record (EcgRecord): Parsed record at any sampling rate

        Returns:
            np.ndarray: (P, classes) matrix
        """
        inputs = self.preprocessor.prepare(record, mode="eval")
        signals = np.stack([item.signal for item in inputs])
        demographics = np.stack([item.demographics for item in inputs])

        total = None
        for params in self.models:
            probabilities, _ = forward(signals, demographics, params, mode="eval")
            total = probabilities if total is None else total + probabilities
        return total / len(self.models)

    def predict(self, record: EcgRecord, thresholds: ThresholdVector) -> Prediction:
        per_patch = self.patch_probabilities(record)
        probabilities = per_patch.mean(axis=0)
        return Prediction(
            probabilities=probabilities,
            binary=apply_thresholds(probabilities, thresholds),
            per_patch=per_patch,
        )

    def predict_many(self, records: Sequence[EcgRecord], thresholds: ThresholdVector) -> List[Prediction]:
        if self.jobs > 1:
            with ThreadPoolExecutor(max_workers=self.jobs) as pool:
                predictions = list(pool.map(lambda r: self.predict(r, thresholds), records))
        else:
            predictions = [self.predict(r, thresholds) for r in records]
        self.logger.info(f"Predicted {len(predictions)} records with {len(self.models)} model(s)")
        return predictions

    def probability_matrix(self, records: Sequence[EcgRecord]) -> np.ndarray:
        """Record-level probabilities stacked into an (N, classes) matrix."""
        if self.jobs > 1:
            with ThreadPoolExecutor(max_workers=self.jobs) as pool:
                rows = list(pool.map(lambda r: self.patch_probabilities(r).mean(axis=0), records))
        else:
            rows = [self.patch_probabilities(r).mean(axis=0) for r in records]
        return np.stack(rows)


def predict_record(
    models: Sequence[Checkpoint],
    record: EcgRecord,
    thresholds: ThresholdVector,
    class_map: Optional[ClassMap] = None,
) -> Prediction:
    return Predictor(models, class_map).predict(record, thresholds)


def write_prediction_csv(record_id: str, prediction: Prediction, class_map: ClassMap, directory) -> Path:
    """
    Write one record's output: class abbreviations, binary labels, probabilities.

    Args:
        record_id (str): Record identifier, used as the file name
        prediction (Prediction): Prediction to write
        class_map (ClassMap): Supplies the column names
        directory: Output directory

    Returns:
        Path: Written file
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / f"{record_id}.csv"
    # mixed int/float rows
    path.write_text(
        ",".join(class_map.abbreviations) + "\n"
        + ",".join(str(int(v)) for v in prediction.binary.to_array()) + "\n"
        + ",".join(repr(float(p)) for p in prediction.probabilities) + "\n",
        encoding="utf-8",
    )
    return path


def read_prediction_csv(path) -> pd.DataFrame:
    return pd.read_csv(path)


def write_thresholds(thresholds: ThresholdVector, class_names: List[str], path) -> Path:
    """Write ``class,threshold`` lines in class order."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pd.DataFrame({"class": class_names, "threshold": thresholds.values}).to_csv(path, index=False, header=False)
    return path


def read_thresholds(path, class_names: List[str]) -> ThresholdVector:
    """
    Read a ``class,threshold`` file and order it by ``class_names``.

    Raises:
        MalformedClassMap: Missing or unknown classes
    """
    df = pd.read_csv(path, header=None, names=["class", "threshold"])
    lookup = dict(zip(df["class"].astype(str).str.strip(), df["threshold"].astype(float)))
    if set(lookup) != set(class_names):
        raise MalformedClassMap(f"{path} does not list exactly the scored classes")
    return ThresholdVector(np.array([lookup[name] for name in class_names]))
