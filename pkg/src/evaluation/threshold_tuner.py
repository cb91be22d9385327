import logging
from dataclasses import dataclass

import numpy as np

from src.evaluation.challenge_score import (
    LabelMatrix,
    WeightMatrix,
    as_label_matrix,
    challenge_score,
    confusion_weights,
)
from src.errors import DegenerateNormalization, LengthMismatch

logger = logging.getLogger(__name__)

GLOBAL_GRID = np.round(np.linspace(0.0, 1.0, 11), 2)
CLASS_GRID = np.round(np.linspace(0.0, 1.0, 101), 2)


@dataclass(frozen=True)
class ThresholdVector:
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 1 or np.any(values < 0.0) or np.any(values > 1.0) or not np.all(np.isfinite(values)):
            raise ValueError("thresholds must be a vector of values in [0, 1]")
        object.__setattr__(self, "values", values)

    @classmethod
    def uniform(cls, value: float, size: int) -> "ThresholdVector":
        return cls(np.full(size, float(value)))

    def __len__(self) -> int:
        return len(self.values)


class ThresholdTuner:
    def __init__(self, weights: WeightMatrix, normal_index: int):
        """
        Initialize the ThresholdTuner for one reward matrix.

        Args:
            weights (WeightMatrix): Reward matrix used to score candidate thresholds
            normal_index (int): Column of the normal class
        """
        self.weights = weights
        self.normal_index = normal_index
        self.logger = logging.getLogger(__name__)

    def _prepare(self, probabilities: np.ndarray, truth: LabelMatrix):
        probabilities = np.asarray(probabilities, dtype=np.float64)
        truth = as_label_matrix(truth)
        if probabilities.shape != truth.shape or len(truth) == 0:
            raise LengthMismatch(f"probabilities {probabilities.shape} and truth {truth.shape} must align")

        w = self.weights.values
        correct = float(np.sum(w * confusion_weights(truth, truth)))
        inactive_pred = np.zeros_like(truth)
        inactive_pred[:, self.normal_index] = True
        inactive = float(np.sum(w * confusion_weights(truth, inactive_pred)))
        if correct == inactive:
            raise DegenerateNormalization("perfect and always-normal scores are equal; score is undefined")

        def score(thresholds: np.ndarray) -> float:
            observed = float(np.sum(w * confusion_weights(truth, probabilities >= thresholds)))
            return (observed - inactive) / (correct - inactive)

        return score

    def score(self, probabilities: np.ndarray, truth: LabelMatrix, thresholds: ThresholdVector) -> float:
        pred = np.asarray(probabilities) >= thresholds.values
        return challenge_score(truth, pred, self.weights, self.normal_index)

    def optimize(self, probabilities: np.ndarray, truth: LabelMatrix) -> ThresholdVector:
        """
        Two-phase constrained grid search.

        Phase 1 tries one global threshold from {0.0, 0.1, ..., 1.0} and keeps the
        best (lowest on ties). Phase 2 visits classes in ascending order and sweeps
        that class over {0.00, 0.01, ..., 1.00} with every other threshold fixed,
        keeping the best (closest to the phase-1 value on ties, then lowest).

        Args:
            probabilities (np.ndarray): (N, C) predicted probabilities
            truth (LabelMatrix): True labels

        Returns:
            ThresholdVector: Tuned per-class thresholds
        """
        score = self._prepare(probabilities, truth)
        n_classes = np.asarray(probabilities).shape[1]

        best_global, best_score = GLOBAL_GRID[0], -np.inf
        for value in GLOBAL_GRID:
            current = score(np.full(n_classes, value))
            if current > best_score:
                best_global, best_score = value, current
        self.logger.info(f"Global threshold {best_global:.1f} scores {best_score:.4f}")

        thresholds = np.full(n_classes, best_global)
        for c in range(n_classes):
            candidate_scores = []
            for value in CLASS_GRID:
                trial = thresholds.copy()
                trial[c] = value
                candidate_scores.append(score(trial))
            candidate_scores = np.array(candidate_scores)
            best = np.flatnonzero(candidate_scores == candidate_scores.max())
            # closest to the global value, then lowest; argmin returns the first
            chosen = best[np.argmin(np.abs(CLASS_GRID[best] - best_global))]
            thresholds[c] = CLASS_GRID[chosen]
            best_score = candidate_scores[chosen]
            self.logger.debug(f"Class {c}: threshold {thresholds[c]:.2f} scores {best_score:.4f}")

        self.logger.info(f"Tuned thresholds score {best_score:.4f}")
        return ThresholdVector(thresholds)


def optimize_thresholds(
    probabilities: np.ndarray,
    truth: LabelMatrix,
    weights: WeightMatrix,
    normal_index: int,
) -> ThresholdVector:
    return ThresholdTuner(weights, normal_index).optimize(probabilities, truth)
