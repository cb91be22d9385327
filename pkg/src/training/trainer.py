import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field, model_validator

from src.autodiff import ops
from src.autodiff.tensor import Tape
from src.data_processing.preprocess import SignalPreprocessor, derive_rng, fit_length
from src.data_processing.record_io import ClassMap, EcgRecord
from src.errors import DegenerateNormalization, EmptyDataset, TrainingDiverged
from src.evaluation.challenge_score import WeightMatrix, challenge_score, class_stats, macro_averages
from src.evaluation.threshold_tuner import ThresholdVector, optimize_thresholds
from src.inference.predictor import Predictor, write_thresholds
from src.model.checkpoint import save_checkpoint
from src.model.se_resnet import ModelConfig, ModelParams, forward, init_params
from src.training.optimizer import Adam
from src.training.stratification import FoldAssignment, stratified_kfold

logger = logging.getLogger(__name__)


class TrainConfig(BaseModel):
    epochs: int = Field(default=50, gt=0)
    batch_size: int = Field(default=64, gt=0)
    lr_initial: float = Field(default=0.003, gt=0.0)
    lr_drop_epochs: List[int] = Field(default_factory=lambda: [20, 40])
    lr_drop_factor: float = Field(default=10.0, gt=0.0)
    adam_beta1: float = Field(default=0.9, gt=0.0, lt=1.0)
    adam_beta2: float = Field(default=0.999, gt=0.0, lt=1.0)
    adam_eps: float = Field(default=1e-8, gt=0.0)
    seed: int = 20200
    folds: int = Field(default=5, ge=2)
    pooled_thresholds: bool = False
    validate_each_epoch: bool = True
    jobs: int = Field(default=1, ge=1)

    @model_validator(mode="after")
    def check_drop_epochs(self) -> "TrainConfig":
        for epoch in self.lr_drop_epochs:
            if not 1 <= epoch <= self.epochs:
                raise ValueError(f"lr drop epoch {epoch} outside [1, {self.epochs}]")
        return self


@dataclass
class TrainHistory:
    rows: List[Dict[str, float]] = field(default_factory=list)

    def append(self, fold: int, epoch: int, lr: float, loss: float, val_score: Optional[float]) -> None:
        self.rows.append({"fold": fold, "epoch": epoch, "lr": lr, "loss": loss,
                          "val_score": np.nan if val_score is None else val_score})

    def losses(self, fold: Optional[int] = None) -> List[float]:
        return [r["loss"] for r in self.rows if fold is None or r["fold"] == fold]

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.rows, columns=["fold", "epoch", "lr", "loss", "val_score"])

    def __len__(self) -> int:
        return len(self.rows)


@dataclass
class PreparedRecord:
    record_id: str
    signal: np.ndarray
    demographics: np.ndarray
    targets: np.ndarray


@dataclass
class TrainResult:
    fold_params: List[ModelParams]
    fold_thresholds: List[ThresholdVector]
    history: TrainHistory
    assignment: FoldAssignment
    oof_probabilities: np.ndarray
    pooled_thresholds: Optional[ThresholdVector] = None
    summary: Optional[pd.DataFrame] = None


def prepare_training_records(records: Sequence[EcgRecord], jobs: int = 1) -> List[PreparedRecord]:
    """Resample and encode once; only the clipping offset changes between epochs."""
    preprocessor = SignalPreprocessor()

    def prepare(record: EcgRecord) -> PreparedRecord:
        return PreparedRecord(
            record_id=record.meta.record_id,
            signal=preprocessor.resample(record),
            demographics=preprocessor.demographics(record),
            targets=record.labels.to_array().astype(np.float64),
        )

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(prepare, records))
    return [prepare(r) for r in records]


def _clip_batch(batch: Sequence[PreparedRecord], seed: int, fold: int, epoch: int, pool=None):
    # One stream per (record, fold, epoch), independent of worker count
    def clip(item: PreparedRecord) -> np.ndarray:
        return fit_length(item.signal, "train", derive_rng(seed, f"{item.record_id}/{fold}/{epoch}"))

    clips = list(pool.map(clip, batch)) if pool is not None else [clip(item) for item in batch]
    signals = np.stack(clips)
    demographics = np.stack([item.demographics for item in batch])
    targets = np.stack([item.targets for item in batch])
    return signals, demographics, targets


def train_epoch(
    params: ModelParams,
    optimizer: Adam,
    data: Sequence[PreparedRecord],
    cfg: TrainConfig,
    rng: np.random.Generator,
    epoch: int,
    fold: int = 0,
) -> float:
    """
    One pass over shuffled training data with fresh random clips.

    Args:
        params (ModelParams): Parameters, updated in place
        optimizer (Adam): Optimizer bound to ``params``
        data (Sequence[PreparedRecord]): Training records
        cfg (TrainConfig): Training settings
        rng (np.random.Generator): Shuffle and dropout random source
        epoch (int): 1-based epoch, selects the learning rate
        fold (int): Fold index, part of the clipping seed

    Returns:
        float: Record-weighted mean BCE loss

    Raises:
        TrainingDiverged: A batch loss is not finite
    """
    lr = optimizer.set_epoch(epoch)
    order = rng.permutation(len(data))
    total_loss, seen = 0.0, 0

    pool = ThreadPoolExecutor(max_workers=cfg.jobs) if cfg.jobs > 1 else None
    try:
        for start in range(0, len(order), cfg.batch_size):
            batch = [data[i] for i in order[start:start + cfg.batch_size]]
            signals, demographics, targets = _clip_batch(batch, cfg.seed, fold, epoch, pool)

            with Tape() as tape:
                _, logits = forward(signals, demographics, params, mode="train", rng=rng)
                loss = ops.bce_mean(logits, targets)
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingDiverged(f"non-finite loss {value} at epoch {epoch}, batch starting {start}")

            optimizer.zero_grad()
            tape.backward(loss)
            optimizer.step()

            total_loss += value * len(batch)
            seen += len(batch)
            logger.debug(f"epoch {epoch} batch {start // cfg.batch_size}: loss {value:.5f} (lr {lr:g})")
    finally:
        if pool is not None:
            pool.shutdown()

    return total_loss / seen


def _validation_score(probabilities: np.ndarray, truth: np.ndarray, weights: WeightMatrix,
                      normal_index: int) -> Optional[float]:
    try:
        return challenge_score(truth, probabilities >= 0.5, weights, normal_index)
    except DegenerateNormalization:
        return None


class Trainer:
    def __init__(self, model_config: ModelConfig, cfg: TrainConfig, class_map: ClassMap, weights: WeightMatrix):
        """
        Initialize the Trainer for cross-validated training.

        Args:
            model_config (ModelConfig): Architecture trained in every fold
            cfg (TrainConfig): Optimizer, schedule and cross-validation settings
            class_map (ClassMap): Class map the labels come from
            weights (WeightMatrix): Reward matrix for validation scores and threshold tuning
        """
        self.model_config = model_config
        self.cfg = cfg
        self.class_map = class_map
        self.weights = weights
        self.normal_index = class_map.normal_class_index
        self.logger = logging.getLogger(__name__)

    def fit(self, train: Sequence[PreparedRecord], fold: int, history: TrainHistory,
            validation: Sequence[EcgRecord] = ()) -> ModelParams:
        """
        Train a fresh model for the configured number of epochs.

        Args:
            train (Sequence[PreparedRecord]): Training records
            fold (int): Fold index, seeds initialization and shuffling
            history (TrainHistory): Receives one row per epoch
            validation (Sequence[EcgRecord]): Held-out records scored after each epoch

        Returns:
            ModelParams: Trained parameters
        """
        params = init_params(self.model_config, np.random.default_rng([self.cfg.seed, fold, 0]))
        optimizer = Adam(params.parameters(), self.cfg)
        rng = np.random.default_rng([self.cfg.seed, fold, 1])
        truth = np.array([r.labels.to_array() for r in validation], dtype=bool)

        for epoch in range(1, self.cfg.epochs + 1):
            loss = train_epoch(params, optimizer, train, self.cfg, rng, epoch, fold)
            val_score = None
            if self.cfg.validate_each_epoch and len(validation):
                probabilities = Predictor([params], jobs=self.cfg.jobs).probability_matrix(validation)
                val_score = _validation_score(probabilities, truth, self.weights, self.normal_index)
            history.append(fold + 1, epoch, optimizer.lr, loss, val_score)
            shown = "n/a" if val_score is None else f"{val_score:.4f}"
            self.logger.info(f"fold {fold + 1} epoch {epoch}: loss {loss:.5f} lr {optimizer.lr:g} val {shown}")
        return params

    def cross_validate(self, records: Sequence[EcgRecord]) -> TrainResult:
        """
        Stratified k-fold training with per-fold threshold tuning on the held-out fold.

        Args:
            records (Sequence[EcgRecord]): Labeled dataset

        Returns:
            TrainResult: Per-fold parameters and thresholds, history and pooled out-of-fold outputs

        Raises:
            EmptyDataset: No records
            TrainingDiverged: A loss became non-finite
        """
        if not records:
            raise EmptyDataset("no records to train on")
        records = list(records)
        prepared = prepare_training_records(records, self.cfg.jobs)
        truth = np.array([r.labels.to_array() for r in records], dtype=bool)

        assignment = stratified_kfold([r.labels for r in records], self.cfg.folds, self.cfg.seed)
        history = TrainHistory()
        oof = np.zeros(truth.shape)
        fold_params, fold_thresholds = [], []

        for fold in range(self.cfg.folds):
            train_idx, test_idx = assignment.train_indices(fold), assignment.test_indices(fold)
            self.logger.info(f"fold {fold + 1}: {len(train_idx)} training / {len(test_idx)} held-out records")
            held_out = [records[i] for i in test_idx]

            params = self.fit([prepared[i] for i in train_idx], fold, history, held_out)
            oof[test_idx] = Predictor([params], jobs=self.cfg.jobs).probability_matrix(held_out)
            thresholds = optimize_thresholds(oof[test_idx], truth[test_idx], self.weights, self.normal_index)

            fold_params.append(params)
            fold_thresholds.append(thresholds)

        result = TrainResult(
            fold_params=fold_params,
            fold_thresholds=fold_thresholds,
            history=history,
            assignment=assignment,
            oof_probabilities=oof,
        )
        if self.cfg.pooled_thresholds:
            result.pooled_thresholds = optimize_thresholds(oof, truth, self.weights, self.normal_index)
        result.summary = cv_summary(result, truth, self.weights, self.normal_index, self.class_map.abbreviations)
        return result


def _tuned_predictions(result: TrainResult, probabilities: np.ndarray) -> np.ndarray:
    if result.pooled_thresholds is not None:
        return probabilities >= result.pooled_thresholds.values
    pred = np.zeros(probabilities.shape, dtype=bool)
    for fold, thresholds in enumerate(result.fold_thresholds):
        rows = result.assignment.test_indices(fold)
        pred[rows] = probabilities[rows] >= thresholds.values
    return pred


def cv_summary(result: TrainResult, truth: np.ndarray, weights: WeightMatrix, normal_index: int,
               class_names: List[str]) -> pd.DataFrame:
    """
    Pooled out-of-fold metrics at uniform 0.5 thresholds ("default") and tuned thresholds ("final").

    Returns:
        pd.DataFrame: Rows default/final with sensitivity, specificity, F1 and s_normalized
    """
    rows = []
    for name, pred in (("default", result.oof_probabilities >= 0.5),
                       ("final", _tuned_predictions(result, result.oof_probabilities))):
        row = {"thresholds": name}
        row.update(macro_averages(class_stats(truth, pred, class_names)))
        row["s_normalized"] = challenge_score(truth, pred, weights, normal_index)
        rows.append(row)
    return pd.DataFrame(rows, columns=["thresholds", "sensitivity", "specificity", "F1", "s_normalized"])


def oof_frame(records: Sequence[EcgRecord], result: TrainResult, class_names: List[str]) -> pd.DataFrame:
    df = pd.DataFrame({"record_id": [r.meta.record_id for r in records], "fold": result.assignment.folds + 1})
    probabilities = pd.DataFrame(result.oof_probabilities, columns=[f"p_{c}" for c in class_names])
    truth = pd.DataFrame(np.array([r.labels.to_array() for r in records], dtype=int),
                         columns=[f"y_{c}" for c in class_names])
    return pd.concat([df, probabilities, truth], axis=1)


def write_run_directory(run_dir, records: Sequence[EcgRecord], result: TrainResult, class_map: ClassMap) -> Path:
    """
    Lay out a training run.

    ``fold<i>/model.senet`` and ``fold<i>/thresholds.csv`` per fold (1-based),
    plus ``history.csv``, ``oof_probabilities.csv``, ``cv_summary.csv`` and,
    when tuned, ``pooled_thresholds.csv``.
    """
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    names = class_map.abbreviations
    identity = class_map.identity()

    for fold, (params, thresholds) in enumerate(zip(result.fold_params, result.fold_thresholds), start=1):
        save_checkpoint(run_dir / f"fold{fold}" / "model.senet", params, identity, names)
        write_thresholds(thresholds, names, run_dir / f"fold{fold}" / "thresholds.csv")

    result.history.to_frame().to_csv(run_dir / "history.csv", index=False)
    oof_frame(records, result, names).to_csv(run_dir / "oof_probabilities.csv", index=False)
    if result.summary is not None:
        result.summary.to_csv(run_dir / "cv_summary.csv", index=False)
    if result.pooled_thresholds is not None:
        write_thresholds(result.pooled_thresholds, names, run_dir / "pooled_thresholds.csv")

    logger.info(f"Wrote training run to {run_dir}")
    return run_dir


def train_model(
    records: Sequence[EcgRecord],
    cfg: TrainConfig,
    model_config: ModelConfig,
    class_map: ClassMap,
    weights: WeightMatrix,
    run_dir=None,
) -> TrainResult:
    """
    Cross-validated training; writes the run directory when ``run_dir`` is given.

    Args:
        records (Sequence[EcgRecord]): Labeled dataset
        cfg (TrainConfig): Training settings
        model_config (ModelConfig): Architecture
        class_map (ClassMap): Class map
        weights (WeightMatrix): Reward matrix
        run_dir (optional): Output directory

    Returns:
        TrainResult: Trained folds and their outputs
    """
    result = Trainer(model_config, cfg, class_map, weights).cross_validate(records)
    if run_dir is not None:
        write_run_directory(run_dir, records, result, class_map)
    return result
