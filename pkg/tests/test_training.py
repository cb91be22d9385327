import pytest
import numpy as np
import pandas as pd
import sys
import os

# Add parent directory to path to access src modules
sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..'))

from src.autodiff.tensor import Tensor
from src.data_processing.record_io import ClassSet, load_class_map
from src.errors import EmptyDataset, ShapeMismatch
from src.evaluation.challenge_score import load_weight_matrix
from src.model.se_resnet import ModelConfig, init_params
from src.synth.generator import generate_dataset
from src.training.optimizer import Adam, AdamState, adam_step, lr_schedule
from src.training.stratification import IterativeStratifiedKFold, rebalance_folds, stratified_kfold
from src.training.trainer import (
    TrainConfig,
    TrainHistory,
    prepare_training_records,
    train_epoch,
    train_model,
)

DATA_DIR = os.path.join(os.path.dirname(__file__), '..', 'data')


def tiny_model_config():
    return ModelConfig(width_scale=0.125, se_reduction=4)


def assert_within_one_of_share(labels, folds, k):
    share = labels.sum(axis=0) / k
    for f in range(k):
        counts = labels[folds == f].sum(axis=0)
        assert np.all(np.abs(counts - share) <= 1.0 + 1e-9), (f, counts, share)
    sizes = np.bincount(folds, minlength=k)
    assert np.all(np.abs(sizes - len(folds) / k) <= 1.0 + 1e-9)


def test_lr_schedule_steps():
    """Test the step learning-rate schedule."""
    cfg = TrainConfig()
    assert lr_schedule(1, cfg) == pytest.approx(3e-3)
    assert lr_schedule(19, cfg) == pytest.approx(3e-3)
    assert lr_schedule(20, cfg) == pytest.approx(3e-4)
    assert lr_schedule(40, cfg) == pytest.approx(3e-5)
    assert lr_schedule(50, cfg) == pytest.approx(3e-5)


def test_train_config_validation():
    """Test that drop epochs must fall inside the run."""
    with pytest.raises(ValueError):
        TrainConfig(epochs=10)
    assert TrainConfig(epochs=10, lr_drop_epochs=[5]).lr_drop_epochs == [5]
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)


def test_adam_first_step_moves_against_gradient_sign():
    """Test that the first bias-corrected step is about lr * sign(g)."""
    cfg = TrainConfig()
    param = Tensor(np.array([1.0, -2.0, 0.5]), requires_grad=True)
    grad = np.array([0.3, -4.0, 1e-3])
    state = adam_step([param], [grad], AdamState.zeros_like([param]), 0.01, cfg)
    assert state.step == 1
    assert np.allclose(param.data, np.array([1.0, -2.0, 0.5]) - 0.01 * np.sign(grad), atol=1e-7)


def test_adam_zero_gradient_leaves_parameters():
    """Test that zero and missing gradients produce no movement."""
    cfg = TrainConfig()
    a = Tensor(np.ones(3), requires_grad=True)
    b = Tensor(np.ones(2), requires_grad=True)
    adam_step([a, b], [np.zeros(3), None], AdamState.zeros_like([a, b]), 0.01, cfg)
    assert np.array_equal(a.data, np.ones(3))
    assert np.array_equal(b.data, np.ones(2))


def test_adam_rejects_misaligned_gradients():
    """Test shape checks on gradients and state."""
    cfg = TrainConfig()
    a = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ShapeMismatch):
        adam_step([a], [np.zeros(2)], AdamState.zeros_like([a]), 0.01, cfg)
    with pytest.raises(ShapeMismatch):
        adam_step([a], [], AdamState.zeros_like([a]), 0.01, cfg)


def test_adam_minimizes_quadratic():
    """Test the optimizer wrapper on f(x) = sum(x^2)."""
    cfg = TrainConfig(lr_initial=0.1, lr_drop_epochs=[])
    x = Tensor(np.array([3.0, -2.0]), requires_grad=True)
    optimizer = Adam([x], cfg)
    optimizer.set_epoch(1)
    for _ in range(1000):
        optimizer.zero_grad()
        x.grad = 2.0 * x.data
        optimizer.step()
    assert np.abs(x.data).max() < 0.1


def test_stratified_kfold_equal_sizes_without_labels():
    """Test that 100 unlabeled records split 20 per fold."""
    assignment = stratified_kfold([ClassSet.empty() for _ in range(100)], k=5, seed=0)
    assert np.bincount(assignment.folds, minlength=5).tolist() == [20] * 5


def test_stratified_kfold_spreads_rare_label():
    """Test that 7 positives land as 1 or 2 per fold."""
    label_sets = [ClassSet.from_indices([3]) if i < 7 else ClassSet.empty() for i in range(50)]
    assignment = stratified_kfold(label_sets, k=5, seed=1)
    per_fold = [int(np.sum(assignment.folds[:7] == f)) for f in range(5)]
    assert sum(per_fold) == 7
    assert set(per_fold) <= {1, 2}


def test_stratified_kfold_partition_and_determinism():
    """Test that every record lands in exactly one fold, reproducibly."""
    rng = np.random.default_rng(2)
    label_sets = [ClassSet.from_indices(rng.choice(24, size=rng.integers(0, 3), replace=False)) for _ in range(200)]
    first = stratified_kfold(label_sets, k=5, seed=9)
    second = stratified_kfold(label_sets, k=5, seed=9)
    assert np.array_equal(first.folds, second.folds)
    assert set(first.folds.tolist()) == set(range(5))

    seen = np.concatenate([first.test_indices(f) for f in range(5)])
    assert sorted(seen.tolist()) == list(range(200))
    assert len(np.intersect1d(first.train_indices(0), first.test_indices(0))) == 0

    labels = np.array([s.to_array() for s in label_sets])
    assert_within_one_of_share(labels, first.folds, 5)


def test_stratified_kfold_multi_label_balance():
    """Test per-label fold counts within 1 of the proportional share for records with 1 to 3 labels."""
    for fixture in range(20):
        rng = np.random.default_rng(100 + fixture)
        label_sets = [ClassSet.from_indices(rng.choice(12, size=rng.integers(1, 4), replace=False))
                      for _ in range(150)]
        assignment = stratified_kfold(label_sets, k=5, seed=fixture)
        labels = np.array([s.to_array() for s in label_sets], dtype=float)
        assert_within_one_of_share(labels, assignment.folds, 5)


def test_rebalance_folds_repairs_skewed_assignment():
    """Test that a lopsided assignment is moved back inside the band without losing records."""
    labels = np.zeros((18, 24), dtype=bool)
    labels[:, 2] = True
    labels[::3, 5] = True
    skewed = np.array([0] * 7 + [1] * 3 + [2] * 3 + [3] * 3 + [4] * 2)
    repaired = rebalance_folds(labels, skewed, 5)
    assert len(repaired) == 18
    assert_within_one_of_share(labels.astype(float), repaired, 5)
    assert skewed.tolist() == [0] * 7 + [1] * 3 + [2] * 3 + [3] * 3 + [4] * 2


def test_stratified_kfold_empty():
    """Test that an empty dataset cannot be split."""
    with pytest.raises(EmptyDataset):
        stratified_kfold([], k=5)


def test_cross_validator_wrapper():
    """Test the sklearn-style split interface."""
    y = np.zeros((30, 24), dtype=int)
    y[:10, 1] = 1
    splitter = IterativeStratifiedKFold(n_splits=3, seed=0)
    splits = list(splitter.split(np.zeros((30, 1)), y))
    assert splitter.get_n_splits() == 3
    assert len(splits) == 3
    for train, test in splits:
        assert len(train) + len(test) == 30
        assert y[test, 1].sum() in (3, 4)


def test_train_history_frame():
    """Test history rows and missing validation scores."""
    history = TrainHistory()
    history.append(1, 1, 0.003, 0.7, None)
    history.append(1, 2, 0.003, 0.6, 0.25)
    frame = history.to_frame()
    assert list(frame.columns) == ["fold", "epoch", "lr", "loss", "val_score"]
    assert np.isnan(frame.loc[0, "val_score"])
    assert history.losses(fold=1) == [0.7, 0.6]


def test_train_epoch_finite_loss_and_updates():
    """Test one epoch of a reduced-width model on synthetic records."""
    class_map = load_class_map(os.path.join(DATA_DIR, 'class_map.csv'))
    records = generate_dataset({"SNR": 2, "LAD": 2}, class_map, seed=3)
    data = prepare_training_records(records)
    assert data[0].signal.shape[1] == 2570

    cfg = TrainConfig(epochs=1, batch_size=2, lr_drop_epochs=[], seed=4)
    params = init_params(tiny_model_config(), np.random.default_rng(5))
    before = params.tensors["classifier.weight"].data.copy()
    optimizer = Adam(params.parameters(), cfg)

    loss = train_epoch(params, optimizer, data, cfg, np.random.default_rng(6), epoch=1)
    assert np.isfinite(loss)
    assert loss > 0.0
    assert not np.array_equal(params.tensors["classifier.weight"].data, before)
    assert optimizer.state.step == 2


def test_train_model_writes_run_directory(tmp_path):
    """Test a two-fold run end to end and its output files."""
    class_map = load_class_map(os.path.join(DATA_DIR, 'class_map.csv'))
    weights = load_weight_matrix(os.path.join(DATA_DIR, 'weights.csv'), class_map.abbreviations)
    records = generate_dataset({"SNR": 4, "LAD": 4}, class_map, seed=7, duration_s=4.0)

    cfg = TrainConfig(epochs=1, batch_size=4, lr_drop_epochs=[], folds=2, seed=8, pooled_thresholds=True)
    result = train_model(records, cfg, tiny_model_config(), class_map, weights, run_dir=tmp_path)

    assert len(result.fold_params) == 2
    assert result.oof_probabilities.shape == (8, 24)
    assert len(result.history) == 2
    assert list(result.summary["thresholds"]) == ["default", "final"]

    for fold in (1, 2):
        assert (tmp_path / f"fold{fold}" / "model.senet").is_file()
        assert (tmp_path / f"fold{fold}" / "thresholds.csv").is_file()
    assert (tmp_path / "pooled_thresholds.csv").is_file()

    oof = pd.read_csv(tmp_path / "oof_probabilities.csv")
    assert list(oof.columns[:3]) == ["record_id", "fold", "p_IAVB"]
    assert sorted(oof["fold"].unique().tolist()) == [1, 2]
    history = pd.read_csv(tmp_path / "history.csv")
    assert history["fold"].tolist() == [1, 2]
