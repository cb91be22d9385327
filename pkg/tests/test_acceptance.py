import pytest
import numpy as np
import sys
import os

# Add parent directory to path to access src modules
sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..'))

from src.cli.main import main
from src.data_processing.record_io import load_class_map
from src.evaluation.challenge_score import class_stats, load_weight_matrix
from src.inference.predictor import Predictor
from src.model.se_resnet import ModelConfig
from src.synth.generator import SYNTH_LABELS, generate_dataset
from src.training.stratification import stratified_kfold
from src.training.trainer import TrainConfig, TrainHistory, Trainer, prepare_training_records, train_model

DATA_DIR = os.path.join(os.path.dirname(__file__), '..', 'data')


@pytest.mark.slow
def test_desk_scale_learning():
    """Test that a quarter-width model learns the synthetic labels on a held-out split."""
    class_map = load_class_map(os.path.join(DATA_DIR, 'class_map.csv'))
    weights = load_weight_matrix(os.path.join(DATA_DIR, 'weights.csv'), class_map.abbreviations)
    records = generate_dataset({label: 100 for label in SYNTH_LABELS}, class_map, noise_std_mv=0.05, seed=11)

    assignment = stratified_kfold([r.labels for r in records], k=5, seed=11)
    train = [records[i] for i in assignment.train_indices(0)]
    held_out = [records[i] for i in assignment.test_indices(0)]

    cfg = TrainConfig(epochs=15, lr_drop_epochs=[], seed=11, validate_each_epoch=False)
    trainer = Trainer(ModelConfig(width_scale=0.25), cfg, class_map, weights)
    history = TrainHistory()
    params = trainer.fit(prepare_training_records(train), 0, history)

    losses = history.losses()
    assert losses[4] < losses[0]

    probabilities = Predictor([params]).probability_matrix(held_out)
    truth = np.array([r.labels.to_array() for r in held_out])
    columns = [class_map.index_of(label) for label in SYNTH_LABELS]
    stats = class_stats(truth[:, columns], probabilities[:, columns] >= 0.5, list(SYNTH_LABELS))
    assert stats["F1"].mean() >= 0.90


def test_training_runs_are_reproducible(tmp_path):
    """Test that equal seeds give byte-identical histories and checkpoints."""
    data = tmp_path / "data"
    assert main(["synth", "--out", str(data), "--counts", "SNR=3,LAD=3", "--duration", "2", "--seed", "7"]) == 0

    runs = []
    for name in ("a", "b"):
        run = tmp_path / name
        assert main(["train", "--data", str(data), "--out", str(run), "--epochs", "2", "--folds", "2",
                     "--batch-size", "3", "--width-scale", "0.125", "--se-reduction", "4",
                     "--seed", "7", "--jobs", "1"]) == 0
        runs.append(run)

    first, second = runs
    assert (first / "history.csv").read_bytes() == (second / "history.csv").read_bytes()
    for fold in (1, 2):
        path = f"fold{fold}/model.senet"
        assert (first / path).read_bytes() == (second / path).read_bytes()
    assert (first / "oof_probabilities.csv").read_bytes() == (second / "oof_probabilities.csv").read_bytes()


@pytest.mark.slow
def test_tuned_thresholds_after_cross_validation():
    """Test that tuned thresholds score at least the uniform 0.5 vector and reach 0.5 s_normalized."""
    class_map = load_class_map(os.path.join(DATA_DIR, 'class_map.csv'))
    weights = load_weight_matrix(os.path.join(DATA_DIR, 'weights.csv'), class_map.abbreviations)
    records = generate_dataset({label: 50 for label in SYNTH_LABELS}, class_map, noise_std_mv=0.05, seed=12)

    cfg = TrainConfig(epochs=15, lr_drop_epochs=[], folds=3, seed=12, validate_each_epoch=False)
    result = train_model(records, cfg, ModelConfig(width_scale=0.25), class_map, weights)

    scores = result.summary.set_index("thresholds")["s_normalized"]
    assert scores["final"] >= scores["default"] - 1e-12
    assert scores["final"] >= 0.5
