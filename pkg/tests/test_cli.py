import json
import pandas as pd
import sys
import os

# Add parent directory to path to access src modules
sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..'))

from src.cli.main import build_parser, main
from src.data_processing.record_io import load_class_map, load_dataset

FIXTURES = os.path.join(os.path.dirname(__file__), 'fixtures')


def test_parser_defaults():
    """Test defaults of the train subcommand."""
    args = build_parser().parse_args(["train", "--data", "d", "--out", "o"])
    assert args.epochs == 50
    assert args.batch_size == 64
    assert args.lr_drop_epochs == [20, 40]
    assert args.folds == 5
    assert args.width_scale == 1.0


def test_usage_errors_exit_2(tmp_path):
    """Test exit code 2 for bad commands and missing paths."""
    assert main(["no-such-command"]) == 2
    assert main(["train", "--data", str(tmp_path / "missing"), "--out", str(tmp_path / "run")]) == 2
    assert main(["kappa", "--ratings", str(tmp_path / "missing.csv")]) == 2
    assert main(["synth", "--out", str(tmp_path), "--counts", "LAD=two"]) == 2


def test_data_errors_exit_3(tmp_path):
    """Test exit code 3 for unusable inputs."""
    ratings = tmp_path / "ratings.csv"
    ratings.write_text("example_id,rater1,rater2\nE1,unsure,pos\nE2,neg,unsure\n")
    assert main(["kappa", "--ratings", str(ratings)]) == 3

    empty = tmp_path / "empty"
    empty.mkdir()
    assert main(["train", "--data", str(empty), "--out", str(tmp_path / "run")]) == 3
    assert main(["synth", "--out", str(tmp_path / "s"), "--counts", "LAD+RAD=2"]) == 3


def test_kappa_command(capsys):
    """Test the kappa report on a rater file."""
    assert main(["kappa", "--ratings", os.path.join(FIXTURES, 'kappa_clinician1.csv')]) == 0
    out = capsys.readouterr().out
    assert "kappa=-0.057" in out
    assert "disagreements=47/87" in out

    assert main(["kappa", "--ratings", os.path.join(FIXTURES, 'kappa_clinician1.csv'), "--include-unsure"]) == 0
    assert "n_used=90" in capsys.readouterr().out


def test_synth_train_predict_eval_pipeline(tmp_path, capsys):
    """Test every batch command end to end on a small synthetic set."""
    data = tmp_path / "data"
    run = tmp_path / "run"
    predictions = tmp_path / "pred"

    assert main(["synth", "--out", str(data), "--counts", "LAD=4,SNR=4", "--duration", "2", "--seed", "1"]) == 0
    assert len(list(data.glob("*.hea"))) == 8
    assert len(list(data.glob("*.dat"))) == 8

    assert main(["train", "--data", str(data), "--out", str(run), "--epochs", "1", "--folds", "2",
                 "--batch-size", "4", "--width-scale", "0.125", "--se-reduction", "4"]) == 0
    assert "s_normalized" in capsys.readouterr().out
    assert (run / "fold1" / "model.senet").is_file()
    assert (run / "fold2" / "thresholds.csv").is_file()

    before = sorted(p.relative_to(run).as_posix() for p in run.rglob("*"))
    retuned = tmp_path / "retuned.csv"
    assert main(["thresholds", "--run", str(run), "--out", str(retuned)]) == 0
    assert retuned.is_file()
    assert sorted(p.relative_to(run).as_posix() for p in run.rglob("*")) == before

    assert main(["predict", "--data", str(data), "--run", str(run), "--ensemble",
                 "--thresholds", str(retuned), "--out", str(predictions)]) == 0
    files = sorted(predictions.glob("*.csv"))
    assert [f.stem for f in files] == [f"S{i:06d}" for i in range(1, 9)]
    assert len(pd.read_csv(files[0]).columns) == 24

    metrics = tmp_path / "metrics.csv"
    assert main(["eval", "--data", str(data), "--predictions", str(predictions), "--out", str(metrics)]) == 0
    assert len(pd.read_csv(metrics)) == 24
    assert "s_normalized" in capsys.readouterr().out


def test_predict_requires_models(tmp_path):
    """Test that predict without checkpoints is a usage error."""
    data = tmp_path / "data"
    assert main(["synth", "--out", str(data), "--counts", "SNR=1", "--duration", "1"]) == 0
    assert main(["predict", "--data", str(data), "--out", str(tmp_path / "pred")]) == 2
    assert main(["predict", "--data", str(data), "--run", str(tmp_path), "--out", str(tmp_path / "pred")]) == 2


def test_thresholds_requires_out_and_columns(tmp_path):
    """Test that re-tuning needs an explicit output and a complete outputs file."""
    run = tmp_path / "run"
    run.mkdir()
    assert main(["thresholds", "--run", str(run)]) == 2

    (run / "oof_probabilities.csv").write_text("record_id,fold,p_IAVB\nS000001,1,0.3\n")
    assert main(["thresholds", "--run", str(run), "--out", str(tmp_path / "t.csv")]) == 3
    assert not (tmp_path / "t.csv").exists()
    assert [p.name for p in run.iterdir()] == ["oof_probabilities.csv"]


def test_eval_of_truth_scores_one(tmp_path, capsys):
    """Test that predictions equal to the labels score s_normalized 1.0."""
    data = tmp_path / "data"
    predictions = tmp_path / "pred"
    predictions.mkdir()
    assert main(["synth", "--out", str(data), "--counts", "LAD=2,SB=2,AF+RAD=1,SNR=2", "--duration", "1"]) == 0

    class_map = load_class_map(os.path.join(os.path.dirname(__file__), '..', 'data', 'class_map.csv'))
    for record in load_dataset(data, class_map):
        bits = record.labels.to_array().astype(int)
        (predictions / f"{record.meta.record_id}.csv").write_text(
            ",".join(class_map.abbreviations) + "\n"
            + ",".join(str(b) for b in bits) + "\n"
            + ",".join(f"{float(b)}" for b in bits) + "\n")
    capsys.readouterr()

    assert main(["eval", "--data", str(data), "--predictions", str(predictions)]) == 0
    out = capsys.readouterr().out
    summary = json.loads(out[out.rindex("{"):])
    assert abs(summary["s_normalized"] - 1.0) < 1e-12
    assert summary["records"] == 7


def test_eval_rejects_prediction_without_class_columns(tmp_path):
    """Test that a prediction file lacking class columns is a data error."""
    data = tmp_path / "data"
    predictions = tmp_path / "pred"
    predictions.mkdir()
    assert main(["synth", "--out", str(data), "--counts", "SNR=1", "--duration", "1"]) == 0
    (predictions / "S000001.csv").write_text("SNR\n1\n1.0\n")
    assert main(["eval", "--data", str(data), "--predictions", str(predictions)]) == 3
