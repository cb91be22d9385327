"""Batch command-line entry point.

    python -m src.cli.main synth --out data/synth --n 600
    python -m src.cli.main train --data data/synth --out runs/cv --width-scale 0.25 --epochs 15
    python -m src.cli.main thresholds --run runs/cv --out runs/retuned_thresholds.csv
    python -m src.cli.main predict --data data/test --run runs/cv --ensemble --out runs/pred
    python -m src.cli.main eval --data data/test --predictions runs/pred --out runs/metrics.csv
    python -m src.cli.main kappa --ratings ratings.csv

Exit codes: 0 success, 2 usage error, 3 data error, 4 numeric failure.
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np
import pandas as pd
from pydantic import BaseModel, ValidationError

from src.config import Settings, load_settings
from src.data_processing.record_io import ClassMap, label_summary, load_class_map, load_dataset, write_record
from src.errors import EcgEngineError, MalformedTable, UsageError, exit_code_for
from src.evaluation.agreement import cohens_kappa, read_rater_csv
from src.evaluation.challenge_score import format_summary, load_weight_matrix, metrics_report
from src.evaluation.threshold_tuner import ThresholdVector, optimize_thresholds
from src.inference.predictor import Predictor, read_prediction_csv, read_thresholds, write_prediction_csv, write_thresholds
from src.model.checkpoint import load_checkpoint
from src.model.se_resnet import ModelConfig
from src.synth.generator import SYNTH_LABELS, generate_dataset
from src.training.trainer import TrainConfig, train_model

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s - %(levelname)s - %(message)s"


class RunConfig(BaseModel):
    command: str
    seed: int
    jobs: int
    class_map_path: Path
    weights_path: Path
    data_dir: Optional[Path] = None
    out_path: Optional[Path] = None
    run_dir: Optional[Path] = None
    folds: int = 5
    width_scale: float = 1.0
    ensemble: bool = False
    thresholds_path: Optional[Path] = None


def _require_dir(path: Optional[Path], flag: str) -> Path:
    if path is None:
        raise UsageError(f"{flag} is required")
    if not path.is_dir():
        raise UsageError(f"{flag} directory does not exist: {path}")
    return path


def _require_file(path: Optional[Path], flag: str) -> Path:
    if path is None:
        raise UsageError(f"{flag} is required")
    if not path.is_file():
        raise UsageError(f"{flag} file does not exist: {path}")
    return path


def _load_class_map(run: RunConfig) -> ClassMap:
    return load_class_map(_require_file(run.class_map_path, "--class-map"))


def _load_weights(run: RunConfig, class_map: ClassMap):
    return load_weight_matrix(_require_file(run.weights_path, "--weights"), class_map.abbreviations)


def _read_columns(path: Path, columns: List[str], reader=pd.read_csv) -> pd.DataFrame:
    """Read a CSV and keep `columns`; absent columns or unreadable files are data errors."""
    try:
        df = reader(path)
    except (pd.errors.EmptyDataError, pd.errors.ParserError, UnicodeDecodeError) as e:
        raise MalformedTable(f"{path}: {e}")
    missing = [c for c in columns if c not in df.columns]
    if missing:
        raise MalformedTable(f"{path}: missing columns {missing[:5]}" + (" ..." if len(missing) > 5 else ""))
    return df[columns]


def _parse_counts(args) -> dict:
    if args.counts:
        counts = {}
        for item in args.counts.split(","):
            combination, _, value = item.partition("=")
            if not value.strip().isdigit():
                raise UsageError(f"--counts entries look like LAD=50, got {item!r}")
            counts[combination.strip()] = int(value)
        return counts
    labels = list(SYNTH_LABELS)
    share, extra = divmod(args.n, len(labels))
    return {label: share + (1 if i < extra else 0) for i, label in enumerate(labels)}


def run_synth(args, run: RunConfig) -> int:
    if run.out_path is None:
        raise UsageError("--out is required")
    class_map = _load_class_map(run)
    records = generate_dataset(
        _parse_counts(args),
        class_map,
        noise_std_mv=args.noise,
        seed=run.seed,
        duration_s=args.duration,
        sampling_rate_hz=args.rate,
    )
    for record in records:
        write_record(record, run.out_path)
    logger.info(f"Wrote {len(records)} records to {run.out_path}")
    return 0


def run_train(args, run: RunConfig) -> int:
    data_dir = _require_dir(run.data_dir, "--data")
    if run.out_path is None:
        raise UsageError("--out is required")
    class_map = _load_class_map(run)
    weights = _load_weights(run, class_map)

    records = load_dataset(data_dir, class_map, jobs=run.jobs)
    summary = label_summary(records, class_map)
    logger.info(f"Training on {len(records)} records; positives per class: "
                f"{dict(zip(summary['class'], summary['positives']))}")

    try:
        cfg = TrainConfig(
            epochs=args.epochs,
            batch_size=args.batch_size,
            lr_drop_epochs=[e for e in args.lr_drop_epochs if e <= args.epochs],
            seed=run.seed,
            folds=run.folds,
            pooled_thresholds=args.pooled_thresholds,
            validate_each_epoch=not args.no_validation,
            jobs=run.jobs,
        )
        model_config = ModelConfig(width_scale=run.width_scale, se_reduction=args.se_reduction)
    except ValidationError as e:
        raise UsageError(f"invalid training settings: {e.errors()[0]['msg']}")

    result = train_model(records, cfg, model_config, class_map, weights, run_dir=run.out_path)
    print(result.summary.to_string(index=False))
    return 0


def run_thresholds(args, run: RunConfig) -> int:
    run_dir = _require_dir(run.run_dir, "--run")
    if run.out_path is None:
        raise UsageError("--out is required")
    oof_path = _require_file(run_dir / "oof_probabilities.csv", "--run")
    class_map = _load_class_map(run)
    weights = _load_weights(run, class_map)
    names = class_map.abbreviations

    prob_columns = [f"p_{c}" for c in names]
    truth_columns = [f"y_{c}" for c in names]
    df = _read_columns(oof_path, prob_columns + truth_columns)
    probabilities = df[prob_columns].to_numpy(dtype=np.float64)
    truth = df[truth_columns].to_numpy(dtype=bool)
    thresholds = optimize_thresholds(probabilities, truth, weights, class_map.normal_class_index)
    write_thresholds(thresholds, names, run.out_path)
    logger.info(f"Wrote re-tuned thresholds to {run.out_path}")
    return 0


def _checkpoint_paths(args, run: RunConfig) -> List[Path]:
    if args.models:
        return [_require_file(Path(p), "--models") for p in args.models]
    run_dir = _require_dir(run.run_dir, "--run")
    paths = sorted(run_dir.glob("fold*/model.senet"))
    if not paths:
        raise UsageError(f"no fold checkpoints under {run_dir}")
    return paths if run.ensemble else paths[:1]


def run_predict(args, run: RunConfig) -> int:
    data_dir = _require_dir(run.data_dir, "--data")
    if run.out_path is None:
        raise UsageError("--out is required")
    class_map = _load_class_map(run)
    identity = class_map.identity()

    checkpoints = [load_checkpoint(p, expected_identity=identity) for p in _checkpoint_paths(args, run)]
    if run.thresholds_path is not None:
        thresholds = read_thresholds(_require_file(run.thresholds_path, "--thresholds"), class_map.abbreviations)
    else:
        thresholds = ThresholdVector.uniform(0.5, class_map.num_classes)

    records = load_dataset(data_dir, class_map, jobs=run.jobs)
    predictions = Predictor(checkpoints, class_map, jobs=run.jobs).predict_many(records, thresholds)
    for record, prediction in zip(records, predictions):
        write_prediction_csv(record.meta.record_id, prediction, class_map, run.out_path)
    logger.info(f"Wrote {len(predictions)} prediction files to {run.out_path}")
    return 0


def run_eval(args, run: RunConfig) -> int:
    data_dir = _require_dir(run.data_dir, "--data")
    pred_dir = _require_dir(Path(args.predictions) if args.predictions else None, "--predictions")
    class_map = _load_class_map(run)
    weights = _load_weights(run, class_map)

    records = load_dataset(data_dir, class_map, jobs=run.jobs)
    truth, pred = [], []
    for record in records:
        path = _require_file(pred_dir / f"{record.meta.record_id}.csv", "--predictions")
        row = _read_columns(path, class_map.abbreviations, reader=read_prediction_csv).iloc[0]
        truth.append(record.labels.to_array())
        pred.append(row.to_numpy(dtype=float) > 0.5)

    report = metrics_report(np.array(truth), np.array(pred), weights, class_map.normal_class_index, run.out_path)
    print(report["per_class"].to_string(index=False))
    print(format_summary(report["summary"]))
    return 0


def run_kappa(args, run: RunConfig) -> int:
    ratings = _require_file(Path(args.ratings) if args.ratings else None, "--ratings")
    r1, r2 = read_rater_csv(ratings)
    result = cohens_kappa(r1, r2, exclude_unsure=not args.include_unsure)
    print(result.describe())
    return 0


COMMANDS = {
    "synth": run_synth,
    "train": run_train,
    "thresholds": run_thresholds,
    "predict": run_predict,
    "eval": run_eval,
    "kappa": run_kappa,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="Global random seed (default: ECG_SENET_SEED or 20200)")
    common.add_argument("--jobs", type=int, default=None, help="Worker threads for loading and inference")
    common.add_argument("--log-level", default=None, help="Logging level (default: ECG_SENET_LOG_LEVEL or INFO)")
    common.add_argument("--class-map", default=None, help="Class map file")
    common.add_argument("--weights", default=None, help="Reward matrix CSV")

    parser = argparse.ArgumentParser(description="SE-ResNet 12-lead ECG classification pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    synth = sub.add_parser("synth", parents=[common], help="Write a labeled synthetic dataset")
    synth.add_argument("--out", required=True, help="Output directory")
    synth.add_argument("--n", type=int, default=600, help="Records split evenly over the synthetic labels")
    synth.add_argument("--counts", default=None, help="Explicit counts, e.g. LAD=50,SNR=50,AF+RAD=10")
    synth.add_argument("--noise", type=float, default=0.05, help="Noise standard deviation in mV")
    synth.add_argument("--duration", type=float, default=10.0, help="Record duration in seconds")
    synth.add_argument("--rate", type=int, default=500, help="Sampling rate in Hz")

    train = sub.add_parser("train", parents=[common], help="Cross-validated training")
    train.add_argument("--data", required=True, help="Directory of header/signal pairs")
    train.add_argument("--out", required=True, help="Run directory")
    train.add_argument("--epochs", type=int, default=50)
    train.add_argument("--batch-size", type=int, default=64)
    train.add_argument("--lr-drop-epochs", type=int, nargs="*", default=[20, 40])
    train.add_argument("--folds", type=int, default=5)
    train.add_argument("--width-scale", type=float, default=1.0)
    train.add_argument("--se-reduction", type=int, default=16)
    train.add_argument("--pooled-thresholds", action="store_true", help="Also tune on pooled out-of-fold outputs")
    train.add_argument("--no-validation", action="store_true", help="Skip the per-epoch held-out score")

    thresholds = sub.add_parser("thresholds", parents=[common], help="Re-tune thresholds from saved outputs")
    thresholds.add_argument("--run", required=True, help="Training run directory")
    thresholds.add_argument("--out", required=True, help="Threshold file to write")

    predict = sub.add_parser("predict", parents=[common], help="Write per-record predictions")
    predict.add_argument("--data", required=True, help="Directory of header/signal pairs")
    predict.add_argument("--out", required=True, help="Directory for prediction CSVs")
    predict.add_argument("--run", default=None, help="Training run directory")
    predict.add_argument("--models", nargs="*", default=None, help="Explicit checkpoint files")
    predict.add_argument("--ensemble", action="store_true", help="Average every fold of --run")
    predict.add_argument("--thresholds", default=None, help="class,threshold file (default: 0.5 everywhere)")

    evaluate = sub.add_parser("eval", parents=[common], help="Score prediction CSVs against labels")
    evaluate.add_argument("--data", required=True, help="Directory of labeled header/signal pairs")
    evaluate.add_argument("--predictions", required=True, help="Directory of prediction CSVs")
    evaluate.add_argument("--out", default=None, help="Per-class metrics CSV")

    kappa = sub.add_parser("kappa", parents=[common], help="Cohen's kappa between two raters")
    kappa.add_argument("--ratings", required=True, help="CSV with example_id,rater1,rater2")
    unsure = kappa.add_mutually_exclusive_group()
    unsure.add_argument("--exclude-unsure", dest="include_unsure", action="store_false", default=False)
    unsure.add_argument("--include-unsure", dest="include_unsure", action="store_true",
                        help="Count unsure as negative instead of dropping the pair")

    return parser


def build_run_config(args, settings: Settings) -> RunConfig:
    def path_arg(name: str) -> Optional[Path]:
        value = getattr(args, name, None)
        return Path(value) if value else None

    return RunConfig(
        command=args.command,
        seed=args.seed if args.seed is not None else settings.seed,
        jobs=args.jobs if args.jobs is not None else settings.jobs,
        class_map_path=Path(args.class_map) if args.class_map else settings.class_map_path,
        weights_path=Path(args.weights) if args.weights else settings.weights_path,
        data_dir=path_arg("data"),
        out_path=path_arg("out"),
        run_dir=path_arg("run"),
        folds=getattr(args, "folds", 5),
        width_scale=getattr(args, "width_scale", 1.0),
        ensemble=getattr(args, "ensemble", False),
        thresholds_path=path_arg("thresholds"),
    )


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)

    settings = load_settings()
    logging.basicConfig(level=(args.log_level or settings.log_level).upper(), format=LOG_FORMAT)

    try:
        run = build_run_config(args, settings)
        if run.jobs < 1:
            raise UsageError("--jobs must be at least 1")
        return COMMANDS[run.command](args, run)
    except ValidationError as e:
        logger.error(f"invalid arguments: {e.errors()[0]['msg']}")
        return UsageError.exit_code
    except EcgEngineError as e:
        logger.error(str(e))
        return exit_code_for(e)


if __name__ == "__main__":
    sys.exit(main())
