import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Sequence, Tuple

import numpy as np
import pandas as pd
from sklearn.metrics import confusion_matrix

from src.errors import DegenerateMarginals, LengthMismatch, NoDecisiveExamples, UsageError

logger = logging.getLogger(__name__)

POSITIVE = "pos"
NEGATIVE = "neg"
UNSURE = "unsure"
CATEGORIES = (POSITIVE, NEGATIVE, UNSURE)

_ALIASES = {
    "pos": POSITIVE, "positive": POSITIVE, "yes": POSITIVE, "1": POSITIVE,
    "neg": NEGATIVE, "negative": NEGATIVE, "no": NEGATIVE, "0": NEGATIVE,
    "unsure": UNSURE, "unclear": UNSURE, "?": UNSURE,
}


@dataclass(frozen=True)
class RaterSeries:
    values: Tuple[str, ...]

    def __post_init__(self):
        if not self.values:
            raise NoDecisiveExamples("rater series is empty")
        bad = [v for v in self.values if v not in CATEGORIES]
        if bad:
            raise UsageError(f"rater values must be one of {CATEGORIES}, got {bad[0]!r}")

    @classmethod
    def parse(cls, values: Sequence[str]) -> "RaterSeries":
        normalized = []
        for value in values:
            token = str(value).strip().lower()
            if token not in _ALIASES:
                raise UsageError(f"unrecognized rater value {value!r}")
            normalized.append(_ALIASES[token])
        return cls(tuple(normalized))

    def __len__(self) -> int:
        return len(self.values)


@dataclass(frozen=True)
class KappaResult:
    kappa: float
    n_used: int
    agreement_table: np.ndarray
    disagreements: int

    def describe(self) -> str:
        (pp, pn), (np_, nn) = self.agreement_table
        return (
            f"kappa={self.kappa:.3f} n_used={self.n_used} disagreements={self.disagreements}/{self.n_used}\n"
            f"          r2=pos  r2=neg\n"
            f"r1=pos  {pp:7d} {pn:7d}\n"
            f"r1=neg  {np_:7d} {nn:7d}"
        )


def kappa_from_counts(table) -> float:
    """
    Cohen's kappa from a 2x2 agreement table [[pos/pos, pos/neg], [neg/pos, neg/neg]].

    Args:
        table: 2x2 counts, rows rater 1 and columns rater 2

    Returns:
        float: (p_o - p_e) / (1 - p_e)

    Raises:
        NoDecisiveExamples: Table sums to zero
        DegenerateMarginals: Chance agreement p_e equals 1
    """
    table = np.asarray(table, dtype=np.float64)
    n = table.sum()
    if n <= 0:
        raise NoDecisiveExamples("agreement table is empty")
    p_o = np.trace(table) / n
    p_e = float(np.sum(table.sum(axis=1) * table.sum(axis=0))) / (n * n)
    if p_e == 1.0:
        raise DegenerateMarginals("chance agreement is 1; kappa is undefined")
    return float((p_o - p_e) / (1.0 - p_e))


def cohens_kappa(r1: RaterSeries, r2: RaterSeries, exclude_unsure: bool = True) -> KappaResult:
    """
    Chance-corrected agreement between two aligned raters on positive/negative calls.

    With ``exclude_unsure`` pairs where either rater is unsure are dropped;
    otherwise unsure counts as negative.

    Args:
        r1 (RaterSeries): First rater
        r2 (RaterSeries): Second rater
        exclude_unsure (bool): Drop pairs containing an unsure call

    Returns:
        KappaResult: kappa, pairs used, 2x2 table and disagreement count
    """
    if len(r1) != len(r2):
        raise LengthMismatch(f"raters have {len(r1)} and {len(r2)} examples")

    pairs = list(zip(r1.values, r2.values))
    if exclude_unsure:
        pairs = [(a, b) for a, b in pairs if a != UNSURE and b != UNSURE]
    else:
        pairs = [(a if a != UNSURE else NEGATIVE, b if b != UNSURE else NEGATIVE) for a, b in pairs]
    if not pairs:
        raise NoDecisiveExamples("no example has a decisive call from both raters")

    first, second = zip(*pairs)
    table = confusion_matrix(first, second, labels=[POSITIVE, NEGATIVE])
    kappa = kappa_from_counts(table)
    disagreements = int(table[0, 1] + table[1, 0])
    logger.info(f"Kappa {kappa:.3f} over {len(pairs)} examples ({disagreements} disagreements)")
    return KappaResult(kappa=kappa, n_used=len(pairs), agreement_table=table, disagreements=disagreements)


def read_rater_csv(path) -> Tuple[RaterSeries, RaterSeries]:
    """Read ``example_id,rater1,rater2``."""
    df = pd.read_csv(path, dtype=str, keep_default_na=False)
    missing = {"example_id", "rater1", "rater2"} - set(df.columns)
    if missing:
        raise UsageError(f"{path} is missing columns {sorted(missing)}")
    return RaterSeries.parse(df["rater1"].tolist()), RaterSeries.parse(df["rater2"].tolist())


def select_review_sample(
    truth: np.ndarray,
    pred: np.ndarray,
    class_index: int,
    n_fp: int = 50,
    n_fn: int = 50,
    seed: int = 0,
) -> List[Tuple[int, str]]:
    """
    Randomly pick false positives and false negatives of one class for manual review.

    Args:
        truth (np.ndarray): (N, C) true labels
        pred (np.ndarray): (N, C) predicted labels
        class_index (int): Class under review
        n_fp (int): False positives to draw (fewer if not available)
        n_fn (int): False negatives to draw (fewer if not available)
        seed (int): Sampling seed

    Returns:
        List[Tuple[int, str]]: (record index, "FP" or "FN") sorted by record index
    """
    truth = np.asarray(truth, dtype=bool)[:, class_index]
    pred = np.asarray(pred, dtype=bool)[:, class_index]
    rng = np.random.default_rng(seed)

    sample = []
    for kind, mask, count in (("FP", pred & ~truth, n_fp), ("FN", truth & ~pred, n_fn)):
        candidates = np.flatnonzero(mask)
        chosen = rng.choice(candidates, size=min(count, len(candidates)), replace=False) if len(candidates) else []
        sample.extend((int(i), kind) for i in chosen)
    sample.sort()
    return sample


def write_review_template(sample: List[Tuple[int, str]], record_ids: Sequence[str], path) -> Path:
    """Rater CSV template with blank rater columns, one row per sampled record."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    df = pd.DataFrame({
        "example_id": [record_ids[i] for i, _ in sample],
        "kind": [kind for _, kind in sample],
        "rater1": "",
        "rater2": "",
    })
    df.to_csv(path, index=False)
    return path
