import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
from sklearn.model_selection import BaseCrossValidator

from src.data_processing.record_io import ClassSet
from src.errors import EmptyDataset

logger = logging.getLogger(__name__)

BAND_TOLERANCE = 1e-9
MAX_REPAIR_STEPS_PER_RECORD = 4

# (excess delta, squared-deviation delta, [(record, new fold), ...])
Exchange = Tuple[float, float, List[Tuple[int, int]]]


@dataclass(frozen=True)
class FoldAssignment:
    folds: np.ndarray
    k: int

    def test_indices(self, fold: int) -> np.ndarray:
        return np.flatnonzero(self.folds == fold)

    def train_indices(self, fold: int) -> np.ndarray:
        return np.flatnonzero(self.folds != fold)


def _pick_fold(label_demand: np.ndarray, total_demand: np.ndarray, rng: np.random.Generator) -> int:
    # greatest label demand, then fewest total remaining, then a seeded coin
    candidates = np.flatnonzero(label_demand == label_demand.max())
    if len(candidates) > 1:
        totals = total_demand[candidates]
        candidates = candidates[totals == totals.min()]
    if len(candidates) > 1:
        return int(rng.choice(candidates))
    return int(candidates[0])


def _band_cost(counts: np.ndarray, share: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Distance outside the +/-1 band and squared deviation, summed over the last axis."""
    deviation = np.abs(counts - share)
    excess = np.maximum(deviation - 1.0, 0.0).sum(axis=-1)
    return excess, (deviation ** 2).sum(axis=-1)


def _fold_patterns(table: np.ndarray, folds: np.ndarray, fold: int) -> Tuple[np.ndarray, np.ndarray]:
    # records with equal label rows are interchangeable; keep the lowest index of each
    members = np.flatnonzero(folds == fold)
    if len(members) == 0:
        return np.empty((0, table.shape[1])), members
    patterns, first = np.unique(table[members], axis=0, return_index=True)
    return patterns, members[first]


def _best_exchange(table: np.ndarray, counts: np.ndarray, share: np.ndarray,
                   folds: np.ndarray, source: int, target: int) -> Optional[Exchange]:
    """Best single move from source to target, or swap between them."""
    src_patterns, src_records = _fold_patterns(table, folds, source)
    if len(src_records) == 0:
        return None
    dst_patterns, dst_records = _fold_patterns(table, folds, target)

    base_excess, base_sq = _band_cost(counts[[source, target]], share)
    base_excess, base_sq = base_excess.sum(), base_sq.sum()

    out_excess, out_sq = _band_cost(counts[source] - src_patterns, share)
    in_excess, in_sq = _band_cost(counts[target] + src_patterns, share)
    excess_delta = [out_excess + in_excess - base_excess]
    sq_delta = [out_sq + in_sq - base_sq]
    exchanges = [[(int(record), target)] for record in src_records]

    if len(dst_records):
        diff = dst_patterns[None, :, :] - src_patterns[:, None, :]
        src_excess, src_sq = _band_cost(counts[source] + diff, share)
        dst_excess, dst_sq = _band_cost(counts[target] - diff, share)
        excess_delta.append((src_excess + dst_excess - base_excess).ravel())
        sq_delta.append((src_sq + dst_sq - base_sq).ravel())
        exchanges += [[(int(a), target), (int(b), source)] for a in src_records for b in dst_records]

    excess_delta = np.round(np.concatenate(excess_delta), 9)
    sq_delta = np.round(np.concatenate(sq_delta), 9)
    best = int(np.lexsort((sq_delta, excess_delta))[0])
    return float(excess_delta[best]), float(sq_delta[best]), exchanges[best]


def rebalance_folds(labels: np.ndarray, folds: np.ndarray, k: int) -> np.ndarray:
    """
    Move or swap records until every label count and every fold size lies
    within 1 of its proportional share, where a single move or swap can still
    improve the balance. Each step strictly lowers (excess, squared deviation).
    """
    folds = folds.copy()
    n_records = len(folds)
    # trailing ones column tracks fold sizes next to the labels
    table = np.hstack([labels.astype(np.float64), np.ones((n_records, 1))])
    share = table.sum(axis=0) / k
    counts = np.stack([table[folds == f].sum(axis=0) for f in range(k)])

    for _ in range(MAX_REPAIR_STEPS_PER_RECORD * n_records):
        if _band_cost(counts, share)[0].sum() <= BAND_TOLERANCE:
            break
        best: Optional[Exchange] = None
        for source in range(k):
            for target in range(k):
                if source == target:
                    continue
                found = _best_exchange(table, counts, share, folds, source, target)
                if found is not None and (best is None or found[:2] < best[:2]):
                    best = found
        if best is None:
            break
        excess_delta, sq_delta, exchange = best
        improves = excess_delta < -BAND_TOLERANCE or (
            abs(excess_delta) <= BAND_TOLERANCE and sq_delta < -BAND_TOLERANCE)
        if not improves:
            break
        for record, fold in exchange:
            counts[folds[record]] -= table[record]
            counts[fold] += table[record]
            folds[record] = fold

    remaining = _band_cost(counts, share)[0].sum()
    if remaining > BAND_TOLERANCE:
        logger.info(f"Fold balance leaves {remaining:.2f} records outside the +/-1 band")
    return folds


def stratified_kfold(label_sets: Sequence[ClassSet], k: int = 5, seed: int = 0) -> FoldAssignment:
    """
    Iterative multi-label stratification.

    The label with the fewest unassigned examples is processed first; each of
    its records goes to the fold with the greatest remaining demand for that
    label. Records without any label fill the folds with the most room left.
    A final rebalancing pass brings every per-label fold count within 1 of
    its proportional share where that is reachable.

    Args:
        label_sets (Sequence[ClassSet]): Per-record labels
        k (int): Number of folds
        seed (int): Seed for record order and tie breaks

    Returns:
        FoldAssignment: Fold index per record

    Raises:
        EmptyDataset: No records
    """
    if len(label_sets) == 0:
        raise EmptyDataset("cannot stratify an empty dataset")
    if k < 2:
        raise ValueError(f"need at least 2 folds, got {k}")

    rng = np.random.default_rng(seed)
    labels = np.array([s.to_array() for s in label_sets], dtype=bool)
    n_records, n_labels = labels.shape

    folds = np.full(n_records, -1, dtype=int)
    label_demand = np.tile(labels.sum(axis=0) / k, (k, 1)).astype(np.float64)
    total_demand = np.full(k, n_records / k)

    def assign(record: int, fold: int) -> None:
        folds[record] = fold
        label_demand[fold] -= labels[record]
        total_demand[fold] -= 1

    while True:
        unassigned = folds < 0
        remaining = labels[unassigned].sum(axis=0)
        active = np.flatnonzero(remaining > 0)
        if len(active) == 0:
            break
        label = int(active[np.argmin(remaining[active])])

        members = np.flatnonzero(unassigned & labels[:, label])
        for record in rng.permutation(members):
            assign(int(record), _pick_fold(label_demand[:, label], total_demand, rng))

    # unlabelled records go where the most room is left
    for record in rng.permutation(np.flatnonzero(folds < 0)):
        room = np.flatnonzero(total_demand == total_demand.max())
        assign(int(record), int(rng.choice(room)) if len(room) > 1 else int(room[0]))

    folds = rebalance_folds(labels, folds, k)
    logger.info(f"Stratified {n_records} records into {k} folds of sizes {np.bincount(folds, minlength=k).tolist()}")
    return FoldAssignment(folds=folds, k=k)


class IterativeStratifiedKFold(BaseCrossValidator):
    """Cross-validator wrapper so the assignment plugs into sklearn-style split loops.

    ``y`` is an (n_samples, n_classes) 0/1 indicator matrix.
    """

    def __init__(self, n_splits: int = 5, seed: int = 0):
        self.n_splits = n_splits
        self.seed = seed

    def _iter_test_indices(self, X=None, y=None, groups=None):
        label_sets = [ClassSet.from_array(row) for row in np.asarray(y)]
        assignment = stratified_kfold(label_sets, self.n_splits, self.seed)
        for fold in range(self.n_splits):
            yield assignment.test_indices(fold)

    def get_n_splits(self, X=None, y=None, groups=None) -> int:
        return self.n_splits
