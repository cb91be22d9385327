import hashlib
import logging
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Tuple

import numpy as np
import pandas as pd

from src.errors import (
    EmptyDataset,
    EcgEngineError,
    LeadCountMismatch,
    LengthMismatch,
    MalformedClassMap,
    MalformedHeader,
)

logger = logging.getLogger(__name__)

NUM_LEADS = 12
NUM_CLASSES = 24
NORMAL_CLASS = "SNR"
LEAD_NAMES = ("I", "II", "III", "aVR", "aVL", "aVF", "V1", "V2", "V3", "V4", "V5", "V6")
MISSING_TOKENS = {"", "nan", "unknown"}
HEADER_SUFFIX = ".hea"
SIGNAL_SUFFIX = ".dat"
UNKNOWN_ROW = "unknown"


@dataclass(frozen=True)
class RecordMeta:
    record_id: str
    num_leads: int
    sampling_rate_hz: int
    num_samples: int
    per_lead_gain: Tuple[float, ...]
    per_lead_baseline: Tuple[int, ...]
    age_years: Optional[int] = None
    sex: Optional[str] = None
    dx_codes: Tuple[str, ...] = ()
    lead_names: Tuple[str, ...] = LEAD_NAMES


@dataclass(frozen=True)
class ClassSet:
    """Fixed-width membership vector over the scored classes, in class-map order."""

    membership: Tuple[bool, ...]

    @classmethod
    def empty(cls, size: int = NUM_CLASSES) -> "ClassSet":
        return cls(tuple([False] * size))

    @classmethod
    def from_indices(cls, indices: Iterable[int], size: int = NUM_CLASSES) -> "ClassSet":
        flags = [False] * size
        for index in indices:
            flags[index] = True
        return cls(tuple(flags))

    @classmethod
    def from_array(cls, values: np.ndarray) -> "ClassSet":
        return cls(tuple(bool(v) for v in np.asarray(values).ravel()))

    def indices(self) -> List[int]:
        return [i for i, flag in enumerate(self.membership) if flag]

    def to_array(self) -> np.ndarray:
        return np.array(self.membership, dtype=bool)

    def __len__(self) -> int:
        return sum(self.membership)

    def __contains__(self, index: int) -> bool:
        return self.membership[index]


@dataclass(frozen=True)
class EcgRecord:
    meta: RecordMeta
    signal: np.ndarray
    labels: ClassSet = field(default_factory=ClassSet.empty)

    def with_labels(self, labels: ClassSet) -> "EcgRecord":
        return replace(self, labels=labels)


@dataclass(frozen=True)
class ClassMapEntry:
    abbreviation: str
    codes: Tuple[str, ...]
    is_scored: bool


class ClassMap:
    def __init__(self, entries: List[ClassMapEntry]):
        """
        Build the diagnosis-code map and validate its invariants.

        Args:
            entries (List[ClassMapEntry]): Entries in file order; scored entries define the class order

        Raises:
            MalformedClassMap: Wrong scored count, repeated code, or no normal class
        """
        self.entries = list(entries)
        self.scored_entries = [e for e in self.entries if e.is_scored]

        if len(self.scored_entries) != NUM_CLASSES:
            raise MalformedClassMap(
                f"class map must have {NUM_CLASSES} scored entries, found {len(self.scored_entries)}"
            )

        self.code_to_index: Dict[str, Optional[int]] = {}
        scored_position = {e.abbreviation: i for i, e in enumerate(self.scored_entries)}
        for entry in self.entries:
            for code in entry.codes:
                if code in self.code_to_index:
                    raise MalformedClassMap(f"diagnosis code {code} appears in more than one entry")
                # None marks a known but unscored code
                self.code_to_index[code] = scored_position.get(entry.abbreviation) if entry.is_scored else None

        if NORMAL_CLASS not in scored_position:
            raise MalformedClassMap(f"class map has no scored {NORMAL_CLASS} entry")
        self.normal_class_index = scored_position[NORMAL_CLASS]

    @property
    def abbreviations(self) -> List[str]:
        return [e.abbreviation for e in self.scored_entries]

    @property
    def num_classes(self) -> int:
        return len(self.scored_entries)

    def index_of(self, abbreviation: str) -> int:
        return self.abbreviations.index(abbreviation)

    def primary_code(self, index: int) -> str:
        return self.scored_entries[index].codes[0]

    def identity(self) -> str:
        """Stable fingerprint of the scored classes, stored in checkpoints."""
        text = ";".join(f"{e.abbreviation}={'|'.join(e.codes)}" for e in self.scored_entries)
        return hashlib.sha256(text.encode("utf-8")).hexdigest()


def load_class_map(path) -> ClassMap:
    """
    Load a class map file with lines ``<abbrev>,<code>[|<code>],<scored 0/1>``.

    Args:
        path: Path to the class map file

    Returns:
        ClassMap: Validated class map
    """
    try:
        df = pd.read_csv(path, header=None, names=["abbreviation", "codes", "scored"], dtype=str)
    except (pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise MalformedClassMap(f"cannot parse class map {path}: {e}")

    entries = []
    for row in df.itertuples(index=False):
        if pd.isna(row.abbreviation) or pd.isna(row.codes) or row.scored not in ("0", "1"):
            raise MalformedClassMap(f"malformed class map line in {path}: {tuple(row)}")
        codes = tuple(c.strip() for c in row.codes.split("|") if c.strip())
        entries.append(ClassMapEntry(row.abbreviation.strip(), codes, row.scored == "1"))

    return ClassMap(entries)


def _parse_optional_int(value: str) -> Optional[int]:
    if value.strip().lower() in MISSING_TOKENS:
        return None
    try:
        return int(float(value))
    except ValueError:
        raise MalformedHeader(f"non-numeric age value: {value!r}")


def _parse_sex(value: str) -> Optional[str]:
    token = value.strip().lower()
    if token in ("female", "f"):
        return "female"
    if token in ("male", "m"):
        return "male"
    return None


def parse_header(text: str) -> RecordMeta:
    """
    Parse a header file into record metadata.

    Args:
        text (str): Header file contents

    Returns:
        RecordMeta: Parsed metadata; absent demographics yield None

    Raises:
        MalformedHeader: Missing record line, non-numeric counts or malformed lead lines
        LeadCountMismatch: Header declares a lead count other than 12
    """
    lines = [line.strip() for line in text.splitlines() if line.strip()]
    if not lines or lines[0].startswith("#"):
        raise MalformedHeader("header is missing its record line")

    fields = lines[0].split()
    if len(fields) < 4:
        raise MalformedHeader(f"record line needs 4 fields, got {lines[0]!r}")
    record_id = fields[0]
    try:
        num_leads, rate, num_samples = int(fields[1]), int(fields[2]), int(fields[3])
    except ValueError:
        raise MalformedHeader(f"non-numeric counts in record line {lines[0]!r}")

    if num_leads != NUM_LEADS:
        raise LeadCountMismatch(f"record {record_id} declares {num_leads} leads, expected {NUM_LEADS}")
    if rate < 1 or num_samples < 1:
        raise MalformedHeader(f"record {record_id} has non-positive rate or sample count")

    lead_lines = [line for line in lines[1:] if not line.startswith("#")]
    if len(lead_lines) < NUM_LEADS:
        raise MalformedHeader(f"record {record_id} lists {len(lead_lines)} lead lines, expected {NUM_LEADS}")

    gains, baselines, names = [], [], []
    for line in lead_lines[:NUM_LEADS]:
        parts = line.split()
        if len(parts) < 3 or not parts[0].endswith("/mV"):
            raise MalformedHeader(f"malformed lead line {line!r}")
        try:
            gain = float(parts[0][: -len("/mV")])
            baseline = int(parts[1])
        except ValueError:
            raise MalformedHeader(f"non-numeric gain or baseline in {line!r}")
        if not gain > 0:
            raise MalformedHeader(f"non-positive gain in {line!r}")
        gains.append(gain)
        baselines.append(baseline)
        names.append(parts[2])

    age, sex, dx_codes = None, None, ()
    for line in lines[1:]:
        if not line.startswith("#") or ":" not in line:
            continue
        key, value = line[1:].split(":", 1)
        key = key.strip().lower()
        if key == "age":
            age = _parse_optional_int(value)
        elif key == "sex":
            sex = _parse_sex(value)
        elif key == "dx":
            dx_codes = tuple(c.strip() for c in value.split(",") if c.strip())

    return RecordMeta(
        record_id=record_id,
        num_leads=num_leads,
        sampling_rate_hz=rate,
        num_samples=num_samples,
        per_lead_gain=tuple(gains),
        per_lead_baseline=tuple(baselines),
        age_years=age,
        sex=sex,
        dx_codes=dx_codes,
        lead_names=tuple(names),
    )


def read_signal(meta: RecordMeta, data: bytes) -> EcgRecord:
    """
    Decode lead-major little-endian int16 samples into millivolts.

    Args:
        meta (RecordMeta): Parsed header
        data (bytes): Raw signal file contents

    Returns:
        EcgRecord: Unlabeled record

    Raises:
        LengthMismatch: Byte length differs from 2 * 12 * num_samples
    """
    expected = 2 * NUM_LEADS * meta.num_samples
    if len(data) != expected:
        raise LengthMismatch(
            f"record {meta.record_id}: signal has {len(data)} bytes, header implies {expected}"
        )

    raw = np.frombuffer(data, dtype="<i2").reshape(NUM_LEADS, meta.num_samples).astype(np.float64)
    gain = np.asarray(meta.per_lead_gain, dtype=np.float64)[:, None]
    baseline = np.asarray(meta.per_lead_baseline, dtype=np.float64)[:, None]
    signal = (raw - baseline) / gain
    signal.setflags(write=False)
    return EcgRecord(meta=meta, signal=signal)


def quantize_signal(meta: RecordMeta, signal: np.ndarray) -> np.ndarray:
    gain = np.asarray(meta.per_lead_gain, dtype=np.float64)[:, None]
    baseline = np.asarray(meta.per_lead_baseline, dtype=np.float64)[:, None]
    raw = np.rint(signal * gain + baseline)
    return np.clip(raw, -32768, 32767).astype("<i2")


def format_header(meta: RecordMeta) -> str:
    lines = [f"{meta.record_id} {meta.num_leads} {meta.sampling_rate_hz} {meta.num_samples}"]
    for gain, baseline, name in zip(meta.per_lead_gain, meta.per_lead_baseline, meta.lead_names):
        lines.append(f"{gain!r}/mV {baseline} {name}")
    lines.append(f"#Age: {meta.age_years if meta.age_years is not None else 'NaN'}")
    lines.append(f"#Sex: {meta.sex.capitalize() if meta.sex else 'NaN'}")
    lines.append(f"#Dx: {','.join(meta.dx_codes)}")
    return "\n".join(lines) + "\n"


def write_record(record: EcgRecord, directory) -> Tuple[Path, Path]:
    """
    Write a record as a header/signal file pair.

    Args:
        record (EcgRecord): Record to write
        directory: Output directory, created if needed

    Returns:
        Tuple[Path, Path]: Header and signal paths
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    header_path = directory / f"{record.meta.record_id}{HEADER_SUFFIX}"
    signal_path = directory / f"{record.meta.record_id}{SIGNAL_SUFFIX}"

    header_path.write_text(format_header(record.meta), encoding="utf-8")
    signal_path.write_bytes(quantize_signal(record.meta, record.signal).tobytes())
    return header_path, signal_path


def map_labels(dx_codes: Iterable[str], class_map: ClassMap, unknown_tally: Counter = None) -> ClassSet:
    """
    Map diagnosis codes onto the scored class set.

    Equivalent codes collapse onto one class; unscored codes are dropped and
    codes absent from the map are added to ``unknown_tally``.

    Args:
        dx_codes (Iterable[str]): Diagnosis codes of one record
        class_map (ClassMap): Loaded class map
        unknown_tally (Counter, optional): Tally updated with unknown codes

    Returns:
        ClassSet: Scored class membership
    """
    flags = [False] * class_map.num_classes
    for code in dx_codes:
        if code not in class_map.code_to_index:
            if unknown_tally is not None:
                unknown_tally[code] += 1
            continue
        index = class_map.code_to_index[code]
        if index is not None:
            flags[index] = True
    return ClassSet(tuple(flags))


class RecordLoader:
    def __init__(self, directory, class_map: ClassMap, jobs: int = 1):
        """
        Initialize the RecordLoader for a directory of header/signal pairs.

        Args:
            directory: Directory containing ``*.hea`` / ``*.dat`` pairs
            class_map (ClassMap): Class map used to label records
            jobs (int): Worker threads used for parsing
        """
        self.directory = Path(directory)
        self.class_map = class_map
        self.jobs = max(1, jobs)
        self.records: List[EcgRecord] = []
        self.failures: List[Tuple[str, str]] = []
        self.unknown_codes: Counter = Counter()
        self.logger = logging.getLogger(__name__)

    def _load_one(self, header_path: Path) -> EcgRecord:
        meta = parse_header(header_path.read_text(encoding="utf-8"))
        signal_path = header_path.with_suffix(SIGNAL_SUFFIX)
        if not signal_path.exists():
            raise LengthMismatch(f"record {meta.record_id} has no signal file")
        return read_signal(meta, signal_path.read_bytes())

    def _try_load(self, header_path: Path):
        try:
            return self._load_one(header_path), None
        except (EcgEngineError, OSError, UnicodeDecodeError) as e:
            return None, str(e)

    def load(self) -> List[EcgRecord]:
        """
        Parse every record in the directory; per-file failures are collected.

        Returns:
            List[EcgRecord]: Labeled records sorted by record_id

        Raises:
            EmptyDataset: No record could be parsed
        """
        header_paths = sorted(self.directory.glob(f"*{HEADER_SUFFIX}"))

        if self.jobs > 1:
            with ThreadPoolExecutor(max_workers=self.jobs) as pool:
                results = list(pool.map(self._try_load, header_paths))
        else:
            results = [self._try_load(p) for p in header_paths]

        records, failures = [], []
        unknown = Counter()
        for path, (record, error) in zip(header_paths, results):
            if record is None:
                self.logger.warning(f"Skipping {path}: {error}")
                failures.append((str(path), error))
                continue
            labels = map_labels(record.meta.dx_codes, self.class_map, unknown)
            records.append(record.with_labels(labels))

        records.sort(key=lambda r: r.meta.record_id)
        self.records, self.failures, self.unknown_codes = records, failures, unknown

        if unknown:
            self.logger.warning(f"Ignored {sum(unknown.values())} unknown diagnosis codes ({len(unknown)} distinct)")
        self.logger.info(f"Loaded {len(records)} records from {self.directory} ({len(failures)} failures)")

        if not records:
            raise EmptyDataset(f"no parseable records in {self.directory}")
        return records

    def get_records_by_class(self, abbreviation: str) -> List[EcgRecord]:
        """
        Filter loaded records by a scored class abbreviation.

        Args:
            abbreviation (str): Class abbreviation, e.g. "LAD"

        Returns:
            List[EcgRecord]: Records carrying that label
        """
        index = self.class_map.index_of(abbreviation)
        return [r for r in self.records if index in r.labels]

    def label_summary(self) -> pd.DataFrame:
        return label_summary(self.records, self.class_map, self.unknown_codes)


def load_dataset(directory, class_map: ClassMap, jobs: int = 1) -> List[EcgRecord]:
    return RecordLoader(directory, class_map, jobs=jobs).load()


def label_summary(records: List[EcgRecord], class_map: ClassMap,
                  unknown_codes: Optional[Counter] = None) -> pd.DataFrame:
    """
    Count positives per scored class, plus an ``unknown`` row tallying
    unmapped diagnosis codes when ``unknown_codes`` is given.

    Args:
        records (List[EcgRecord]): Labeled records
        class_map (ClassMap): Class map
        unknown_codes (Counter, optional): Unmapped code tally from the loader

    Returns:
        pd.DataFrame: Columns class, positives, prevalence
    """
    if records:
        counts = np.sum([r.labels.to_array() for r in records], axis=0)
    else:
        counts = np.zeros(class_map.num_classes, dtype=int)
    total = max(1, len(records))
    summary = pd.DataFrame({
        "class": class_map.abbreviations,
        "positives": counts.astype(int),
        "prevalence": counts / total,
    })
    if unknown_codes is not None:
        unknown = sum(unknown_codes.values())
        summary.loc[len(summary)] = [UNKNOWN_ROW, unknown, unknown / total]
    return summary
