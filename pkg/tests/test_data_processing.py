import pytest
import numpy as np
import sys
import os
from collections import Counter

# Add parent directory to path to access src modules
sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..'))

from src.data_processing.record_io import (
    ClassSet,
    EcgRecord,
    LEAD_NAMES,
    RecordLoader,
    RecordMeta,
    label_summary,
    load_class_map,
    load_dataset,
    map_labels,
    parse_header,
    read_signal,
    write_record,
)
from src.data_processing.preprocess import (
    Demographics,
    ModelInput,
    derive_rng,
    encode_demographics,
    fit_length,
    prepare_record,
    resample_linear,
)
from src.errors import (
    DegenerateSignal,
    EmptyDataset,
    InvalidAge,
    LeadCountMismatch,
    LengthMismatch,
    MalformedClassMap,
    MalformedHeader,
)

CLASS_MAP_PATH = os.path.join(os.path.dirname(__file__), '..', 'data', 'class_map.csv')


def make_header(num_leads=12, age="50", sex="Male", dx="164889003", record_id="A0001", samples=5):
    lines = [f"{record_id} {num_leads} 500 {samples}"]
    for name in LEAD_NAMES[:num_leads] if num_leads <= 12 else LEAD_NAMES + ("X",) * (num_leads - 12):
        lines.append(f"1000.0/mV 0 {name}")
    lines.append(f"#Age: {age}")
    lines.append(f"#Sex: {sex}")
    lines.append(f"#Dx: {dx}")
    return "\n".join(lines) + "\n"


def make_record(record_id="A0001", samples=600, rate=500, dx=("426783006",), seed=0):
    meta = RecordMeta(
        record_id=record_id,
        num_leads=12,
        sampling_rate_hz=rate,
        num_samples=samples,
        per_lead_gain=tuple([1000.0] * 12),
        per_lead_baseline=tuple([0] * 12),
        age_years=61,
        sex="female",
        dx_codes=tuple(dx),
    )
    signal = np.round(np.random.default_rng(seed).normal(0, 0.5, (12, samples)) * 1000) / 1000
    return EcgRecord(meta=meta, signal=signal)


def test_class_map_loads_24_scored_classes():
    """Test the bundled class map."""
    class_map = load_class_map(CLASS_MAP_PATH)
    assert class_map.num_classes == 24
    assert class_map.abbreviations[0] == "IAVB"
    assert class_map.abbreviations[class_map.normal_class_index] == "SNR"
    assert class_map.code_to_index["713427006"] == class_map.code_to_index["59118001"]
    # Unscored codes are known but map to no class
    assert class_map.code_to_index["6374002"] is None


def test_class_map_rejects_repeated_code(tmp_path):
    """Test that a code listed twice is refused."""
    lines = open(CLASS_MAP_PATH).read().splitlines()
    lines.append("DUP,164889003,0")
    path = tmp_path / "map.csv"
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(MalformedClassMap):
        load_class_map(path)


def test_parse_header_fields():
    """Test header parsing of counts and demographics."""
    meta = parse_header(make_header())
    assert meta.record_id == "A0001"
    assert meta.num_leads == 12
    assert meta.sampling_rate_hz == 500
    assert meta.age_years == 50
    assert meta.sex == "male"
    assert meta.dx_codes == ("164889003",)
    assert meta.per_lead_gain == tuple([1000.0] * 12)


def test_parse_header_missing_tokens():
    """Test that NaN and Unknown demographics become absent."""
    meta = parse_header(make_header(age="NaN", sex="NaN"))
    assert meta.age_years is None
    assert meta.sex is None
    meta = parse_header(make_header(age="Unknown", sex="Unknown"))
    assert meta.age_years is None
    assert meta.sex is None


def test_parse_header_errors():
    """Test malformed headers and wrong lead counts."""
    with pytest.raises(LeadCountMismatch):
        parse_header(make_header(num_leads=3))
    with pytest.raises(MalformedHeader):
        parse_header("")
    with pytest.raises(MalformedHeader):
        parse_header("A0001 twelve 500 10\n")


def test_read_signal_scaling():
    """Test raw-to-millivolt conversion and the byte length contract."""
    meta = parse_header(make_header(samples=2))
    raw = np.zeros((12, 2), dtype="<i2")
    raw[0, 0] = 1000
    record = read_signal(meta, raw.tobytes())
    assert record.signal.shape == (12, 2)
    assert record.signal[0, 0] == 1.0
    assert record.signal[0, 1] == 0.0
    assert len(record.labels) == 0

    with pytest.raises(LengthMismatch):
        read_signal(meta, raw.tobytes()[:-2])


def test_map_labels_merged_codes_and_unknowns():
    """Test equivalent codes, unscored codes and the unknown tally."""
    class_map = load_class_map(CLASS_MAP_PATH)
    crbbb = class_map.index_of("CRBBB")

    labels = map_labels(["713427006", "59118001"], class_map)
    assert labels.indices() == [crbbb]

    tally = Counter()
    labels = map_labels(["999999", "39732003"], class_map, tally)
    assert labels.indices() == [class_map.index_of("LAD")]
    assert tally == Counter({"999999": 1})

    assert len(map_labels([], class_map)) == 0
    assert map_labels(["6374002"], class_map) == ClassSet.empty()

    forward = map_labels(["39732003", "426783006"], class_map)
    backward = map_labels(["426783006", "39732003", "39732003"], class_map)
    assert forward == backward


def test_write_record_round_trip(tmp_path):
    """Test that a written record re-parses to identical metadata and samples."""
    class_map = load_class_map(CLASS_MAP_PATH)
    record = make_record()
    write_record(record, tmp_path)

    loaded = load_dataset(tmp_path, class_map)
    assert len(loaded) == 1
    assert loaded[0].meta == record.meta
    assert np.allclose(loaded[0].signal, record.signal, atol=0.5 / 1000)
    assert loaded[0].labels.indices() == [class_map.index_of("SNR")]


def test_load_dataset_order_and_failures(tmp_path):
    """Test id ordering and collection of corrupt files."""
    class_map = load_class_map(CLASS_MAP_PATH)
    for record_id in ("C003", "A001", "B002"):
        write_record(make_record(record_id=record_id), tmp_path)
    (tmp_path / "D004.hea").write_text(make_header(record_id="D004", samples=600))
    (tmp_path / "D004.dat").write_bytes(b"\x00\x00")

    loader = RecordLoader(tmp_path, class_map, jobs=2)
    records = loader.load()
    assert [r.meta.record_id for r in records] == ["A001", "B002", "C003"]
    assert len(loader.failures) == 1
    assert "D004" in loader.failures[0][0]


def test_load_dataset_empty_directory(tmp_path):
    """Test that an empty directory is an error."""
    class_map = load_class_map(CLASS_MAP_PATH)
    with pytest.raises(EmptyDataset):
        load_dataset(tmp_path, class_map)


def test_label_summary_counts():
    """Test per-class positive counts."""
    class_map = load_class_map(CLASS_MAP_PATH)
    snr = class_map.normal_class_index
    records = [make_record().with_labels(ClassSet.from_indices([snr])) for _ in range(3)]
    summary = label_summary(records, class_map)
    assert summary.loc[snr, "positives"] == 3
    assert summary["positives"].sum() == 3


def test_resample_identity_and_ramp():
    """Test the identity case and exact interpolation of a ramp."""
    signal = np.random.default_rng(1).normal(size=(12, 300))
    assert np.array_equal(resample_linear(signal, 257, 257), signal)

    ramp = np.tile(np.arange(514, dtype=float), (12, 1))
    out = resample_linear(ramp, 514, 257)
    assert out.shape == (12, 257)
    assert out[0, 0] == 0.0
    assert out[0, -1] == 513.0
    assert np.allclose(np.diff(out[0]), 513.0 / 256)


def test_resample_sine_accuracy():
    """Test linear resampling against the analytic sine."""
    t_in = np.arange(1000) / 1000.0
    signal = np.tile(np.sin(2 * np.pi * 5 * t_in), (12, 1))
    out = resample_linear(signal, 1000, 257)
    t_out = np.linspace(0.0, t_in[-1], out.shape[1])
    assert np.abs(out[0] - np.sin(2 * np.pi * 5 * t_out)).max() < 1e-3
    assert out.max() <= signal.max() and out.min() >= signal.min()


def test_resample_degenerate():
    """Test that a single sample cannot be resampled."""
    with pytest.raises(DegenerateSignal):
        resample_linear(np.zeros((12, 1)), 500)


def test_fit_length_modes():
    """Test padding, identity and seeded random clipping."""
    short = np.ones((12, 4000))
    padded = fit_length(short, "train")
    assert padded.shape == (12, 4096)
    assert np.all(padded[:, 4000:] == 0.0)
    assert np.all(padded[:, :4000] == 1.0)

    exact = np.random.default_rng(0).normal(size=(12, 4096))
    assert np.array_equal(fit_length(exact, "train"), exact)

    ramp = np.tile(np.arange(8192, dtype=float), (12, 1))
    first = fit_length(ramp, "train", np.random.default_rng(5))
    second = fit_length(ramp, "train", np.random.default_rng(5))
    assert np.array_equal(first, second)
    offset = int(first[0, 0])
    assert 0 <= offset <= 4096
    assert first.shape == (12, 4096)

    patches = fit_length(ramp, "eval")
    assert isinstance(patches, list)
    assert all(p.shape == (12, 4096) for p in patches)


def test_encode_demographics_layout():
    """Test the 10-feature demographic layout."""
    assert np.array_equal(encode_demographics(Demographics(50, "male")), [0.5, 0, 0, 1, 0, 0, 0, 0, 0, 0])
    assert np.array_equal(encode_demographics(Demographics(None, "female")), [0, 1, 1, 0, 0, 0, 0, 0, 0, 0])
    assert encode_demographics(Demographics(130, None))[0] == 1.0
    assert encode_demographics(Demographics(130, None))[4] == 1.0
    with pytest.raises(InvalidAge):
        encode_demographics(Demographics(131, "male"))


def test_prepare_record_shapes():
    """Test end-to-end preprocessing of one record."""
    record = make_record(samples=10000, rate=500)
    train_input = prepare_record(record, "train", derive_rng(1, record.meta.record_id))
    assert isinstance(train_input, ModelInput)
    assert train_input.signal.shape == (12, 4096)

    patches = prepare_record(record, "eval")
    # 10000 samples at 500 Hz -> 5140 samples at 257 Hz -> 2 patches
    assert len(patches) == 2
    assert np.array_equal(patches[0].demographics, encode_demographics(Demographics(61, "female")))


def test_derive_rng_is_stable():
    """Test per-record random streams."""
    a = derive_rng(7, "A0001").integers(0, 1 << 30, 5)
    b = derive_rng(7, "A0001").integers(0, 1 << 30, 5)
    c = derive_rng(7, "A0002").integers(0, 1 << 30, 5)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_loader_filters_by_class(tmp_path):
    """Test class filtering and the loader's label summary."""
    class_map = load_class_map(CLASS_MAP_PATH)
    write_record(make_record(record_id="A001", dx=("39732003",)), tmp_path)
    write_record(make_record(record_id="A002", dx=("426783006", "999999")), tmp_path)

    loader = RecordLoader(tmp_path, class_map)
    loader.load()
    assert [r.meta.record_id for r in loader.get_records_by_class("LAD")] == ["A001"]
    assert loader.unknown_codes == Counter({"999999": 1})
    summary = loader.label_summary()
    assert len(summary) == class_map.num_classes + 1
    assert summary["positives"].iloc[:-1].sum() == 2
    assert summary.iloc[-1]["class"] == "unknown"
    assert summary.iloc[-1]["positives"] == 1
    assert summary.iloc[-1]["prevalence"] == 0.5
