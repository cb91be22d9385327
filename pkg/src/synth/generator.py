"""Labeled synthetic 12-lead ECGs.

Limb leads project a single cardiac dipole onto the frontal plane, so the
sign pattern of the R waves across leads I, II and III encodes the QRS axis.
Precordial leads carry a fixed template.
"""

import logging
from typing import Dict, FrozenSet, List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, Field, ValidationError, field_validator, model_validator

from src.data_processing.record_io import (
    ClassMap,
    ClassSet,
    EcgRecord,
    LEAD_NAMES,
    NUM_LEADS,
    RecordMeta,
    quantize_signal,
    read_signal,
)
from src.errors import InvalidSpec

logger = logging.getLogger(__name__)

SYNTH_LABELS = ("SNR", "LAD", "RAD", "SB", "STach", "AF")
LIMB_LEAD_ANGLES = {"I": 0.0, "II": 60.0, "III": 120.0, "aVR": -150.0, "aVL": -30.0, "aVF": 90.0}
PRECORDIAL_R_MV = {"V1": 0.3, "V2": 0.5, "V3": 0.8, "V4": 1.1, "V5": 1.0, "V6": 0.8}

R_AMPLITUDE_MV = 1.0
P_AMPLITUDE_MV = 0.15
T_AMPLITUDE_MV = 0.3
R_WIDTH_S = 0.012
P_WIDTH_S = 0.02
T_WIDTH_S = 0.06
P_OFFSET_S = -0.16
T_OFFSET_S = 0.30
FIRST_BEAT_S = 0.25
AFIB_JITTER = 0.2
SYNTH_GAIN = 1000.0

# Sampling regions keep a margin from every label boundary
REGION_MARGIN_DEG = 5.0
REGION_MARGIN_BPM = 5.0
AXIS_REGIONS = {"LAD": (-90.0, -30.0), "RAD": (90.0, 180.0), "normal": (-30.0, 90.0)}
RATE_REGIONS = {"SB": (40.0, 60.0), "STach": (100.0, 150.0), "normal": (60.0, 100.0), "AF": (60.0, 140.0)}


class SynthSpec(BaseModel):
    heart_rate_bpm: float = Field(default=75.0, gt=0.0)
    qrs_axis_degrees: float = 60.0
    rhythm: str = "sinus"
    noise_std_mv: float = Field(default=0.0, ge=0.0)
    duration_s: float = Field(default=10.0, gt=0.0)
    sampling_rate_hz: int = Field(default=500, gt=0)
    seed: int = 0
    record_id: str = "S000001"
    age_years: Optional[int] = None
    sex: Optional[str] = None

    @field_validator("qrs_axis_degrees")
    @classmethod
    def check_axis(cls, value: float) -> float:
        if not -180.0 < value <= 180.0:
            raise ValueError(f"axis {value} outside (-180, 180]")
        return value

    @field_validator("rhythm")
    @classmethod
    def check_rhythm(cls, value: str) -> str:
        if value not in ("sinus", "afib"):
            raise ValueError(f"rhythm must be sinus or afib, got {value!r}")
        return value

    @model_validator(mode="after")
    def check_length(self) -> "SynthSpec":
        if self.duration_s * self.sampling_rate_hz < 2:
            raise ValueError("duration_s * sampling_rate_hz must be at least 2")
        return self

    @property
    def num_samples(self) -> int:
        return int(round(self.duration_s * self.sampling_rate_hz))


def make_spec(**values) -> SynthSpec:
    try:
        return SynthSpec(**values)
    except ValidationError as e:
        raise InvalidSpec(f"invalid synth spec: {e.errors()[0]['msg']}")


def label_rule(spec: SynthSpec) -> FrozenSet[str]:
    """Labels implied by axis, rate and rhythm; independent of the noise draw."""
    axis, rate = spec.qrs_axis_degrees, spec.heart_rate_bpm
    sinus = spec.rhythm == "sinus"
    labels = set()
    if -90.0 < axis < -30.0:
        labels.add("LAD")
    if 90.0 < axis <= 180.0:
        labels.add("RAD")
    if sinus and rate < 60.0:
        labels.add("SB")
    if sinus and rate > 100.0:
        labels.add("STach")
    if not sinus:
        labels.add("AF")
    if sinus and 60.0 <= rate <= 100.0 and -30.0 <= axis <= 90.0:
        labels.add("SNR")
    return frozenset(labels)


def beat_times(spec: SynthSpec, rng: np.random.Generator) -> np.ndarray:
    rr_mean = 60.0 / spec.heart_rate_bpm
    times = []
    t = FIRST_BEAT_S
    while t < spec.duration_s:
        times.append(t)
        if spec.rhythm == "afib":
            t += rr_mean * rng.uniform(1.0 - AFIB_JITTER, 1.0 + AFIB_JITTER)
        else:
            t += rr_mean
    return np.array(times)


def _gaussian_train(t: np.ndarray, centers: np.ndarray, width: float) -> np.ndarray:
    if len(centers) == 0:
        return np.zeros_like(t)
    return np.exp(-0.5 * ((t[None, :] - centers[:, None]) / width) ** 2).sum(axis=0)


def synthesize_signal(spec: SynthSpec, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    """
    Noise-free 12-lead waveform plus the beat times it was built from.

    Returns:
        Tuple[np.ndarray, np.ndarray]: (12, samples) millivolts and R-wave times in seconds
    """
    t = np.arange(spec.num_samples) / spec.sampling_rate_hz
    beats = beat_times(spec, rng)

    r_wave = _gaussian_train(t, beats, R_WIDTH_S)
    t_wave = _gaussian_train(t, beats + T_OFFSET_S, T_WIDTH_S)
    p_wave = _gaussian_train(t, beats + P_OFFSET_S, P_WIDTH_S) if spec.rhythm == "sinus" else np.zeros_like(t)
    # Beats overlap only through their tails; cap at one template height
    r_wave, t_wave, p_wave = (np.minimum(w, 1.0) for w in (r_wave, t_wave, p_wave))

    signal = np.zeros((NUM_LEADS, spec.num_samples))
    for lead, name in enumerate(LEAD_NAMES):
        if name in LIMB_LEAD_ANGLES:
            projection = np.cos(np.deg2rad(spec.qrs_axis_degrees - LIMB_LEAD_ANGLES[name]))
            signal[lead] = projection * (R_AMPLITUDE_MV * r_wave + P_AMPLITUDE_MV * p_wave + T_AMPLITUDE_MV * t_wave)
        else:
            signal[lead] = PRECORDIAL_R_MV[name] * r_wave + P_AMPLITUDE_MV * p_wave + T_AMPLITUDE_MV * t_wave
    return signal, beats


def generate_record(spec: SynthSpec, class_map: ClassMap) -> EcgRecord:
    """
    Generate one labeled record.

    Args:
        spec (SynthSpec): Morphology, rhythm and noise settings
        class_map (ClassMap): Maps label abbreviations to class indices and codes

    Returns:
        EcgRecord: Record whose signal is already quantized to the stored resolution

    Raises:
        InvalidSpec: The spec implies no label
    """
    labels = label_rule(spec)
    if not labels:
        raise InvalidSpec(
            f"spec with axis {spec.qrs_axis_degrees} and rate {spec.heart_rate_bpm} maps to no label"
        )

    rng = np.random.default_rng(spec.seed)
    clean, _ = synthesize_signal(spec, rng)
    noisy = clean + rng.normal(0.0, spec.noise_std_mv, size=clean.shape) if spec.noise_std_mv > 0 else clean

    indices = sorted(class_map.index_of(label) for label in labels)
    meta = RecordMeta(
        record_id=spec.record_id,
        num_leads=NUM_LEADS,
        sampling_rate_hz=spec.sampling_rate_hz,
        num_samples=spec.num_samples,
        per_lead_gain=tuple([SYNTH_GAIN] * NUM_LEADS),
        per_lead_baseline=tuple([0] * NUM_LEADS),
        age_years=spec.age_years,
        sex=spec.sex,
        dx_codes=tuple(class_map.primary_code(i) for i in indices),
    )
    # Quantized like the stored file, so a written record re-reads identically
    record = read_signal(meta, quantize_signal(meta, noisy).tobytes())
    return record.with_labels(ClassSet.from_indices(indices, class_map.num_classes))


def parse_combination(text: str) -> FrozenSet[str]:
    """``"LAD+SB"`` -> {"LAD", "SB"}; validates the combination is generable."""
    labels = frozenset(part.strip() for part in text.split("+") if part.strip())
    unknown = labels - set(SYNTH_LABELS)
    if not labels or unknown:
        raise InvalidSpec(f"cannot synthesize label combination {text!r}")
    if "SNR" in labels and len(labels) > 1:
        raise InvalidSpec("SNR cannot be combined with other labels")
    if {"LAD", "RAD"} <= labels or {"SB", "STach"} <= labels:
        raise InvalidSpec(f"mutually exclusive labels in {text!r}")
    if "AF" in labels and labels & {"SB", "STach"}:
        raise InvalidSpec("AF excludes sinus rate labels")
    return labels


def _sample_inside(region: Tuple[float, float], margin: float, rng: np.random.Generator) -> float:
    low, high = region
    return float(rng.uniform(low + margin, high - margin))


def sample_spec(labels: FrozenSet[str], rng: np.random.Generator, **overrides) -> SynthSpec:
    """Draw axis and rate uniformly inside the regions defining ``labels``."""
    axis_key = "LAD" if "LAD" in labels else "RAD" if "RAD" in labels else "normal"
    if "AF" in labels:
        rate_key = "AF"
    else:
        rate_key = "SB" if "SB" in labels else "STach" if "STach" in labels else "normal"

    spec = make_spec(
        qrs_axis_degrees=_sample_inside(AXIS_REGIONS[axis_key], REGION_MARGIN_DEG, rng),
        heart_rate_bpm=_sample_inside(RATE_REGIONS[rate_key], REGION_MARGIN_BPM, rng),
        rhythm="afib" if "AF" in labels else "sinus",
        age_years=int(rng.integers(20, 90)),
        sex=str(rng.choice(["female", "male"])),
        seed=int(rng.integers(0, 2**31 - 1)),
        **overrides,
    )
    if label_rule(spec) != labels:
        raise InvalidSpec(f"sampled spec does not reproduce labels {sorted(labels)}")
    return spec


def generate_dataset(
    counts: Dict[str, int],
    class_map: ClassMap,
    noise_std_mv: float = 0.05,
    seed: int = 0,
    duration_s: float = 10.0,
    sampling_rate_hz: int = 500,
) -> List[EcgRecord]:
    """
    Generate a shuffled dataset with exact per-combination counts.

    Args:
        counts (Dict[str, int]): Label combination (e.g. "LAD" or "AF+RAD") to record count
        class_map (ClassMap): Class map for labels and codes
        noise_std_mv (float): Additive Gaussian noise level
        seed (int): Dataset seed
        duration_s (float): Record duration
        sampling_rate_hz (int): Record sampling rate

    Returns:
        List[EcgRecord]: Records with ids S000001.. in shuffled order
    """
    rng = np.random.default_rng(seed)
    plan = []
    for combination in sorted(counts):
        labels = parse_combination(combination)
        plan.extend([labels] * int(counts[combination]))
    order = rng.permutation(len(plan))

    records = []
    for position, plan_index in enumerate(order):
        spec = sample_spec(
            plan[plan_index],
            rng,
            noise_std_mv=noise_std_mv,
            duration_s=duration_s,
            sampling_rate_hz=sampling_rate_hz,
            record_id=f"S{position + 1:06d}",
        )
        records.append(generate_record(spec, class_map))

    logger.info(f"Generated {len(records)} synthetic records from {len(counts)} label combinations")
    return records


def find_r_peaks(signal: np.ndarray, sampling_rate_hz: int, min_distance_s: float = 0.25) -> np.ndarray:
    """
    R-peak sample indices from the limb-lead energy envelope.

    Greedy: take the strongest remaining sample above 30% of the maximum and
    suppress its neighbourhood.
    """
    limb = [LEAD_NAMES.index(name) for name in LIMB_LEAD_ANGLES]
    envelope = np.sum(signal[limb] ** 2, axis=0)
    threshold = 0.3 * envelope.max()
    distance = int(min_distance_s * sampling_rate_hz)

    taken = np.zeros(len(envelope), dtype=bool)
    peaks = []
    for index in np.argsort(envelope)[::-1]:
        if envelope[index] < threshold:
            break
        if taken[index]:
            continue
        peaks.append(index)
        taken[max(0, index - distance):index + distance + 1] = True
    return np.sort(np.array(peaks, dtype=int))


def estimate_axis_labels(record: EcgRecord) -> FrozenSet[str]:
    """
    Rule-based axis reading from the sign of summed R-peak deflections.

    LAD: lead I positive with II and III negative. RAD: lead I negative with
    II + III (the inferior direction) positive.

    Args:
        record (EcgRecord): Record to read

    Returns:
        FrozenSet[str]: {"LAD"}, {"RAD"} or empty
    """
    peaks = find_r_peaks(record.signal, record.meta.sampling_rate_hz)
    if len(peaks) == 0:
        return frozenset()
    lead_i, lead_ii, lead_iii = (record.signal[LEAD_NAMES.index(n), peaks].sum() for n in ("I", "II", "III"))

    if lead_i > 0 and lead_ii < 0 and lead_iii < 0:
        return frozenset({"LAD"})
    if lead_i < 0 and lead_ii + lead_iii > 0:
        return frozenset({"RAD"})
    return frozenset()
