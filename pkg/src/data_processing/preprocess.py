import hashlib
import logging
from dataclasses import dataclass
from typing import List, Optional, Union

import numpy as np

from src.data_processing.record_io import EcgRecord, NUM_LEADS
from src.errors import DegenerateSignal, InvalidAge, ShapeMismatch
from src.inference.patches import PATCH_LENGTH, pad_to_length, segment_patches

logger = logging.getLogger(__name__)

TARGET_RATE_HZ = 257
DEMOGRAPHIC_DIM = 10
MAX_AGE_YEARS = 130
AGE_SCALE_YEARS = 100.0


@dataclass(frozen=True)
class Demographics:
    age_years: Optional[int] = None
    sex: Optional[str] = None


@dataclass(frozen=True)
class ModelInput:
    signal: np.ndarray
    demographics: np.ndarray

    def __post_init__(self):
        if self.signal.shape != (NUM_LEADS, PATCH_LENGTH):
            raise ShapeMismatch(f"model input signal must be {NUM_LEADS}x{PATCH_LENGTH}, got {self.signal.shape}")
        if self.demographics.shape != (DEMOGRAPHIC_DIM,):
            raise ShapeMismatch(f"demographics must have length {DEMOGRAPHIC_DIM}, got {self.demographics.shape}")


def derive_rng(global_seed: int, record_id: str) -> np.random.Generator:
    """Independent random stream for one record, stable across runs and worker counts."""
    digest = int.from_bytes(hashlib.sha256(record_id.encode("utf-8")).digest()[:8], "little")
    return np.random.default_rng(np.random.SeedSequence([global_seed, digest]))


def resample_linear(signal: np.ndarray, fs_in: int, fs_out: int = TARGET_RATE_HZ) -> np.ndarray:
    """
    Resample every lead by endpoint-preserving linear interpolation.

    Args:
        signal (np.ndarray): Leads x samples matrix
        fs_in (int): Input sampling rate in Hz
        fs_out (int): Output sampling rate in Hz

    Returns:
        np.ndarray: Leads x round(L * fs_out / fs_in) matrix

    Raises:
        DegenerateSignal: Fewer than two input samples
    """
    signal = np.asarray(signal, dtype=np.float64)
    length = signal.shape[1]
    if length < 2:
        raise DegenerateSignal(f"cannot resample a signal of {length} sample(s)")
    if fs_in == fs_out:
        return signal

    # Half-up rounding of L * fs_out / fs_in
    out_length = max(1, int(np.floor(length * fs_out / fs_in + 0.5)))
    positions = np.linspace(0.0, length - 1, out_length)
    grid = np.arange(length, dtype=np.float64)
    return np.stack([np.interp(positions, grid, lead) for lead in signal])


def fit_length(signal: np.ndarray, mode: str, rng: np.random.Generator = None) -> Union[np.ndarray, List[np.ndarray]]:
    """
    Fix a signal to the model length.

    Train mode end-pads short signals and clips long ones at a uniformly random
    offset; eval mode returns the overlapping patch list.

    Args:
        signal (np.ndarray): Leads x L matrix
        mode (str): "train" or "eval"
        rng (np.random.Generator): Random source for the clipping offset

    Returns:
        np.ndarray or List[np.ndarray]: One 12 x 4096 matrix (train) or patches (eval)
    """
    if mode == "eval":
        return segment_patches(signal)
    if mode != "train":
        raise ValueError(f"unknown mode {mode!r}")

    length = signal.shape[1]
    if length < PATCH_LENGTH:
        return pad_to_length(signal, PATCH_LENGTH)
    if length == PATCH_LENGTH:
        return signal
    rng = rng if rng is not None else np.random.default_rng()
    offset = int(rng.integers(0, length - PATCH_LENGTH + 1))
    return signal[:, offset:offset + PATCH_LENGTH]


def encode_demographics(demographics: Demographics) -> np.ndarray:
    """
    Encode age and sex with missing-value masks.

    Layout: [age/100, age-missing, female, male, sex-missing, 0, 0, 0, 0, 0].

    Args:
        demographics (Demographics): Optional age and sex

    Returns:
        np.ndarray: Vector of 10 values in [0, 1]

    Raises:
        InvalidAge: Age outside [0, 130]
    """
    features = np.zeros(DEMOGRAPHIC_DIM, dtype=np.float64)

    age = demographics.age_years
    if age is None:
        features[1] = 1.0
    else:
        if not 0 <= age <= MAX_AGE_YEARS:
            raise InvalidAge(f"age {age} outside [0, {MAX_AGE_YEARS}]")
        features[0] = min(1.0, max(0.0, age / AGE_SCALE_YEARS))

    if demographics.sex == "female":
        features[2] = 1.0
    elif demographics.sex == "male":
        features[3] = 1.0
    else:
        features[4] = 1.0

    return features


class SignalPreprocessor:
    def __init__(self, target_rate_hz: int = TARGET_RATE_HZ):
        """
        Initialize the SignalPreprocessor.

        Args:
            target_rate_hz (int): Common sampling rate every record is resampled to
        """
        self.target_rate_hz = target_rate_hz
        self.logger = logging.getLogger(__name__)

    def resample(self, record: EcgRecord) -> np.ndarray:
        return resample_linear(record.signal, record.meta.sampling_rate_hz, self.target_rate_hz)

    def demographics(self, record: EcgRecord) -> np.ndarray:
        return encode_demographics(Demographics(record.meta.age_years, record.meta.sex))

    def prepare(self, record: EcgRecord, mode: str, rng: np.random.Generator = None) -> Union[ModelInput, List[ModelInput]]:
        """
        Run resampling, length fixing and demographic encoding for one record.

        Args:
            record (EcgRecord): Parsed record
            mode (str): "train" for one randomly clipped input, "eval" for all patches
            rng (np.random.Generator, optional): Clipping random source

        Returns:
            ModelInput or List[ModelInput]: Model-ready input(s)
        """
        signal = self.resample(record)
        demographics = self.demographics(record)
        fitted = fit_length(signal, mode, rng)
        if mode == "train":
            return ModelInput(signal=fitted, demographics=demographics)
        return [ModelInput(signal=patch, demographics=demographics) for patch in fitted]


def prepare_record(record: EcgRecord, mode: str, rng: np.random.Generator = None) -> Union[ModelInput, List[ModelInput]]:
    return SignalPreprocessor().prepare(record, mode, rng)
