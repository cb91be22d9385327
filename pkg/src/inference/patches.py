from dataclasses import dataclass
from typing import List

import numpy as np

PATCH_LENGTH = 4096
PATCH_OVERLAP = 256


@dataclass(frozen=True)
class PatchPlan:
    patch_starts: List[int]
    patch_length: int = PATCH_LENGTH
    overlap: int = PATCH_OVERLAP


def pad_to_length(signal: np.ndarray, length: int = PATCH_LENGTH) -> np.ndarray:
    """Zero-pad a leads x L matrix at the end up to ``length`` columns."""
    missing = length - signal.shape[1]
    if missing <= 0:
        return signal
    return np.pad(signal, ((0, 0), (0, missing)), mode="constant")


def patch_count(length: int, overlap: int = PATCH_OVERLAP) -> int:
    """
    Number of patches for a signal: ceil((L - 4096) / (4096 - O)) + 1, and 1 when L <= 4096.

    Args:
        length (int): Signal length in samples
        overlap (int): Overlap O between consecutive patches

    Returns:
        int: Patch count P
    """
    if length <= PATCH_LENGTH:
        return 1
    hop = PATCH_LENGTH - overlap
    # integer ceil
    return -(-(length - PATCH_LENGTH) // hop) + 1


def plan_patches(length: int, overlap: int = PATCH_OVERLAP) -> PatchPlan:
    """
    Patch start offsets; the last start is clamped so the final patch ends at L.

    Args:
        length (int): Signal length in samples
        overlap (int): Overlap between consecutive patches

    Returns:
        PatchPlan: Start offsets and geometry
    """
    count = patch_count(length, overlap)
    hop = PATCH_LENGTH - overlap
    starts = [i * hop for i in range(count)]
    if length > PATCH_LENGTH:
        starts[-1] = length - PATCH_LENGTH
    return PatchPlan(patch_starts=starts, patch_length=PATCH_LENGTH, overlap=overlap)


def segment_patches(signal: np.ndarray, overlap: int = PATCH_OVERLAP) -> List[np.ndarray]:
    """
    Split a leads x L signal into overlapping 4096-sample patches.

    Args:
        signal (np.ndarray): Leads x L matrix
        overlap (int): Overlap between consecutive patches

    Returns:
        List[np.ndarray]: Patches, each leads x 4096
    """
    length = signal.shape[1]
    if length <= PATCH_LENGTH:
        return [pad_to_length(signal, PATCH_LENGTH)]
    plan = plan_patches(length, overlap)
    return [signal[:, start:start + PATCH_LENGTH] for start in plan.patch_starts]
