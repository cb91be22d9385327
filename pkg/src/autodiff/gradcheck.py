from typing import Callable, Iterable, Optional

import numpy as np

DEFAULT_STEP = 1e-5


def numerical_gradient(
    fn: Callable[[], float],
    array: np.ndarray,
    step: float = DEFAULT_STEP,
    indices: Optional[Iterable[tuple]] = None,
) -> np.ndarray:
    """
    Central finite-difference gradient of ``fn`` with respect to ``array``.

    ``array`` is perturbed in place and restored after each evaluation.

    Args:
        fn (Callable[[], float]): Closure re-evaluating the scalar output
        array (np.ndarray): Array the closure reads
        step (float): Finite-difference step h
        indices (Iterable[tuple], optional): Entries to probe; all when omitted

    Returns:
        np.ndarray: Gradient estimate, zero at unprobed entries
    """
    grad = np.zeros_like(array, dtype=np.float64)
    probe = indices if indices is not None else np.ndindex(array.shape)
    for index in probe:
        original = array[index]
        array[index] = original + step
        plus = fn()
        array[index] = original - step
        minus = fn()
        array[index] = original
        grad[index] = (plus - minus) / (2.0 * step)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max|a - n| / max(1e-12, max|a| + max|n|)."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = max(1e-12, np.abs(analytic).max(initial=0.0) + np.abs(numeric).max(initial=0.0))
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def sample_indices(shape, count: int, rng: np.random.Generator) -> list:
    """Random subset of entries for probing large arrays."""
    total = int(np.prod(shape))
    flat = rng.choice(total, size=min(count, total), replace=False)
    return [np.unravel_index(i, shape) for i in flat]
