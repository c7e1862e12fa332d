"""Scalar measures: Shannon entropy of a channel-weight vector, sparsity ratio."""

from __future__ import annotations

import numpy as np

from .errors import ValidationError

#: sum(w) may deviate from 1 by at most this much
SUM_TOL = 1e-9
#: entries more negative than this are rejected; tiny negatives round to 0
NEG_TOL = 1e-12


def check_distribution(w) -> np.ndarray:
    """Validate a probability vector: entries >= 0, entries summing to 1."""
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 1 or w.size == 0:
        raise ValidationError("probability vector must be a nonempty 1-d array")
    if np.any(w < -NEG_TOL):
        raise ValidationError(f"negative entry in probability vector: min={w.min()}")
    total = float(w.sum())
    if abs(total - 1.0) > SUM_TOL:
        raise ValidationError(f"probability vector sums to {total}, not 1")
    return np.maximum(w, 0.0)


def entropy(w) -> float:
    """Shannon entropy -sum(w_i log w_i), with 0*log(0) taken as 0.

    Ranges from 0 (all mass on one entry) to log(len(w)) (uniform).
    """
    w = check_distribution(w)
    nz = w[w > 0]
    return float(-(nz * np.log(nz)).sum())


def sparsity(baseline_params: int, model_params: int) -> float:
    """Fraction of baseline parameters removed: (baseline - model) / baseline."""
    if baseline_params <= 0:
        raise ValidationError("baseline_params must be positive")
    if model_params < 0:
        raise ValidationError("model_params must be nonnegative")
    if model_params > baseline_params:
        raise ValidationError(
            f"model has more parameters ({model_params}) than baseline ({baseline_params})"
        )
    return (baseline_params - model_params) / baseline_params
