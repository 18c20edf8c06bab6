"""Regression metrics: R2 (raw and clamped) and accuracy to tolerance."""

from __future__ import annotations

import math

import numpy as np

DISCARD_FRACTION = 0.05
DISCARD_MIN_POINTS = 20
ZERO_TARGET_FLOOR = 1e-12
# relative slack on the tolerance comparison, absorbs binary rounding of
# decimal inputs such as |2.2 - 2| / 2
TAU_SLACK = 1e-9


def r2_score(y, y_hat) -> tuple[float, float]:
    """Return ``(raw, clamped)`` R2.

    ``clamped`` is 0 whenever ``raw`` is negative or non-finite. For a
    constant target the score is 1 on an exact match and 0 otherwise.
    """
    y = np.asarray(y, dtype=float)
    y_hat = np.asarray(y_hat, dtype=float)
    if y.shape != y_hat.shape or y.size < 2:
        raise ValueError("y and y_hat must have the same length >= 2")
    with np.errstate(all="ignore"):
        ss_res = float(np.sum((y - y_hat) ** 2))
        ss_tot = float(np.sum((y - y.mean()) ** 2))
    if ss_tot == 0.0:
        raw = 1.0 if np.array_equal(y, y_hat) else 0.0
    else:
        raw = 1.0 - ss_res / ss_tot if math.isfinite(ss_res) else -math.inf
    clamped = raw if math.isfinite(raw) and raw >= 0 else 0.0
    return raw, clamped


def n_discarded(n: int) -> int:
    if n < DISCARD_MIN_POINTS:
        return 0
    return math.ceil(DISCARD_FRACTION * n)


def relative_errors(y, y_hat) -> np.ndarray:
    """``|y_hat - y| / |y|`` with zero targets floored; failed predictions are ``inf``."""
    y = np.asarray(y, dtype=float)
    y_hat = np.asarray(y_hat, dtype=float)
    with np.errstate(all="ignore"):
        err = np.abs(y_hat - y) / np.maximum(np.abs(y), ZERO_TARGET_FLOOR)
    return np.where(np.isfinite(err), err, np.inf)


def acc_tau(y, y_hat, tau: float) -> int:
    """1 if the worst relative error, after dropping the worst 5%, is within ``tau``."""
    err = np.sort(relative_errors(y, y_hat))
    k = n_discarded(err.size)
    kept = err[: err.size - k]
    if kept.size == 0:
        return 1
    return int(kept[-1] <= tau * (1.0 + TAU_SLACK))


def has_zero_targets(y) -> bool:
    return bool(np.any(np.asarray(y) == 0))
