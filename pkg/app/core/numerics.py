from __future__ import annotations

import numpy as np

from app.core.errors import NonFiniteError

LOG_PROB_FLOOR = -30.0
ROW_SUM_TOLERANCE = 1e-12


def floored_log(probs: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return np.maximum(np.log(probs), LOG_PROB_FLOOR)


def categorical_kl(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Row-wise KL(p || q); rows where q misses mass that p puts down are ``inf``."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    support = p > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(support, p * (np.log(np.where(support, p, 1.0)) - np.log(q)), 0.0)
    return terms.sum(axis=-1)


def require_finite(name: str, values: np.ndarray) -> np.ndarray:
    array = np.asarray(values, dtype=float)
    if not np.all(np.isfinite(array)):
        raise NonFiniteError("non_finite", f"{name} contains non-finite entries")
    return array
