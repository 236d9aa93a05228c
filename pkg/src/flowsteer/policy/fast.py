"""Per-dimension uniform action quantizer (discrete supervision targets)."""

from __future__ import annotations

import numpy as np

ACTION_RANGE = (-1.0, 1.0)


def fast_tokenize(chunk, bins: int = 32):
    """Quantize a chunk of actions in [-1, 1] to integer bin indices.

    Returns (tokens, clamped): tokens has the chunk's shape; clamped is True
    when any value fell outside the action range and was clipped first.
    """
    chunk = np.asarray(chunk, dtype=np.float64)
    if not np.isfinite(chunk).all():
        raise ValueError("non-finite action values")
    lo, hi = ACTION_RANGE
    clipped = np.clip(chunk, lo, hi)
    clamped = bool((chunk != clipped).any())
    idx = np.floor((clipped - lo) / (hi - lo) * bins).astype(np.int64)
    return np.minimum(idx, bins - 1), clamped


def fast_detokenize(tokens, bins: int = 32) -> np.ndarray:
    """Map bin indices back to bin centers."""
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.min(initial=0) < 0 or tokens.max(initial=0) >= bins:
        raise ValueError("token index out of range")
    lo, hi = ACTION_RANGE
    return lo + (tokens + 0.5) * (hi - lo) / bins
