"""Input checks shared by the estimator wrappers and the CLI."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .errors import ContractError, DimensionError


def check_features(x, feat_dim: int | None = None, name: str = "features") -> np.ndarray:
    """Return ``x`` as a finite float64 ``(T, d)`` array with ``T >= 1``."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise DimensionError(f"{name} must be 2-D (frames x dims), got shape {arr.shape}")
    if arr.shape[0] < 1:
        raise ContractError(f"{name} has no frames")
    if feat_dim is not None and arr.shape[1] != feat_dim:
        raise DimensionError(f"{name} have {arr.shape[1]} dims, model expects {feat_dim}")
    if not np.isfinite(arr).all():
        raise ContractError(f"{name} contain non-finite values")
    return arr


def check_tokens(tokens, vocab_size: int, *, blank_id: int = 0, allow_empty: bool = True,
                 name: str = "tokens") -> list[int]:
    ids = [int(t) for t in np.asarray(tokens, dtype=np.int64).reshape(-1)]
    if not allow_empty and not ids:
        raise ContractError(f"{name} must not be empty")
    for t in ids:
        if not 0 <= t < vocab_size or t == blank_id:
            raise ContractError(f"{name}: id {t} is not a non-blank token of a {vocab_size}-symbol vocabulary")
    return ids


def check_triples(X: Sequence, feat_dim: int | None, vocab_size: int) -> list[tuple[np.ndarray, list[int], np.ndarray]]:
    """Normalise ``(enrollment, wake_tokens, mixture)`` triples."""
    if len(X) == 0:
        raise ContractError("no samples given")
    out = []
    for i, item in enumerate(X):
        if hasattr(item, "enrollment"):
            item = (item.enrollment, item.wake, item.command)
        if len(item) != 3:
            raise ContractError(f"sample {i}: expected (enrollment, wake_tokens, mixture)")
        enr, wake, mix = item
        out.append((check_features(enr, feat_dim, f"sample {i} enrollment"),
                    check_tokens(wake, vocab_size, allow_empty=False, name=f"sample {i} wake word"),
                    check_features(mix, feat_dim, f"sample {i} mixture")))
    return out


def parse_range(text: str, name: str) -> tuple[float, float]:
    """``"lo:hi"`` -> ``(lo, hi)`` with ``lo <= hi``."""
    try:
        lo, hi = (float(p) for p in text.split(":"))
    except ValueError as exc:
        raise ValueError(f"{name} must look like LO:HI, got {text!r}") from exc
    if lo > hi:
        raise ValueError(f"{name}: lower bound {lo} exceeds upper bound {hi}")
    return lo, hi


def parse_grid(text: str) -> list[float]:
    """``"lo:hi:step"`` -> values from ``hi`` down to ``lo``."""
    parts = text.split(":")
    if len(parts) != 3:
        raise ValueError(f"grid must look like LO:HI:STEP, got {text!r}")
    lo, hi, step = (float(p) for p in parts)
    if step <= 0 or lo > hi:
        raise ValueError(f"invalid grid {text!r}")
    n = int(round((hi - lo) / step))
    return [round(hi - k * step, 9) for k in range(n + 1)]
