from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .patching import token_coords

MASK_KINDS = ("random", "time", "frequency")


@dataclass(frozen=True)
class MaskSpec:
    kind: str
    masked: np.ndarray  # sorted token indices
    n_tokens: int
    param: float

    @property
    def visible(self) -> np.ndarray:
        keep = np.ones(self.n_tokens, dtype=bool)
        keep[self.masked] = False
        return np.flatnonzero(keep)

    @property
    def is_masked(self) -> np.ndarray:
        out = np.zeros(self.n_tokens, dtype=bool)
        out[self.masked] = True
        return out


def masked_count(ratio: float, n_tokens: int) -> int:
    """round(ratio * n) clamped to [1, n - 1]; halves round up."""
    return min(max(int(math.floor(ratio * n_tokens + 0.5)), 1), n_tokens - 1)


def sample_mask(kind: str, n_tokens: int, grid_dims, param, rng: np.random.Generator | None = None) -> MaskSpec:
    """Draw a random mask or build a time/frequency horizon mask.

    ``param`` is the masking ratio for ``random`` and the horizon in patch-grid
    units for ``time`` and ``frequency``.
    """
    gt, gs, gf = grid_dims
    if n_tokens != gt * gs * gf:
        raise ValueError(f"n_tokens {n_tokens} does not match grid {tuple(grid_dims)}")
    if kind == "random":
        if not 0.0 < param < 1.0:
            raise ValueError(f"random mask ratio must lie in (0, 1), got {param}")
        if n_tokens < 2:
            raise ValueError("random mask needs at least 2 tokens")
        if rng is None:
            raise ValueError("random mask needs an rng")
        k = masked_count(param, n_tokens)
        masked = np.sort(rng.choice(n_tokens, size=k, replace=False))
    elif kind in ("time", "frequency"):
        axis, size = (0, gt) if kind == "time" else (2, gf)
        h = int(param)
        if h != param or not 1 <= h < size:
            raise ValueError(f"{kind} horizon must be an integer in [1, {size}), got {param}")
        coords = token_coords(grid_dims)
        masked = np.flatnonzero(coords[:, axis] >= size - h)
    else:
        raise ValueError(f"unknown mask kind {kind!r}; expected one of {MASK_KINDS}")
    if masked.size == 0 or masked.size == n_tokens:
        raise ValueError(f"{kind} mask would leave no masked or no visible tokens")
    return MaskSpec(kind, masked.astype(np.intp), n_tokens, float(param))
