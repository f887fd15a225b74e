from __future__ import annotations

import numpy as np


def sinusoid_1d(positions: np.ndarray, dim: int) -> np.ndarray:
    """Interleaved sin/cos features: channel 2i is sin, 2i+1 is cos."""
    positions = np.asarray(positions, dtype=np.float64)
    out = np.zeros((positions.size, dim))
    half = (dim + 1) // 2
    freqs = 1.0 / (10000.0 ** (2.0 * np.arange(half) / dim))
    angles = positions[:, None] * freqs[None, :]
    out[:, 0::2] = np.sin(angles)
    out[:, 1::2] = np.cos(angles[:, : dim // 2])
    return out


def stf_pos_encode(coords: np.ndarray, grid_dims, dim: int) -> np.ndarray:
    """Space-time-frequency positional code, one sinusoid block per axis.

    ``coords`` holds (it, is, if) rows. The output concatenates blocks of
    ``dim // 3`` channels in the order space, time, frequency, so each block
    only sees its own axis coordinate.
    """
    if dim % 3:
        raise ValueError(f"positional dimension {dim} is not divisible by 3")
    coords = np.asarray(coords)
    if coords.ndim != 2 or coords.shape[1] != 3:
        raise ValueError(f"coords must be (n, 3), got {coords.shape}")
    if len(coords) and (np.any(coords < 0) or np.any(coords >= np.asarray(grid_dims))):
        raise ValueError(f"coords fall outside grid {tuple(grid_dims)}")
    block = dim // 3
    t, s, f = coords[:, 0], coords[:, 1], coords[:, 2]
    return np.concatenate([sinusoid_1d(s, block), sinusoid_1d(t, block), sinusoid_1d(f, block)], axis=1)
