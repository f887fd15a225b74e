from __future__ import annotations

from dataclasses import dataclass

import numpy as np

AXES = ("time", "antenna", "frequency")


@dataclass(frozen=True)
class PatchSpec:
    pt: int = 1
    ps: int = 4
    pf: int = 4

    @property
    def extents(self) -> tuple[int, int, int]:
        return (self.pt, self.ps, self.pf)

    @property
    def volume(self) -> int:
        return self.pt * self.ps * self.pf

    @property
    def width(self) -> int:
        """Real features per token (real and imaginary parts)."""
        return 2 * self.volume

    def grid_dims(self, shape) -> tuple[int, int, int]:
        """Patch-grid size for a (T, S, F) shape; raises on non-divisible axes."""
        dims = []
        for axis, n, p in zip(AXES, shape, self.extents):
            if p < 1 or n % p:
                raise ValueError(f"{axis} axis of size {n} is not divisible by patch extent {p}")
            dims.append(n // p)
        return tuple(dims)


def token_coords(grid_dims) -> np.ndarray:
    """(n_tokens, 3) patch coordinates (it, is, if) in row-major token order."""
    gt, gs, gf = grid_dims
    it, is_, if_ = np.meshgrid(np.arange(gt), np.arange(gs), np.arange(gf), indexing="ij")
    return np.stack([it.ravel(), is_.ravel(), if_.ravel()], axis=1)


def patchify(values: np.ndarray, patch: PatchSpec) -> np.ndarray:
    """Cut a complex [..., T, S, F] grid into flattened 3D patches.

    Returns real [..., n_tokens, 2 * pt * ps * pf]; each row holds the real
    parts of its sub-block (t-major) followed by the imaginary parts.
    """
    values = np.asarray(values)
    *lead, T, S, F = values.shape
    gt, gs, gf = patch.grid_dims((T, S, F))
    pt, ps, pf = patch.extents
    x = values.reshape(*lead, gt, pt, gs, ps, gf, pf)
    k = len(lead)
    x = x.transpose(*range(k), k, k + 2, k + 4, k + 1, k + 3, k + 5)
    x = x.reshape(*lead, gt * gs * gf, pt * ps * pf)
    real_dtype = np.float32 if values.dtype in (np.complex64, np.float32) else np.float64
    out = np.empty((*lead, gt * gs * gf, 2 * pt * ps * pf), dtype=real_dtype)
    vol = pt * ps * pf
    out[..., :vol] = x.real
    out[..., vol:] = x.imag if np.iscomplexobj(x) else 0.0
    return out


def unpatchify(patches: np.ndarray, patch: PatchSpec, shape) -> np.ndarray:
    """Inverse of ``patchify`` for a target (T, S, F) shape."""
    patches = np.asarray(patches)
    T, S, F = shape
    gt, gs, gf = patch.grid_dims((T, S, F))
    pt, ps, pf = patch.extents
    *lead, n, w = patches.shape
    if n != gt * gs * gf or w != patch.width:
        raise ValueError(f"patch matrix shape {(n, w)} does not match grid {(gt, gs, gf)} / width {patch.width}")
    vol = pt * ps * pf
    cdtype = np.complex64 if patches.dtype == np.float32 else np.complex128
    z = np.empty((*lead, n, vol), dtype=cdtype)
    z.real = patches[..., :vol]
    z.imag = patches[..., vol:]
    k = len(lead)
    z = z.reshape(*lead, gt, gs, gf, pt, ps, pf)
    z = z.transpose(*range(k), k, k + 3, k + 1, k + 4, k + 2, k + 5)
    return z.reshape(*lead, T, S, F)


def rms_normalize(values: np.ndarray, region: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Divide each sample of a [..., T, S, F] batch by its RMS magnitude.

    ``region`` is an optional boolean (T, S, F) mask restricting which entries
    the RMS is measured on. Returns (normalized, rms) with ``rms`` shaped to
    broadcast against the input.
    """
    values = np.asarray(values)
    p = np.abs(values) ** 2
    if region is not None:
        p = np.where(region, p, 0.0)
        count = max(int(np.count_nonzero(region)), 1)
    else:
        count = int(np.prod(values.shape[-3:]))
    rms = np.sqrt(p.sum(axis=(-3, -2, -1), keepdims=True) / count)
    rms = np.where(rms > 0, rms, 1.0).astype(p.dtype)
    return values / rms, rms


def stack_along_time(csi_2d: np.ndarray, group: int) -> np.ndarray:
    """Turn consecutive 2D [S, F] snapshots into 3D samples [N // group, group, S, F]."""
    csi_2d = np.asarray(csi_2d)
    if csi_2d.ndim != 3:
        raise ValueError(f"expected [N, S, F] input, got shape {csi_2d.shape}")
    n = csi_2d.shape[0] // group
    if n == 0:
        raise ValueError(f"{csi_2d.shape[0]} snapshots cannot fill a group of {group}")
    return csi_2d[: n * group].reshape(n, group, *csi_2d.shape[1:])
