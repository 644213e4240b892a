"""4-D volume container (x, y, z, tau) with a brain mask, plus normalization and crops."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .physics import AcquisitionProtocol

DEFAULT_VOXEL_SIZE_MM = (2.3, 2.3, 7.5)


@dataclass
class Volume4D:
    """Signal volume of shape (h, w, d, n_t) and a boolean mask of shape (h, w, d).

    Masked-in voxels must hold finite data; everything outside the mask is
    ignored by training and analysis.
    """

    data: np.ndarray
    mask: np.ndarray | None = None
    voxel_size_mm: tuple[float, float, float] = DEFAULT_VOXEL_SIZE_MM

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 4:
            raise ValueError(f"volume data must be 4-D (h, w, d, n_t), got shape {self.data.shape}")
        if self.mask is None:
            self.mask = np.ones(self.data.shape[:3], dtype=bool)
        else:
            self.mask = np.asarray(self.mask, dtype=bool)
        if self.mask.shape != self.data.shape[:3]:
            raise ValueError(
                f"mask shape {self.mask.shape} does not match volume grid {self.data.shape[:3]}"
            )
        if not np.all(np.isfinite(self.data[self.mask])):
            raise ValueError("masked voxels must hold finite data")
        self.voxel_size_mm = tuple(float(v) for v in self.voxel_size_mm)
        if len(self.voxel_size_mm) != 3 or any(v <= 0 for v in self.voxel_size_mm):
            raise ValueError("voxel_size_mm must be three positive lengths")

    @property
    def grid_shape(self) -> tuple[int, int, int]:
        return self.data.shape[:3]

    @property
    def n_t(self) -> int:
        return self.data.shape[3]

    @property
    def n_masked(self) -> int:
        return int(self.mask.sum())

    def masked_signals(self) -> np.ndarray:
        """Masked voxels' signal rows, shape (n_masked, n_t), in C scan order."""
        return self.data[self.mask]


def normalize_volume(vol: Volume4D, proto: AcquisitionProtocol) -> tuple[Volume4D, int]:
    """Log-ratio normalization of every masked voxel against its spin-echo sample.

    Voxels with any non-positive sample cannot be log-normalized; they are
    dropped from the mask. Returns the normalized volume and the drop count.
    """
    if vol.n_t != proto.n_t:
        raise ValueError(f"volume has {vol.n_t} tau samples, protocol has {proto.n_t}")
    positive = np.all(vol.data > 0, axis=-1)
    keep = vol.mask & positive
    dropped = int(vol.mask.sum() - keep.sum())
    out = np.zeros_like(vol.data)
    rows = vol.data[keep]
    out[keep] = np.log(rows / rows[:, proto.se_index : proto.se_index + 1])
    return Volume4D(out, keep, vol.voxel_size_mm), dropped


def crop_xy(vol: Volume4D, x0: int, y0: int, size: int) -> Volume4D:
    """In-plane crop of side `size` at corner (x0, y0); all slices retained."""
    h, w, _ = vol.grid_shape
    if size < 1 or x0 < 0 or y0 < 0 or x0 + size > h or y0 + size > w:
        raise ValueError(f"crop ({x0}, {y0}, size {size}) exceeds grid ({h}, {w})")
    return Volume4D(
        vol.data[x0 : x0 + size, y0 : y0 + size],
        vol.mask[x0 : x0 + size, y0 : y0 + size],
        vol.voxel_size_mm,
    )


def valid_crop_corners(vol: Volume4D, size: int) -> np.ndarray:
    """Corners (x0, y0) whose size x size in-plane crop contains >= 1 masked voxel."""
    h, w, _ = vol.grid_shape
    if size > h or size > w:
        raise ValueError(f"crop size {size} exceeds in-plane grid ({h}, {w})")
    # count masked voxels under each candidate corner via a 2-D summed-area table
    flat = vol.mask.any(axis=2).astype(np.int64)
    sat = np.zeros((h + 1, w + 1), dtype=np.int64)
    sat[1:, 1:] = flat.cumsum(axis=0).cumsum(axis=1)
    nh, nw = h - size + 1, w - size + 1
    counts = (
        sat[size : size + nh, size : size + nw]
        - sat[0:nh, size : size + nw]
        - sat[size : size + nh, 0:nw]
        + sat[0:nh, 0:nw]
    )
    return np.argwhere(counts > 0)


def random_crop_xy(vol: Volume4D, size: int, rng: np.random.Generator) -> Volume4D:
    """Uniform random in-plane crop among positions containing at least one masked voxel."""
    valid = valid_crop_corners(vol, size)
    if valid.size == 0:
        raise ValueError("no crop position contains a masked voxel")
    x0, y0 = valid[rng.integers(len(valid))]
    return crop_xy(vol, int(x0), int(y0), size)
