"""Sparse surface/borehole conditions and the {-1, +1} one-hot embedding."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import AIR, N_CATEGORIES
from .errors import DataError, UsageError

MASK = -1
K = N_CATEGORIES


@dataclass
class ConditionVolume:
    """Label grid with ``MASK`` where unobserved, plus the drilled columns."""

    labels: np.ndarray  # int8, shape (X, Y, Z)
    borehole_columns: list[tuple[int, int]] = field(default_factory=list)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.labels.shape

    @property
    def known(self) -> np.ndarray:
        return self.labels != MASK

    @classmethod
    def from_labels(cls, labels: np.ndarray) -> "ConditionVolume":
        """Rebuild from a stored grid; boreholes are the fully observed columns."""
        labels = np.asarray(labels, dtype=np.int8)
        full = np.all(labels != MASK, axis=2)
        cols = [(int(i), int(j)) for i, j in zip(*np.nonzero(full))]
        return cls(labels, cols)


def surface_index(vol: np.ndarray) -> np.ndarray:
    """z index of the topmost non-air voxel per column (-1 for all-air columns)."""
    ground = vol != AIR
    nz = vol.shape[2]
    top = nz - 1 - np.argmax(ground[:, :, ::-1], axis=2)
    return np.where(ground.any(axis=2), top, -1)


def sample_sparse(vol: np.ndarray, n_holes: int, seed: int) -> ConditionVolume:
    """Keep air, the surface layer and ``n_holes`` full vertical traces."""
    vol = np.asarray(vol)
    nx, ny, nz = vol.shape
    if not 0 <= n_holes <= nx * ny:
        raise UsageError(f"n_holes must be in [0, {nx * ny}], got {n_holes}")
    rng = np.random.default_rng(seed)
    picks = np.sort(rng.choice(nx * ny, size=n_holes, replace=False))
    labels = np.full(vol.shape, MASK, dtype=np.int8)
    air = vol == AIR
    labels[air] = AIR
    top = surface_index(vol)
    ii, jj = np.nonzero(top >= 0)
    labels[ii, jj, top[ii, jj]] = vol[ii, jj, top[ii, jj]]
    cols = [(int(p // ny), int(p % ny)) for p in picks]
    for i, j in cols:
        labels[i, j, :] = vol[i, j, :]
    return ConditionVolume(labels, cols)


def _check_labels(vol: np.ndarray) -> None:
    if vol.size and (vol.min() < 1 or vol.max() > K):
        raise DataError(f"labels must be in 1..{K}, found range [{vol.min()}, {vol.max()}]")


def embed(vol: np.ndarray, dtype=np.float32) -> np.ndarray:
    """[X,Y,Z] labels -> [K,X,Y,Z] with +1 on the label's channel, -1 elsewhere."""
    vol = np.asarray(vol)
    _check_labels(vol)
    cats = np.arange(1, K + 1).reshape((K,) + (1,) * vol.ndim)
    return np.where(vol[None] == cats, 1, -1).astype(dtype)


def decode(cv: np.ndarray) -> np.ndarray:
    """Per-voxel argmax over the channel axis; ties go to the lowest id."""
    cv = np.asarray(cv)
    if cv.shape[0] != K:
        raise DataError(f"expected {K} channels, got {cv.shape[0]}")
    return (np.argmax(cv, axis=0) + 1).astype(np.uint8)


def condition_channels(cond: ConditionVolume, dtype=np.float32) -> np.ndarray:
    """[K+1,X,Y,Z]: one-hot {-1,+1} where known, 0 where masked, then the known mask."""
    labels = cond.labels
    known = labels != MASK
    out = np.zeros((K + 1,) + labels.shape, dtype=dtype)
    cats = np.arange(1, K + 1).reshape((K, 1, 1, 1))
    out[:K] = np.where(labels[None] == cats, 1, -1) * known[None]
    out[K] = known
    return out
