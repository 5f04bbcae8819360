"""Per-layer magnitude top-k selection and the two split rules built on it."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import ParamVector, SparseUpdate


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SparsifyConfig:
    """``drop_ratio`` is the percentage of each layer dropped by magnitude."""

    drop_ratio: float = 99.0
    per_layer: bool = True

    def __post_init__(self):
        if not 0.0 <= self.drop_ratio < 100.0:
            raise ConfigError(f"drop_ratio must lie in [0, 100), got {self.drop_ratio}")
        if not self.per_layer:
            raise ConfigError("only per-layer selection is supported")


def keep_count(n: int, drop_ratio: float) -> int:
    """k = ceil(n * (100 - R) / 100), never below 1 for a non-empty layer."""
    if n <= 0:
        return 0
    # guard against 100*(1-0.99)-style representation error pushing ceil up
    k = math.ceil(n * (100.0 - drop_ratio) / 100.0 - 1e-9)
    return max(1, min(n, k))


def select_topk(values: np.ndarray, drop_ratio: float) -> np.ndarray:
    """Positions of the k largest magnitudes, sorted ascending.

    Exact zeros are never selected. Ties at the cut-off go to the lower
    index.
    """
    mag = np.abs(np.asarray(values, dtype=np.float64))
    n = mag.size
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    k = keep_count(n, drop_ratio)
    if k >= n:
        return np.flatnonzero(mag)
    # k-th largest magnitude via partial sort
    thr = np.partition(mag, n - k)[n - k]
    if thr == 0.0:
        return np.flatnonzero(mag)
    above = np.flatnonzero(mag > thr)
    ties = np.flatnonzero(mag == thr)[: k - above.size]
    return np.sort(np.concatenate([above, ties]))


def layer_mask(vec: ParamVector, cfg: SparsifyConfig) -> np.ndarray:
    """Boolean mask over the full vector, top-k chosen independently per layer."""
    mask = np.zeros(len(vec), dtype=bool)
    data = vec.values
    for sl in vec.partition.slices():
        mask[sl.start + select_topk(data[sl], cfg.drop_ratio)] = True
    return mask


def _masked_update(data: np.ndarray, mask: np.ndarray) -> SparseUpdate:
    idx = np.flatnonzero(mask & (data != 0.0))
    return SparseUpdate(idx, data[idx])


def _check_mask(vec: ParamVector, mask) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool).reshape(-1)
    if mask.size != len(vec):
        raise ValueError(f"mask length {mask.size} != vector length {len(vec)}")
    return mask


def split_residual(v: ParamVector, cfg: SparsifyConfig, mask=None) -> tuple[SparseUpdate, ParamVector]:
    """Gradient-dropping split: send the masked part, keep the rest as residual.

    ``mask`` overrides top-k selection (used to force a send schedule).
    """
    mask = layer_mask(v, cfg) if mask is None else _check_mask(v, mask)
    g = _masked_update(v.values, mask)
    rest = v.values.copy()
    rest[mask] = 0.0
    return g, ParamVector._wrap(rest, v.partition)


def split_samomentum(u: ParamVector, cfg: SparsifyConfig, m: float, mask=None) -> tuple[SparseUpdate, ParamVector]:
    """Send the masked part of the velocity; rescale every unsent component by 1/m.

    Sent components keep their value in the returned velocity.
    """
    if not 0.0 < m < 1.0:
        raise ConfigError(f"SAMomentum needs 0 < m < 1, got {m}")
    mask = layer_mask(u, cfg) if mask is None else _check_mask(u, mask)
    g = _masked_update(u.values, mask)
    out = u.values.copy()
    unsent = ~mask
    out[unsent] = out[unsent] / m
    return g, ParamVector._wrap(out, u.partition)
