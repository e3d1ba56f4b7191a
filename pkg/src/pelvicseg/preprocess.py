"""Intensity normalization, tiled adaptive histogram equalization, centroid
extraction, geometric augmentation, and slice balancing.

Everything here is pure given an explicit rng stream; augmentation workers
derive independent streams so results do not depend on worker count.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .rng import Rng
from .volcore import Volume


class EmptyMaskError(Exception):
    """Signals localization failure; callers fall back to the grid center."""


@dataclass(frozen=True)
class AheParams:
    tile_grid: tuple[int, int] = (8, 8)
    clip_limit: float = 0.01  # fraction of tile pixel count; <=0 disables clipping
    bins: int = 256


@dataclass(frozen=True)
class AugmentParams:
    max_rotation_deg: float = 10.0
    scale_range: tuple[float, float] = (0.9, 1.1)
    flip_axes: tuple[str, ...] = ("x",)


def _tile_edges(n: int, tiles: int) -> np.ndarray:
    return np.linspace(0, n, tiles + 1).round().astype(int)


def ahe(v: Volume, p: AheParams | None = None) -> Volume:
    """Per-slice tiled histogram equalization with clipping and bilinear
    blending between tile mappings; output in [0, 1]. Constant tiles map
    through unchanged."""
    p = p or AheParams()
    data = v.data.astype(np.float64)
    lo, hi = float(data.min()), float(data.max())
    norm = np.zeros_like(data) if hi == lo else (data - lo) / (hi - lo)

    nx, ny, nz = v.shape
    tx, ty = p.tile_grid
    tx, ty = min(tx, nx), min(ty, ny)
    ex, ey = _tile_edges(nx, tx), _tile_edges(ny, ty)
    cx = (ex[:-1] + ex[1:] - 1) / 2.0  # tile centers
    cy = (ey[:-1] + ey[1:] - 1) / 2.0
    nbins = p.bins
    out = np.empty_like(norm)

    # interpolation coordinates are slice-independent
    ix0 = np.clip(np.searchsorted(cx, np.arange(nx), side="right") - 1, 0, tx - 1)
    ix1 = np.minimum(ix0 + 1, tx - 1)
    iy0 = np.clip(np.searchsorted(cy, np.arange(ny), side="right") - 1, 0, ty - 1)
    iy1 = np.minimum(iy0 + 1, ty - 1)
    with np.errstate(divide="ignore", invalid="ignore"):
        wx = np.where(ix1 > ix0, (np.arange(nx) - cx[ix0]) / (cx[ix1] - cx[ix0]), 0.0)
        wy = np.where(iy1 > iy0, (np.arange(ny) - cy[iy0]) / (cy[iy1] - cy[iy0]), 0.0)
    wx = np.clip(wx, 0.0, 1.0)[:, None]
    wy = np.clip(wy, 0.0, 1.0)[None, :]

    for k in range(nz):
        sl = norm[:, :, k]
        bins = np.minimum((sl * nbins).astype(np.int64), nbins - 1)
        maps = np.empty((tx, ty, nbins))
        identity = np.zeros((tx, ty), dtype=bool)
        for a in range(tx):
            for b in range(ty):
                tile = sl[ex[a] : ex[a + 1], ey[b] : ey[b + 1]]
                if tile.max() == tile.min():
                    identity[a, b] = True
                    continue
                hist = np.bincount(
                    np.minimum((tile * nbins).astype(np.int64).ravel(), nbins - 1),
                    minlength=nbins,
                ).astype(np.float64)
                if p.clip_limit > 0:
                    limit = p.clip_limit * tile.size
                    excess = np.maximum(hist - limit, 0.0).sum()
                    hist = np.minimum(hist, limit) + excess / nbins
                maps[a, b] = np.cumsum(hist) / hist.sum()

        def lookup(ax, ay):
            mapped = maps[ax[:, None], ay[None, :], bins]
            ident = identity[ax[:, None], ay[None, :]]
            return np.where(ident, sl, mapped)

        v00, v01 = lookup(ix0, iy0), lookup(ix0, iy1)
        v10, v11 = lookup(ix1, iy0), lookup(ix1, iy1)
        out[:, :, k] = (1 - wx) * ((1 - wy) * v00 + wy * v01) + wx * ((1 - wy) * v10 + wy * v11)

    return Volume(np.clip(out, 0.0, 1.0).astype(np.float32), v.spacing)


def centroid(mask: np.ndarray) -> tuple[float, ...]:
    """Arithmetic mean of foreground voxel indices."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise EmptyMaskError("centroid of empty mask")
    return tuple(float(c) for c in np.argwhere(mask).mean(axis=0))


def _inplane_matrix(theta_deg: float, scale: float, flip_x: bool) -> np.ndarray:
    """Output->input sampling matrix for rotate(theta) then scale then flip."""
    t = np.deg2rad(theta_deg)
    rot = np.array([[np.cos(t), -np.sin(t)], [np.sin(t), np.cos(t)]])
    fwd = rot * scale
    if flip_x:
        fwd = np.diag([-1.0, 1.0]) @ fwd
    return np.linalg.inv(fwd)


def augment(
    v: Volume,
    masks: list[np.ndarray],
    params: AugmentParams | None = None,
    rng: Rng | None = None,
) -> tuple[Volume, list[np.ndarray]]:
    """One shared in-plane transform: small rotation about z, isotropic
    in-plane scale, optional x-flip. Image resampled linearly, masks
    nearest-neighbor so they stay binary."""
    params = params or AugmentParams()
    rng = rng or Rng(0)
    theta = params.max_rotation_deg * (2.0 * rng.uniform() - 1.0)
    scale = rng.uniform_in(*params.scale_range)
    flip_x = "x" in params.flip_axes and bool(rng.uniform() < 0.5)

    m2 = _inplane_matrix(theta, scale, flip_x)
    matrix = np.eye(3)
    matrix[:2, :2] = m2
    center = (np.array(v.shape, dtype=np.float64) - 1.0) / 2.0
    offset = center - matrix @ center

    img = ndimage.affine_transform(v.data.astype(np.float64), matrix, offset=offset, order=1, mode="nearest")
    out_masks = [
        ndimage.affine_transform(np.asarray(m, dtype=np.float64), matrix, offset=offset, order=0, mode="constant") > 0.5
        for m in masks
    ]
    return Volume(img.astype(np.float32), v.spacing), out_masks


def balance_slices(slices: list[tuple], keep_prob_unlabeled: float, rng: Rng) -> list[tuple]:
    """Every labeled slice survives; unlabeled slices survive independently
    with probability keep_prob_unlabeled."""
    if not 0.0 <= keep_prob_unlabeled <= 1.0:
        raise ValueError("keep_prob_unlabeled must lie in [0, 1]")
    kept = []
    for item in slices:
        has_label = item[2]
        if has_label or rng.uniform() < keep_prob_unlabeled:
            kept.append(item)
    return kept
