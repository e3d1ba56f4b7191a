"""Evaluation metrics: Dice overlap, symmetric average surface distance,
goodness-of-fit, and paired two-sided t-tests for the ablation harness."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree
from scipy.special import betainc

from .volcore import Spacing, StructureId, StructureSet


class MetricError(Exception):
    pass


def dsc(a: np.ndarray, b: np.ndarray) -> float:
    """2|a&b| / (|a|+|b|); two empty masks agree perfectly (1.0)."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise MetricError(f"grid mismatch {a.shape} vs {b.shape}")
    sa, sb = int(a.sum()), int(b.sum())
    if sa + sb == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / (sa + sb)


def surface_voxels(mask: np.ndarray) -> np.ndarray:
    """Indices of foreground voxels with a background 6-neighbor
    (out-of-grid counts as background). Works for 2D (4-connectivity) too."""
    mask = np.asarray(mask, dtype=bool)
    interior = np.ones_like(mask)
    for axis in range(mask.ndim):
        lo = np.roll(mask, 1, axis=axis)
        hi = np.roll(mask, -1, axis=axis)
        idx_lo = [slice(None)] * mask.ndim
        idx_lo[axis] = 0
        idx_hi = [slice(None)] * mask.ndim
        idx_hi[axis] = -1
        lo[tuple(idx_lo)] = False
        hi[tuple(idx_hi)] = False
        interior &= lo & hi
    return np.argwhere(mask & ~interior)


def asd(a: np.ndarray, b: np.ndarray, spacing: Spacing) -> float:
    """Symmetric mean surface distance in mm between voxel centers."""
    sa = surface_voxels(a)
    sb = surface_voxels(b)
    if len(sa) == 0 or len(sb) == 0:
        raise MetricError("average surface distance needs two nonempty masks")
    w = np.array(spacing.as_tuple()[: sa.shape[1]])
    pa = sa * w
    pb = sb * w
    d_ab, _ = cKDTree(pb).query(pa, k=1)
    d_ba, _ = cKDTree(pa).query(pb, k=1)
    return float((d_ab.sum() + d_ba.sum()) / (len(pa) + len(pb)))


def r_squared(x, y) -> float:
    """Coefficient of determination of the least-squares line of y on x;
    constant y maps to 0 by convention."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1 or len(x) < 3:
        raise MetricError("r_squared needs two equal-length 1D arrays, n >= 3")
    ss_tot = np.sum((y - y.mean()) ** 2)
    if ss_tot == 0:
        return 0.0
    sxx = np.sum((x - x.mean()) ** 2)
    if sxx == 0:
        return 0.0
    slope = np.sum((x - x.mean()) * (y - y.mean())) / sxx
    resid = y - (y.mean() + slope * (x - x.mean()))
    return float(1.0 - np.sum(resid**2) / ss_tot)


def pearson_r(x, y) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    xc, yc = x - x.mean(), y - y.mean()
    denom = math.sqrt(float(np.sum(xc**2) * np.sum(yc**2)))
    if denom == 0:
        return 0.0
    return float(np.sum(xc * yc) / denom)


def paired_t_test(a, b) -> tuple[float, float]:
    """Two-sided paired t on the differences; p from the regularized
    incomplete beta. Identical inputs return (0, 1)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1 or len(a) < 2:
        raise MetricError("paired t-test needs two equal-length samples, n >= 2")
    d = a - b
    n = len(d)
    mean = d.mean()
    sd = d.std(ddof=1)
    if sd == 0:
        if mean == 0:
            return 0.0, 1.0
        return math.copysign(math.inf, mean), 0.0
    t = mean / (sd / math.sqrt(n))
    df = n - 1
    p = float(betainc(df / 2.0, 0.5, df / (df + t * t)))
    return float(t), p


@dataclass
class EvalRow:
    case_id: str
    structure: str
    variant: str
    dsc: float | None
    asd_mm: float | None
    quality: float | None


def evaluate_case(
    pred: StructureSet,
    truth: StructureSet,
    quality: dict[StructureId, float] | None = None,
    case_id: str = "",
    variant: str = "",
) -> list[EvalRow]:
    """One row per structure present in either set; a missing or empty side
    yields a row with missing metrics rather than a silent drop."""
    if tuple(pred.shape) != tuple(truth.shape):
        raise MetricError(f"grid mismatch {pred.shape} vs {truth.shape}")
    quality = quality or {}
    rows = []
    for sid in StructureId:
        if sid not in pred.masks and sid not in truth.masks:
            continue
        q = quality.get(sid)
        if sid not in pred.masks or sid not in truth.masks:
            rows.append(EvalRow(case_id, sid.value, variant, None, None, q))
            continue
        pm, tm = pred.mask(sid), truth.mask(sid)
        d = dsc(pm, tm)
        try:
            a = asd(pm, tm, pred.spacing)
        except MetricError:
            a = None
        rows.append(EvalRow(case_id, sid.value, variant, d, a, q))
    return rows


CSV_HEADER = ["case", "structure", "variant", "dsc", "asd_mm", "quality"]


def write_eval_csv(rows: list[EvalRow], path: str | Path):
    def fmt(v):
        return "" if v is None else f"{v:.6f}"

    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_HEADER)
        for r in rows:
            writer.writerow([r.case_id, r.structure, r.variant, fmt(r.dsc), fmt(r.asd_mm), fmt(r.quality)])


def read_eval_csv(path: str | Path) -> list[EvalRow]:
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        for rec in reader:
            rows.append(
                EvalRow(
                    rec["case"],
                    rec["structure"],
                    rec["variant"],
                    float(rec["dsc"]) if rec["dsc"] else None,
                    float(rec["asd_mm"]) if rec["asd_mm"] else None,
                    float(rec["quality"]) if rec["quality"] else None,
                )
            )
    return rows


def summarize_rows(rows: list[EvalRow]) -> dict[str, dict[str, float]]:
    """Per-structure mean and sd of each metric, mirroring the usual
    mean +/- sd reporting."""
    out: dict[str, dict[str, float]] = {}
    for structure in sorted({r.structure for r in rows}):
        sel = [r for r in rows if r.structure == structure]
        entry = {}
        for key in ("dsc", "asd_mm", "quality"):
            vals = [getattr(r, key) for r in sel if getattr(r, key) is not None]
            if vals:
                entry[f"{key}_mean"] = float(np.mean(vals))
                entry[f"{key}_sd"] = float(np.std(vals))
                entry[f"{key}_n"] = len(vals)
        out[structure] = entry
    return out
