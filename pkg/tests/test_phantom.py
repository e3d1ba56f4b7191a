import math

import numpy as np
import pytest
from scipy import ndimage

from pelvicseg.phantom import (
    OrganRanges,
    PhantomError,
    PhantomSpec,
    case_seed,
    generate,
    generate_dataset,
)
from pelvicseg.volcore import StructureId


def rederive_ctv(meta: dict) -> np.ndarray:
    """Independent slice-by-slice recomputation of the target rule from the
    stored organ parameters (oracle; deliberately loop-based)."""
    p = meta["params"]
    b, rec, fl, fr, pb, c = (p[k] for k in ("bladder", "rectum", "femoral_l", "femoral_r", "bulb", "ctv"))
    nx, ny, nz = meta["shape"]
    dx, dy, dz = meta["spacing_mm"]
    out = np.zeros((nx, ny, nz), bool)
    mid = (fl["cx"] + fr["cx"]) / 2.0
    half = c["lat_frac"] * (fr["cx"] - fl["cx"]) / 2.0
    for k in range(nz):
        z = k * dz
        if z < c["z0"] or z > c["z1"]:
            continue
        rel = 1.0 - ((z - b["cz"]) / b["az"]) ** 2
        y_front = b["cy"] + b["ay"] * math.sqrt(max(rel, 0.0))
        y_back = rec["y0"] - rec["r"]
        rx = rec["x0"] + rec["amp"] * math.sin(2 * math.pi * (z - rec["z_lo"]) / rec["period"] + rec["phase"])
        for i in range(nx):
            x = i * dx
            if abs(x - mid) > half:
                continue
            for j in range(ny):
                y = j * dy
                if not (y_front <= y <= y_back):
                    continue
                if ((x - b["cx"]) / b["ax"]) ** 2 + ((y - b["cy"]) / b["ay"]) ** 2 + ((z - b["cz"]) / b["az"]) ** 2 <= 1:
                    continue
                if rec["z_lo"] <= z <= rec["z_hi"] and (x - rx) ** 2 + (y - rec["y0"]) ** 2 <= rec["r"] ** 2:
                    continue
                if (x - fl["cx"]) ** 2 + (y - fl["cy"]) ** 2 + (z - fl["cz"]) ** 2 <= fl["r"] ** 2:
                    continue
                if (x - fr["cx"]) ** 2 + (y - fr["cy"]) ** 2 + (z - fr["cz"]) ** 2 <= fr["r"] ** 2:
                    continue
                if ((x - pb["cx"]) / pb["ax"]) ** 2 + ((y - pb["cy"]) / pb["ay"]) ** 2 + ((z - pb["cz"]) / pb["az"]) ** 2 <= 1:
                    continue
                out[i, j, k] = True
    return out


def test_same_seed_bit_identical():
    a = generate(PhantomSpec(seed=11))
    b = generate(PhantomSpec(seed=11))
    assert np.array_equal(a.ct.data, b.ct.data)
    for sid in StructureId:
        assert np.array_equal(a.truth.mask(sid), b.truth.mask(sid))


def test_ctv_rule_recomputation_oracle():
    for seed in (0, 5):
        case = generate(PhantomSpec(seed=seed))
        oracle = rederive_ctv(case.meta)
        assert np.array_equal(case.truth.mask(StructureId.CTV), oracle)


def test_different_seeds_differ_but_follow_rule():
    a = generate(PhantomSpec(seed=1, style_jitter=0.0))
    b = generate(PhantomSpec(seed=2, style_jitter=0.0))
    assert not np.array_equal(a.truth.mask(StructureId.CTV), b.truth.mask(StructureId.CTV))
    assert np.array_equal(a.truth.mask(StructureId.CTV), rederive_ctv(a.meta))
    assert np.array_equal(b.truth.mask(StructureId.CTV), rederive_ctv(b.meta))


def test_target_is_invisible():
    # |mean(ct over target) - mean(ct over surrounding tissue)| < 0.1 sigma
    for seed in range(50):
        case = generate(PhantomSpec(seed=seed))
        sigma = case.meta["noise_sigma"]
        ctv = case.truth.mask(StructureId.CTV)
        organ_any = np.zeros_like(ctv)
        for m in case.truth.masks.values():
            organ_any |= m
        shell = ndimage.binary_dilation(ctv, iterations=3) & ~organ_any & ~ctv
        diff = case.ct.data[ctv].mean() - case.ct.data[shell].mean()
        assert abs(diff) < 0.1 * sigma, f"seed {seed}: visible target, diff {diff:.3f}"


def test_masks_disjoint_and_nonempty():
    for seed in range(10):
        case = generate(PhantomSpec(seed=seed))
        total = np.zeros(case.ct.shape, np.int8)
        for sid in StructureId:
            m = case.truth.mask(sid)
            assert m.any(), f"{sid} empty at seed {seed}"
            total += m
        assert total.max() == 1


def test_style_jitter_changes_only_target_extent():
    a = generate(PhantomSpec(seed=9, style_jitter=6.0, style_seed=0))
    b = generate(PhantomSpec(seed=9, style_jitter=6.0, style_seed=1))
    assert np.array_equal(a.ct.data, b.ct.data)
    for sid in StructureId:
        if sid is StructureId.CTV:
            continue
        assert np.array_equal(a.truth.mask(sid), b.truth.mask(sid))
    ca, cb = a.truth.mask(StructureId.CTV), b.truth.mask(StructureId.CTV)
    assert not np.array_equal(ca, cb)
    diff_slices = np.where((ca ^ cb).any(axis=(0, 1)))[0]
    za = np.where(ca.any(axis=(0, 1)))[0]
    zb = np.where(cb.any(axis=(0, 1)))[0]
    shared = set(range(max(za.min(), zb.min()), min(za.max(), zb.max()) + 1))
    assert not (set(diff_slices.tolist()) & shared), "styles differ inside the shared z-range"


def test_zero_jitter_draws_no_extent_shift():
    a = generate(PhantomSpec(seed=4, style_jitter=0.0, style_seed=0))
    b = generate(PhantomSpec(seed=4, style_jitter=0.0, style_seed=3))
    assert np.array_equal(a.truth.mask(StructureId.CTV), b.truth.mask(StructureId.CTV))


def test_generate_dataset_reproducible_and_distinct():
    t1, v1, s1 = generate_dataset(0, 2, 1, 1)
    t2, v2, s2 = generate_dataset(0, 2, 1, 1)
    assert len(t1) == 2 and len(v1) == 1 and len(s1) == 1
    for a, b in zip(t1 + v1 + s1, t2 + v2 + s2):
        assert np.array_equal(a.ct.data, b.ct.data)
    seeds = [c.meta["seed"] for c in t1 + v1 + s1]
    assert len(set(seeds)) == 4


def test_clinical_split_ratio_expressible_without_collisions():
    # 255/35/50 from the source cohort: check seed derivation, not full rendering
    seeds = [case_seed(0, "train", i) for i in range(255)]
    seeds += [case_seed(0, "val", i) for i in range(35)]
    seeds += [case_seed(0, "test", i) for i in range(50)]
    assert len(set(seeds)) == 340


def test_seed_collision_scan_1000():
    seeds = {case_seed(123, "train", i) for i in range(1000)}
    assert len(seeds) == 1000


def test_infeasible_geometry_rejected():
    ranges = OrganRanges(bladder_semi_x=(60.0, 60.0), bladder_semi_y=(60.0, 60.0), bladder_semi_z=(60.0, 60.0))
    with pytest.raises(PhantomError):
        generate(PhantomSpec(seed=0, ranges=ranges))


def test_split_counts_validated():
    with pytest.raises(PhantomError):
        generate_dataset(0, 0, 1, 1)
