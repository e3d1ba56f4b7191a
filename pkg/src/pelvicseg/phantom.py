"""Deterministic synthetic pelvic phantom: CT-like volumes plus ground truth.

Five visible organs are placed analytically (ellipsoids, spheres, a curved
tube); the target volume has no intensity signature of its own and is a pure
function of the neighboring-organ geometry, so anatomy guidance is causally
necessary to segment it. Same spec -> bit-identical output.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .rng import Rng
from .volcore import Spacing, StructureId, StructureSet, Volume


class PhantomError(Exception):
    """Requested geometry cannot be realized on the grid."""


# synthetic HU-like scale, 0..1000
INTENSITY = {
    "air": 0.0,
    "tissue": 500.0,
    "bladder": 300.0,
    "rectum_wall": 680.0,
    "rectum_lumen": 80.0,
    "bone": 880.0,
    "bulb": 390.0,
}


@dataclass(frozen=True)
class OrganRanges:
    """Sampling ranges in mm; defaults keep organs disjoint and inside the
    default 96x96x48 grid (proved by the pairwise-gap inequalities in
    generate's feasibility check)."""

    bladder_semi_x: tuple[float, float] = (13.0, 17.0)
    bladder_semi_y: tuple[float, float] = (12.0, 16.0)
    bladder_semi_z: tuple[float, float] = (15.0, 24.0)
    bladder_dx: float = 3.0
    bladder_dy: tuple[float, float] = (14.0, 20.0)  # anterior of grid center
    bladder_dz: tuple[float, float] = (9.0, 18.0)  # superior of grid center
    rectum_radius: tuple[float, float] = (7.0, 10.0)
    rectum_dy: tuple[float, float] = (14.0, 20.0)  # posterior of grid center
    rectum_dx: float = 3.0
    rectum_curve_amp: tuple[float, float] = (2.0, 6.0)
    rectum_curve_period: tuple[float, float] = (80.0, 140.0)
    rectum_lumen_frac: float = 0.45
    femoral_offset: tuple[float, float] = (34.0, 40.0)
    femoral_radius: tuple[float, float] = (9.0, 12.0)
    femoral_dy: float = 4.0
    femoral_dz: float = 6.0
    bulb_semi_x: tuple[float, float] = (7.0, 10.0)
    bulb_semi_y: tuple[float, float] = (5.0, 7.0)
    bulb_semi_z: tuple[float, float] = (6.0, 9.0)
    bulb_dx: float = 3.0
    bulb_dy: tuple[float, float] = (2.0, 8.0)
    bulb_z: tuple[float, float] = (21.0, 33.0)
    ctv_lateral_frac: float = 0.45


@dataclass(frozen=True)
class PhantomSpec:
    seed: int
    shape: tuple[int, int, int] = (96, 96, 48)
    spacing: Spacing = field(default_factory=Spacing)
    ranges: OrganRanges = field(default_factory=OrganRanges)
    noise_sigma: float = 20.0
    style_jitter: float = 0.0  # mm of CTV superior/inferior extent jitter
    style_seed: int = 0

    def with_style(self, style_seed: int) -> "PhantomSpec":
        return replace(self, style_seed=style_seed)


@dataclass
class PhantomCase:
    case_id: str
    ct: Volume
    truth: StructureSet
    meta: dict


def _coords_mm(shape, spacing):
    xs = np.arange(shape[0], dtype=np.float64) * spacing.dx
    ys = np.arange(shape[1], dtype=np.float64) * spacing.dy
    zs = np.arange(shape[2], dtype=np.float64) * spacing.dz
    return xs[:, None, None], ys[None, :, None], zs[None, None, :]


def _ellipsoid(x, y, z, p) -> np.ndarray:
    return (
        ((x - p["cx"]) / p["ax"]) ** 2 + ((y - p["cy"]) / p["ay"]) ** 2 + ((z - p["cz"]) / p["az"]) ** 2
    ) <= 1.0


def _sphere(x, y, z, p) -> np.ndarray:
    return (x - p["cx"]) ** 2 + (y - p["cy"]) ** 2 + (z - p["cz"]) ** 2 <= p["r"] ** 2


def _rectum_center_x(z, p) -> np.ndarray:
    return p["x0"] + p["amp"] * np.sin(2.0 * np.pi * (z - p["z_lo"]) / p["period"] + p["phase"])


def _rectum_tube(x, y, z, p) -> np.ndarray:
    rx = _rectum_center_x(z, p)
    in_z = (z >= p["z_lo"]) & (z <= p["z_hi"])
    return in_z & ((x - rx) ** 2 + (y - p["y0"]) ** 2 <= p["r"] ** 2)


def _sample_params(spec: PhantomSpec) -> dict:
    """Draw all analytic organ parameters in a fixed order."""
    g = Rng(spec.seed).derive("geometry")
    r = spec.ranges
    nx, ny, nz = spec.shape
    sp = spec.spacing
    cx = (nx - 1) / 2.0 * sp.dx
    cy = (ny - 1) / 2.0 * sp.dy
    cz = (nz - 1) / 2.0 * sp.dz
    zmax = (nz - 1) * sp.dz

    bladder = {
        "cx": cx + g.uniform_in(-r.bladder_dx, r.bladder_dx),
        "cy": cy - g.uniform_in(*r.bladder_dy),
        "cz": cz + g.uniform_in(*r.bladder_dz),
        "ax": g.uniform_in(*r.bladder_semi_x),
        "ay": g.uniform_in(*r.bladder_semi_y),
        "az": g.uniform_in(*r.bladder_semi_z),
    }
    rectum = {
        "x0": cx + g.uniform_in(-r.rectum_dx, r.rectum_dx),
        "y0": cy + g.uniform_in(*r.rectum_dy),
        "r": g.uniform_in(*r.rectum_radius),
        "amp": g.uniform_in(*r.rectum_curve_amp),
        "period": g.uniform_in(*r.rectum_curve_period),
        "phase": g.uniform_in(0.0, 2.0 * np.pi),
        "z_lo": 45.0,
        "z_hi": zmax - sp.dz,
        "lumen_frac": r.rectum_lumen_frac,
    }
    fem_common = {
        "cy": cy + g.uniform_in(-r.femoral_dy, r.femoral_dy),
        "cz": cz + g.uniform_in(-r.femoral_dz, r.femoral_dz),
    }
    femoral_l = {
        "cx": cx - g.uniform_in(*r.femoral_offset),
        "r": g.uniform_in(*r.femoral_radius),
        **fem_common,
    }
    femoral_r = {
        "cx": cx + g.uniform_in(*r.femoral_offset),
        "r": g.uniform_in(*r.femoral_radius),
        **fem_common,
    }
    bulb = {
        "cx": cx + g.uniform_in(-r.bulb_dx, r.bulb_dx),
        "cy": cy + g.uniform_in(*r.bulb_dy),
        "cz": g.uniform_in(*r.bulb_z),
        "ax": g.uniform_in(*r.bulb_semi_x),
        "ay": g.uniform_in(*r.bulb_semi_y),
        "az": g.uniform_in(*r.bulb_semi_z),
    }

    style = Rng(spec.seed).derive("style", spec.style_seed)
    j = spec.style_jitter
    ctv = {
        "jit_inf": style.uniform_in(-j, j),
        "jit_sup": style.uniform_in(-j, j),
        "lat_frac": r.ctv_lateral_frac,
    }
    ctv["z0"] = bulb["cz"] + bulb["az"] + ctv["jit_inf"]
    ctv["z1"] = bladder["cz"] + ctv["jit_sup"]

    return {
        "bladder": bladder,
        "rectum": rectum,
        "femoral_l": femoral_l,
        "femoral_r": femoral_r,
        "bulb": bulb,
        "ctv": ctv,
        "body": {"cx": cx, "cy": cy, "ax": 50.0, "ay": 45.0},
    }


def ctv_mask_from_params(params: dict, shape, spacing: Spacing) -> np.ndarray:
    """Target region between the bladder posterior wall and the rectum
    anterior wall: a deterministic function of the stored organ geometry."""
    x, y, z = _coords_mm(shape, spacing)
    b, rec, fl, fr, pb, c = (
        params["bladder"],
        params["rectum"],
        params["femoral_l"],
        params["femoral_r"],
        params["bulb"],
        params["ctv"],
    )
    # posterior bladder wall per slice; anterior rectum wall
    rel = 1.0 - ((z - b["cz"]) / b["az"]) ** 2
    y0 = b["cy"] + b["ay"] * np.sqrt(np.maximum(rel, 0.0))
    y1 = rec["y0"] - rec["r"]
    mid = 0.5 * (fl["cx"] + fr["cx"])
    half = c["lat_frac"] * (fr["cx"] - fl["cx"]) / 2.0
    band = (
        (z >= c["z0"])
        & (z <= c["z1"])
        & (np.abs(x - mid) <= half)
        & (y >= y0)
        & (y <= y1)
    )
    inside_organ = (
        _ellipsoid(x, y, z, b)
        | _rectum_tube(x, y, z, rec)
        | _sphere(x, y, z, fl)
        | _sphere(x, y, z, fr)
        | _ellipsoid(x, y, z, pb)
    )
    return band & ~inside_organ


def generate(spec: PhantomSpec) -> PhantomCase:
    """Render one phantom case; pure function of the spec."""
    params = _sample_params(spec)
    shape, sp = spec.shape, spec.spacing
    x, y, z = _coords_mm(shape, sp)

    b = params["bladder"]
    rec = params["rectum"]
    masks = {
        StructureId.Bladder: _ellipsoid(x, y, z, b),
        StructureId.Rectum: _rectum_tube(x, y, z, rec),
        StructureId.FemoralHeadL: _sphere(x, y, z, params["femoral_l"]),
        StructureId.FemoralHeadR: _sphere(x, y, z, params["femoral_r"]),
        StructureId.PenileBulb: _ellipsoid(x, y, z, params["bulb"]),
    }
    masks[StructureId.CTV] = ctv_mask_from_params(params, shape, sp)

    overlap = np.zeros(shape, dtype=np.int8)
    for m in masks.values():
        overlap += m
    if overlap.max() > 1:
        raise PhantomError("organ/target masks overlap; geometry ranges infeasible")
    for sid, m in masks.items():
        if not m.any():
            raise PhantomError(f"{sid.value} mask empty; geometry ranges infeasible")
        if sid is not StructureId.Rectum and (
            m[0].any() or m[-1].any() or m[:, 0].any() or m[:, -1].any() or m[:, :, 0].any() or m[:, :, -1].any()
        ):
            raise PhantomError(f"{sid.value} touches the grid boundary")

    body = params["body"]
    in_body = ((x - body["cx"]) / body["ax"]) ** 2 + ((y - body["cy"]) / body["ay"]) ** 2 <= 1.0
    ct = np.where(in_body, INTENSITY["tissue"], INTENSITY["air"])
    ct = np.where(masks[StructureId.Bladder], INTENSITY["bladder"], ct)
    rx = _rectum_center_x(z, rec)
    lumen = masks[StructureId.Rectum] & (
        (x - rx) ** 2 + (y - rec["y0"]) ** 2 <= (rec["lumen_frac"] * rec["r"]) ** 2
    )
    ct = np.where(masks[StructureId.Rectum], INTENSITY["rectum_wall"], ct)
    ct = np.where(lumen, INTENSITY["rectum_lumen"], ct)
    ct = np.where(masks[StructureId.FemoralHeadL] | masks[StructureId.FemoralHeadR], INTENSITY["bone"], ct)
    ct = np.where(masks[StructureId.PenileBulb], INTENSITY["bulb"], ct)
    # the target region itself is rendered as plain tissue: no intensity cue

    noise = Rng(spec.seed).derive("noise").normal(shape, std=spec.noise_sigma)
    ct = (ct + noise).astype(np.float32)

    truth = StructureSet(shape, sp)
    for sid, m in masks.items():
        truth.set_mask(sid, m)

    meta = {
        "seed": int(spec.seed),
        "style_seed": int(spec.style_seed),
        "noise_sigma": float(spec.noise_sigma),
        "shape": list(shape),
        "spacing_mm": list(sp.as_tuple()),
        "params": params,
    }
    return PhantomCase(f"case_{spec.seed & 0xFFFFFFFF:08x}", Volume(ct, sp), truth, meta)


def case_seed(base_seed: int, split: str, index: int) -> int:
    return Rng(base_seed).derive("split", split, index).key


def generate_dataset(
    base_seed: int,
    n_train: int,
    n_val: int,
    n_test: int,
    spec_template: PhantomSpec | None = None,
) -> tuple[list[PhantomCase], list[PhantomCase], list[PhantomCase]]:
    """Three deterministic splits; per-case seeds never repeat across splits."""
    if min(n_train, n_val, n_test) < 1:
        raise PhantomError("each split needs at least one case")
    template = spec_template or PhantomSpec(seed=0)
    splits = []
    for name, count in (("train", n_train), ("val", n_val), ("test", n_test)):
        cases = []
        for i in range(count):
            spec = replace(template, seed=case_seed(base_seed, name, i))
            case = generate(spec)
            case.case_id = f"{name}_{i:03d}"
            cases.append(case)
        splits.append(cases)
    return tuple(splits)
