"""Core grid types, the MIVOL1 bit-exact volume format, and VOI crop/paste.

Volumes are (nx, ny, nz) float32 grids with anisotropic mm spacing. On disk
the payload is little-endian float32 in x-fastest order behind a one-line
UTF-8 JSON header, so round-trips are bit-identical across languages.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np
from scipy import ndimage


class VolumeError(Exception):
    """Malformed volume data or file."""


@dataclass(frozen=True)
class Spacing:
    """Millimeters per voxel along x, y, z."""

    dx: float = 1.17
    dy: float = 1.17
    dz: float = 3.0

    def __post_init__(self):
        if not (self.dx > 0 and self.dy > 0 and self.dz > 0):
            raise VolumeError(f"spacing must be strictly positive, got {self}")

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.dx, self.dy, self.dz)

    def diag_mm(self, size: tuple[int, int, int]) -> float:
        """Physical diagonal of a box of `size` voxels."""
        return float(np.sqrt((size[0] * self.dx) ** 2 + (size[1] * self.dy) ** 2 + (size[2] * self.dz) ** 2))


class Volume:
    """3D scalar grid: CT-like intensities, distance maps, or probabilities."""

    def __init__(self, data: np.ndarray, spacing: Spacing):
        data = np.ascontiguousarray(data, dtype=np.float32)
        if data.ndim != 3 or min(data.shape) < 1:
            raise VolumeError(f"volume needs a positive 3D shape, got {data.shape}")
        if not np.all(np.isfinite(data)):
            raise VolumeError("volume contains NaN/Inf")
        self.data = data
        self.spacing = spacing

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    def copy(self) -> "Volume":
        return Volume(self.data.copy(), self.spacing)

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, Volume)
            and self.shape == other.shape
            and self.spacing == other.spacing
            and np.array_equal(self.data, other.data)
        )


class StructureId(str, Enum):
    CTV = "ctv"
    Bladder = "bladder"
    Rectum = "rectum"
    FemoralHeadL = "femoral_head_l"
    FemoralHeadR = "femoral_head_r"
    PenileBulb = "penile_bulb"


# the 2D localizer merges both femoral heads into one channel
LOCALIZER_CHANNELS = [
    StructureId.CTV,
    StructureId.Bladder,
    StructureId.Rectum,
    "femoral_heads",
    StructureId.PenileBulb,
]

OARS = [s for s in StructureId if s is not StructureId.CTV]


@dataclass
class StructureSet:
    """Per-structure binary masks over a shared grid."""

    shape: tuple[int, int, int]
    spacing: Spacing
    masks: dict[StructureId, np.ndarray] = field(default_factory=dict)

    def set_mask(self, sid: StructureId, mask: np.ndarray):
        mask = np.asarray(mask)
        if mask.shape != tuple(self.shape):
            raise VolumeError(f"mask shape {mask.shape} != grid {self.shape}")
        self.masks[sid] = mask.astype(bool)

    def mask(self, sid: StructureId) -> np.ndarray:
        return self.masks[sid]

    def save(self, directory: str | Path):
        """One MIVOL per structure plus a manifest listing id -> filename."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        manifest = {}
        for sid, mask in self.masks.items():
            fname = f"{sid.value}.mivol"
            write_mivol(Volume(mask.astype(np.float32), self.spacing), directory / fname)
            manifest[sid.value] = fname
        (directory / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))

    @classmethod
    def load(cls, directory: str | Path) -> "StructureSet":
        directory = Path(directory)
        manifest = json.loads((directory / "manifest.json").read_text())
        ss = None
        for name, fname in sorted(manifest.items()):
            vol = read_mivol(directory / fname)
            if ss is None:
                ss = cls(vol.shape, vol.spacing)
            ss.set_mask(StructureId(name), vol.data > 0.5)
        if ss is None:
            raise VolumeError(f"empty structure manifest in {directory}")
        return ss


@dataclass(frozen=True)
class Voi:
    """Axis-aligned integer box: origin index triple + positive size triple."""

    origin: tuple[int, int, int]
    size: tuple[int, int, int]

    def __post_init__(self):
        if min(self.size) < 1:
            raise VolumeError(f"zero-size VOI {self.size}")


def write_mivol(v: Volume, path: str | Path):
    header = {
        "magic": "MIVOL1",
        "shape": list(v.shape),
        "spacing_mm": list(v.spacing.as_tuple()),
        "dtype": "f32le",
    }
    with open(path, "wb") as fh:
        fh.write((json.dumps(header) + "\n").encode("utf-8"))
        fh.write(v.data.astype("<f4").tobytes(order="F"))


def read_mivol(path: str | Path) -> Volume:
    with open(path, "rb") as fh:
        line = fh.readline()
        try:
            header = json.loads(line.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise VolumeError(f"malformed MIVOL header in {path}: {exc}") from exc
        if not isinstance(header, dict) or header.get("magic") != "MIVOL1":
            raise VolumeError(f"bad magic in {path}")
        if header.get("dtype") != "f32le":
            raise VolumeError(f"unsupported dtype {header.get('dtype')!r} in {path}")
        try:
            nx, ny, nz = (int(s) for s in header["shape"])
            dx, dy, dz = (float(s) for s in header["spacing_mm"])
        except (KeyError, TypeError, ValueError) as exc:
            raise VolumeError(f"malformed MIVOL header fields in {path}") from exc
        payload = fh.read()
    expected = nx * ny * nz * 4
    if len(payload) != expected:
        raise VolumeError(f"payload length {len(payload)} != expected {expected} in {path}")
    data = np.frombuffer(payload, dtype="<f4").reshape((nx, ny, nz), order="F")
    return Volume(data, Spacing(dx, dy, dz))


def clamp_voi(voi: Voi, shape: tuple[int, int, int]) -> Voi:
    """Shift a border-touching VOI inward so it fits; extents cap at the grid."""
    origin, size = [], []
    for o, s, n in zip(voi.origin, voi.size, shape):
        s_eff = min(s, n)
        o_eff = min(max(o, 0), n - s_eff)
        origin.append(int(o_eff))
        size.append(int(s_eff))
    return Voi(tuple(origin), tuple(size))


def crop(v: Volume, voi: Voi) -> Volume:
    """Crop `voi.size` voxels; border VOIs shift inward, undersized grids pad
    with the volume minimum so the output always has the requested size."""
    eff = clamp_voi(voi, v.shape)
    sl = tuple(slice(o, o + s) for o, s in zip(eff.origin, eff.size))
    region = v.data[sl]
    if eff.size != voi.size:
        out = np.full(voi.size, float(v.data.min()), dtype=np.float32)
        out[: eff.size[0], : eff.size[1], : eff.size[2]] = region
        return Volume(out, v.spacing)
    return Volume(region.copy(), v.spacing)


def paste(dst: Volume, src: Volume, origin: tuple[int, int, int]) -> Volume:
    """Return dst with the region at `origin` replaced by src; pure."""
    for o, s, n in zip(origin, src.shape, dst.shape):
        if o < 0 or o + s > n:
            raise VolumeError(f"paste overflows dst bounds: origin={origin} src={src.shape} dst={dst.shape}")
    out = dst.data.copy()
    sl = tuple(slice(o, o + s) for o, s in zip(origin, src.shape))
    out[sl] = src.data
    return Volume(out, dst.spacing)


_CONN6 = ndimage.generate_binary_structure(3, 1)


def split_bilateral(mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Split a <=2-component mask into (left, right) by centroid x; a lone
    component lands on whichever half of the grid holds its centroid."""
    mask = np.asarray(mask, dtype=bool)
    labels, n = ndimage.label(mask, structure=_CONN6)
    empty = np.zeros_like(mask)
    if n == 0:
        return empty, empty.copy()
    if n > 2:
        raise VolumeError(f"expected <=2 connected components, found {n}")
    centroids = ndimage.center_of_mass(mask, labels, index=list(range(1, n + 1)))
    if n == 1:
        comp = labels == 1
        if centroids[0][0] < mask.shape[0] / 2.0:
            return comp, empty
        return empty, comp
    order = np.argsort([c[0] for c in centroids])
    left = labels == (order[0] + 1)
    right = labels == (order[1] + 1)
    return left, right
