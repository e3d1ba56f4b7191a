import json

import numpy as np
import pytest

from conftest import random_volume
from pelvicseg.rng import Rng
from pelvicseg.volcore import (
    Spacing,
    StructureId,
    StructureSet,
    Voi,
    Volume,
    VolumeError,
    clamp_voi,
    crop,
    paste,
    read_mivol,
    split_bilateral,
    write_mivol,
)


class TestSpacing:
    def test_positive_required(self):
        with pytest.raises(VolumeError):
            Spacing(0.0, 1.0, 1.0)
        with pytest.raises(VolumeError):
            Spacing(1.0, -2.0, 1.0)

    def test_default_matches_scanner_voxel(self):
        assert Spacing().as_tuple() == (1.17, 1.17, 3.0)


class TestMivol:
    def test_zeros_roundtrip_and_payload_size(self, tmp_path):
        v = Volume(np.zeros((2, 2, 2), np.float32), Spacing())
        path = tmp_path / "v.mivol"
        write_mivol(v, path)
        raw = path.read_bytes()
        header, payload = raw.split(b"\n", 1)
        assert len(payload) == 32
        doc = json.loads(header)
        assert doc["magic"] == "MIVOL1" and doc["dtype"] == "f32le"
        assert read_mivol(path) == v

    def test_spacing_serialized_exactly(self, tmp_path):
        v = Volume(np.zeros((1, 1, 1), np.float32), Spacing(1.17, 1.17, 3.0))
        path = tmp_path / "v.mivol"
        write_mivol(v, path)
        header = json.loads(path.read_bytes().split(b"\n", 1)[0])
        assert header["spacing_mm"] == [1.17, 1.17, 3.0]
        assert read_mivol(path).spacing == Spacing(1.17, 1.17, 3.0)

    def test_fuzz_roundtrip_bit_exact(self, tmp_path):
        for seed in range(20):
            v = random_volume(seed)
            path = tmp_path / f"{seed}.mivol"
            write_mivol(v, path)
            w = read_mivol(path)
            assert np.array_equal(v.data, w.data) and v.spacing == w.spacing

    def test_payload_is_x_fastest(self, tmp_path):
        data = np.arange(8, dtype=np.float32).reshape((2, 2, 2))
        path = tmp_path / "v.mivol"
        write_mivol(Volume(data, Spacing()), path)
        payload = path.read_bytes().split(b"\n", 1)[1]
        vals = np.frombuffer(payload, dtype="<f4")
        # x varies fastest: element order (0,0,0),(1,0,0),(0,1,0),(1,1,0),...
        assert vals[0] == data[0, 0, 0] and vals[1] == data[1, 0, 0] and vals[2] == data[0, 1, 0]

    def test_malformed_inputs(self, tmp_path):
        good = tmp_path / "good.mivol"
        write_mivol(random_volume(0, (3, 3, 3)), good)
        raw = good.read_bytes()
        bad_header = tmp_path / "bad1.mivol"
        bad_header.write_bytes(b"not json\n" + raw.split(b"\n", 1)[1])
        with pytest.raises(VolumeError):
            read_mivol(bad_header)
        truncated = tmp_path / "bad2.mivol"
        truncated.write_bytes(raw[:-4])
        with pytest.raises(VolumeError):
            read_mivol(truncated)
        header = json.loads(raw.split(b"\n", 1)[0])
        header["dtype"] = "f64le"
        bad_dtype = tmp_path / "bad3.mivol"
        bad_dtype.write_bytes(json.dumps(header).encode() + b"\n" + raw.split(b"\n", 1)[1])
        with pytest.raises(VolumeError):
            read_mivol(bad_dtype)

    def test_nonfinite_rejected(self):
        data = np.zeros((2, 2, 2), np.float32)
        data[0, 0, 0] = np.nan
        with pytest.raises(VolumeError):
            Volume(data, Spacing())


class TestCropPaste:
    def test_crop_full_extent_identity(self):
        v = random_volume(1, (8, 8, 8))
        assert crop(v, Voi((0, 0, 0), (8, 8, 8))) == v

    def test_crop_then_paste_restores(self):
        v = random_volume(2, (10, 10, 10))
        voi = Voi((2, 3, 4), (5, 4, 3))
        region = crop(v, voi)
        assert paste(v, region, voi.origin) == v

    def test_border_voi_shifted_inward_exhaustive(self):
        # brute-force bounds oracle on a small grid
        shape = (10, 9, 8)
        v = random_volume(3, shape)
        size = (4, 4, 4)
        for ox in range(-3, 12):
            for oy in range(-3, 11):
                voi = clamp_voi(Voi((ox, oy, 2), size), shape)
                assert all(o >= 0 for o in voi.origin)
                assert all(o + s <= n for o, s, n in zip(voi.origin, voi.size, shape))
                assert voi.size == size
                out = crop(v, Voi((ox, oy, 2), size))
                assert out.shape == size

    def test_pad_with_minimum_when_volume_smaller(self):
        v = random_volume(4, (4, 4, 4))
        out = crop(v, Voi((0, 0, 0), (6, 6, 6)))
        assert out.shape == (6, 6, 6)
        assert np.array_equal(out.data[:4, :4, :4], v.data)
        assert np.all(out.data[4:] == v.data.min())

    def test_zero_size_rejected(self):
        with pytest.raises(VolumeError):
            Voi((0, 0, 0), (0, 4, 4))

    def test_paste_corner_cube(self):
        dst = Volume(np.zeros((6, 6, 6), np.float32), Spacing())
        src = Volume(np.ones((2, 2, 2), np.float32), Spacing())
        out = paste(dst, src, (0, 0, 0))
        assert out.data[:2, :2, :2].sum() == 8 and out.data.sum() == 8

    def test_paste_overflow_rejected(self):
        dst = Volume(np.zeros((4, 4, 4), np.float32), Spacing())
        src = Volume(np.ones((3, 3, 3), np.float32), Spacing())
        with pytest.raises(VolumeError):
            paste(dst, src, (2, 0, 0))

    def test_paste_change_arithmetic_fuzz(self):
        for seed in range(10):
            r = Rng(seed)
            dst = random_volume(seed + 100, (9, 9, 9))
            src = random_volume(seed + 200, (3, 4, 2))
            origin = (r.integers(0, 7), r.integers(0, 6), r.integers(0, 8))
            out = paste(dst, src, origin)
            sl = tuple(slice(o, o + s) for o, s in zip(origin, src.shape))
            expected = float(src.data.sum() - dst.data[sl].sum())
            change = float(out.data.sum() - dst.data.sum())
            assert abs(change - expected) < 1e-3


def _sphere_mask(shape, center, radius):
    idx = np.indices(shape)
    return ((idx[0] - center[0]) ** 2 + (idx[1] - center[1]) ** 2 + (idx[2] - center[2]) ** 2) <= radius**2


def _flood_components(mask):
    """Independent 6-connectivity labeling for the oracle."""
    mask = mask.copy()
    comps = []
    while mask.any():
        seed = tuple(np.argwhere(mask)[0])
        comp = np.zeros_like(mask)
        stack = [seed]
        comp[seed] = True
        mask[seed] = False
        while stack:
            x, y, z = stack.pop()
            for dx, dy, dz in ((1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)):
                n = (x + dx, y + dy, z + dz)
                if all(0 <= c < s for c, s in zip(n, mask.shape)) and mask[n]:
                    mask[n] = False
                    comp[n] = True
                    stack.append(n)
        comps.append(comp)
    return comps


class TestSplitBilateral:
    def test_two_spheres(self):
        m = _sphere_mask((64, 24, 24), (10, 12, 12), 4) | _sphere_mask((64, 24, 24), (50, 12, 12), 4)
        left, right = split_bilateral(m)
        assert left[10, 12, 12] and right[50, 12, 12]
        assert not (left & right).any()
        assert np.array_equal(left | right, m)

    def test_empty(self):
        left, right = split_bilateral(np.zeros((8, 8, 8), bool))
        assert not left.any() and not right.any()

    def test_single_component_assigned_by_half(self):
        m = _sphere_mask((40, 16, 16), (5, 8, 8), 3)
        left, right = split_bilateral(m)
        assert left.any() and not right.any()
        m = _sphere_mask((40, 16, 16), (35, 8, 8), 3)
        left, right = split_bilateral(m)
        assert right.any() and not left.any()

    def test_three_components_rejected(self):
        m = np.zeros((20, 8, 8), bool)
        m[1, 1, 1] = m[10, 4, 4] = m[18, 6, 6] = True
        with pytest.raises(VolumeError):
            split_bilateral(m)

    def test_random_pairs_match_flood_fill_oracle(self):
        for seed in range(15):
            r = Rng(seed)
            shape = (32, 16, 16)
            m = np.zeros(shape, bool)
            c1 = (r.integers(3, 12), r.integers(3, 13), r.integers(3, 13))
            c2 = (r.integers(20, 29), r.integers(3, 13), r.integers(3, 13))
            m |= _sphere_mask(shape, c1, 2)
            m |= _sphere_mask(shape, c2, 2)
            left, right = split_bilateral(m)
            comps = _flood_components(m)
            comps.sort(key=lambda c: np.argwhere(c)[:, 0].mean())
            assert np.array_equal(left, comps[0])
            assert np.array_equal(right, comps[-1])
            assert np.array_equal(left | right, m)
            assert not (left & right).any()


class TestStructureSet:
    def test_save_load_roundtrip(self, tmp_path):
        ss = StructureSet((6, 6, 6), Spacing())
        r = Rng(0)
        for sid in StructureId:
            ss.set_mask(sid, r.uniform((6, 6, 6)) < 0.3)
        ss.save(tmp_path / "truth")
        back = StructureSet.load(tmp_path / "truth")
        assert set(back.masks) == set(ss.masks)
        for sid in StructureId:
            assert np.array_equal(back.mask(sid), ss.mask(sid))

    def test_mask_grid_enforced(self):
        ss = StructureSet((4, 4, 4), Spacing())
        with pytest.raises(VolumeError):
            ss.set_mask(StructureId.Bladder, np.zeros((3, 4, 4), bool))
