import struct
import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from cmseg.data import (AugmentParams, BadMagicError, TruncatedPayloadError, VersionMismatchError, Volume,
                        apply_augment, augment, crop_corner, normalize_intensity, random_crop, read_volume,
                        resample_isotropic, write_volume)


def test_roundtrip_bit_exact(tmp_path, rng):
    vol = Volume(rng.random((5, 6, 7)).astype(np.float32), (0.5, 1.0, 2.5), 1)
    labels = rng.integers(0, 8, size=(5, 6, 7)).astype(np.uint8)
    write_volume(tmp_path / "v.csg", vol, labels)
    back, lab = read_volume(tmp_path / "v.csg")
    assert back.intensities.tobytes() == vol.intensities.tobytes()
    assert back.spacing == vol.spacing and back.modality == 1
    assert np.array_equal(lab, labels)
    write_volume(tmp_path / "n.csg", vol)
    assert read_volume(tmp_path / "n.csg")[1] is None


def test_header_layout(tmp_path):
    vol = Volume(np.zeros((2, 3, 4), np.float32), (1.0, 1.0, 1.0), 0)
    write_volume(tmp_path / "v.csg", vol, np.zeros((2, 3, 4), np.uint8))
    raw = (tmp_path / "v.csg").read_bytes()
    magic, version, d, h, w = struct.unpack_from("<4sI3I", raw)
    assert (magic, version, d, h, w) == (b"CSG1", 1, 2, 3, 4)
    assert len(raw) == 4 + 4 + 12 + 12 + 4 + 1 + 24 * 4 + 24


def test_corruptions_raise_distinct_errors(tmp_path):
    vol = Volume(np.ones((3, 3, 3), np.float32))
    path = tmp_path / "v.csg"
    write_volume(path, vol, np.zeros((3, 3, 3), np.uint8))
    raw = bytearray(path.read_bytes())
    bad = tmp_path / "bad.csg"
    bad.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(BadMagicError):
        read_volume(bad)
    bad.write_bytes(raw[:4] + struct.pack("<I", 2) + raw[8:])
    with pytest.raises(VersionMismatchError):
        read_volume(bad)
    bad.write_bytes(raw[:-5])
    with pytest.raises(TruncatedPayloadError):
        read_volume(bad)
    bad.write_bytes(raw[:8] + struct.pack("<I", 4) + raw[12:])  # dims product no longer matches
    with pytest.raises(TruncatedPayloadError):
        read_volume(bad)


def test_normalize_intensity():
    out = normalize_intensity(Volume(np.array([10.0, 20.0, 15.0]).reshape(1, 1, 3)))
    np.testing.assert_array_equal(out.intensities.ravel(), [0.0, 1.0, 0.5])
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        flat = normalize_intensity(Volume(np.full((2, 2, 2), 3.0)))
    assert np.all(flat.intensities == 0) and caught


def test_resample_identity_and_ramp(rng):
    vol = Volume(rng.random((4, 4, 4)).astype(np.float32), (1.0, 1.0, 1.0))
    labels = rng.integers(0, 3, (4, 4, 4))
    same, lab = resample_isotropic(vol, labels, 1.0)
    assert same.intensities.tobytes() == vol.intensities.tobytes() and np.array_equal(lab, labels)
    # 2x downsample of a linear ramp samples it at the new voxel centres
    ramp = np.broadcast_to(np.arange(8.0)[:, None, None], (8, 2, 2)).astype(np.float32)
    down, _ = resample_isotropic(Volume(ramp, (1.0, 1.0, 1.0)), None, 2.0)
    assert down.dims == (4, 1, 1)
    np.testing.assert_allclose(down.intensities[:, 0, 0], [0.5, 2.5, 4.5, 6.5], rtol=1e-6)
    assert down.spacing == (2.0, 2.0, 2.0)


def test_resample_labels_nearest(rng):
    labels = rng.integers(0, 5, (6, 6, 3))
    vol = Volume(rng.random((6, 6, 3)), (1.0, 1.0, 2.0))
    out, lab = resample_isotropic(vol, labels, 1.0)
    assert out.dims == lab.shape == (6, 6, 6)
    assert set(np.unique(lab)) <= set(np.unique(labels))


def test_augment_identity_and_involution(rng):
    x = rng.random((4, 5, 6)).astype(np.float32)
    y = rng.integers(0, 3, (4, 5, 6))
    same, lab = apply_augment(x, y, AugmentParams())
    assert np.array_equal(same, x) and np.array_equal(lab, y)
    p = AugmentParams(1.0, 0.0, (True, False, True))
    once = apply_augment(x, y, p)
    twice = apply_augment(*once, p)
    assert np.array_equal(twice[0], x) and np.array_equal(twice[1], y)
    assert np.array_equal(np.bincount(once[1].ravel()), np.bincount(y.ravel()))


@given(st.integers(0, 2**32 - 1))
def test_augment_ranges(seed):
    r = np.random.default_rng(seed)
    x = r.random((3, 3, 3)).astype(np.float32)
    vol, lab = augment(Volume(x), np.zeros((3, 3, 3), int), r)
    assert vol.intensities.min() >= 0 and vol.intensities.max() <= 1


def test_crop_whole_and_alignment(rng):
    vol = Volume(rng.random((6, 7, 8)))
    labels = rng.integers(0, 4, (6, 7, 8))
    whole, lab = random_crop(vol, labels, (6, 7, 8), rng)
    assert np.array_equal(whole.intensities, vol.intensities) and np.array_equal(lab, labels)
    # crop of the (image, labels) pair equals cropping each with the same corner
    r1, r2 = np.random.default_rng(9), np.random.default_rng(9)
    c, cl = random_crop(vol, labels, 3, r1)
    z, y, x = crop_corner(vol.dims, (3, 3, 3), r2)
    assert np.array_equal(c.intensities, vol.intensities[z:z + 3, y:y + 3, x:x + 3])
    assert np.array_equal(cl, labels[z:z + 3, y:y + 3, x:x + 3])
    with pytest.raises(ValueError):
        random_crop(vol, labels, 9, rng)


def test_crop_corner_uniform():
    r = np.random.default_rng(2024)
    draws = np.array([crop_corner((8, 8, 8), (5, 5, 5), r) for _ in range(10_000)])
    flat = draws[:, 0] * 16 + draws[:, 1] * 4 + draws[:, 2]
    counts = np.bincount(flat, minlength=64)
    assert stats.chisquare(counts).pvalue > 0.01
