import numpy as np
import pytest

from cmseg.data import Manifest, read_volume
from cmseg.phantom import (APPEARANCE_A, APPEARANCE_B, Appearance, PhantomSpec, generate_dataset,
                           generate_phantom, render_regions, sample_geometry)


def test_deterministic_pair():
    spec = PhantomSpec(dims=(24, 24, 24))
    a = generate_phantom(11, spec, 1)
    b = generate_phantom(11, spec, 1)
    assert np.array_equal(a[0].intensities, b[0].intensities)
    assert np.array_equal(a[1], b[1])
    c = generate_phantom(12, spec, 1)
    assert not np.array_equal(a[1], c[1])  # independent poses


def test_noiseless_rendering_is_piecewise_constant():
    means = tuple(np.linspace(0.05, 0.95, 9))
    flat = Appearance(means=means, noise_std=0.0, bias_amplitude=0.0)
    spec = PhantomSpec(dims=(24, 24, 24), appearances=(flat, flat))
    vol, labels = generate_phantom(5, spec, 0)
    geom = sample_geometry(np.random.default_rng([5, 0]), spec)
    regions, lab2 = render_regions(geom, spec.dims)
    assert np.array_equal(labels, lab2)
    np.testing.assert_array_equal(vol.intensities, np.asarray(means, np.float32)[regions])


def test_class_volumes_match_analytic_ellipsoids():
    spec = PhantomSpec(dims=(64, 64, 64))
    for seed in range(6):
        geom = sample_geometry(np.random.default_rng([seed, 0]), spec)
        _, labels = render_regions(geom, spec.dims)
        counts = np.bincount(labels.ravel(), minlength=spec.num_classes)
        vols = {e.label: geom.voxel_volume(e, spec.dims) for e in geom.structures}
        vols[1] -= vols[3]  # the myocardium is a shell around the left ventricle
        for c in range(1, spec.num_classes):
            assert abs(counts[c] - vols[c]) / vols[c] < 0.05, (seed, c)


def test_modality_gap():
    spec = PhantomSpec()
    assert spec.separation() >= spec.min_separation
    assert APPEARANCE_A.means != APPEARANCE_B.means
    va, la = generate_phantom(2, PhantomSpec(dims=(32, 32, 32)), 0)
    vb, lb = generate_phantom(2, PhantomSpec(dims=(32, 32, 32)), 1)
    gap = max(abs(va.intensities[la == c].mean() - vb.intensities[lb == c].mean()) for c in range(1, 8))
    assert gap >= spec.min_separation


def test_spec_validation():
    with pytest.raises(ValueError):
        PhantomSpec(num_structures=9)
    with pytest.raises(ValueError):
        PhantomSpec(dims=(2, 16, 16))
    with pytest.raises(ValueError):
        PhantomSpec(appearances=(Appearance(means=(0.0, 1.0)),))


def test_dataset_split_determinism(tmp_path):
    counts = {"train": (2, 1), "val": (1, 1), "test": (1, 1)}
    spec = PhantomSpec(dims=(16, 16, 16))
    m1 = generate_dataset(tmp_path / "a", 4, spec, counts)
    m2 = generate_dataset(tmp_path / "b", 4, spec, counts)
    assert (tmp_path / "a" / "manifest.txt").read_text() == (tmp_path / "b" / "manifest.txt").read_text()
    for e in m1.entries:
        assert (tmp_path / "a" / e.path).read_bytes() == (tmp_path / "b" / e.path).read_bytes()
    loaded = Manifest.load(tmp_path / "a" / "manifest.txt")
    assert loaded.entries == m1.entries
    assert [len(loaded.select("train", m)) for m in (0, 1)] == [2, 1]
    assert m2.meta["num_classes"] == "8"


def test_generated_volumes_are_normalized(tiny_dataset):
    for e in tiny_dataset.entries:
        vol, labels = read_volume(tiny_dataset.resolve(e))
        x = vol.intensities
        assert np.all(np.isfinite(x)) and x.min() >= 0.0 and x.max() <= 1.0
        assert labels.shape == vol.dims and labels.max() < 8
        assert vol.modality == e.modality
