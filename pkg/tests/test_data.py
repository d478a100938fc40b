import hashlib

import numpy as np
import pytest
from scipy import ndimage

from sfgnet import data
from sfgnet.data import (BatchLoader, DatasetFormatError, augment, expected_class_fraction, face_radius,
                         from_bytes, gen_faces_like, gen_scans_like, scan_remap, to_bytes)


def test_face_latent_boundaries():
    assert face_radius(0.0, 32, 32) == 4.0
    assert face_radius(1.0, 32, 32) == 12.0
    ds = gen_faces_like(50, seed=1)
    assert ds.target_reg.min() >= 0.0 and ds.target_reg.max() <= 1.0


def test_face_ellipse_grows_with_latent():
    sizes = []
    for a in (0.0, 0.5, 1.0):
        # same stream for each latent, so only the radius changes
        img = data._render_face(np.random.default_rng(3), 32, 32, a, 1)
        background = np.median(img[:, 0, :])
        sizes.append(int((np.abs(img[0] - background) > 0.12).sum()))
    assert sizes[0] < sizes[1] < sizes[2]


def test_generation_is_deterministic_and_prefix_stable():
    a = gen_faces_like(20, seed=7)
    b = gen_faces_like(20, seed=7)
    assert to_bytes(a) == to_bytes(b)
    prefix = gen_faces_like(5, seed=7)
    np.testing.assert_array_equal(prefix.images, a.images[:5])
    assert to_bytes(gen_faces_like(20, seed=8)) != to_bytes(a)
    s1, s2 = gen_scans_like(6, seed=3), gen_scans_like(6, seed=3)
    assert to_bytes(s1) == to_bytes(s2)


def test_face_class_balance():
    ds = gen_faces_like(10_000, seed=11)
    assert abs(ds.target_cls.mean() - 0.5) <= 0.015


def test_faces_shapes_and_types():
    ds = gen_faces_like(4, 24, 20, seed=0)
    assert ds.images.shape == (4, 3, 24, 20)
    assert ds.target_cls.dtype == np.int32
    assert ds.num_classes == 2 and not ds.dense
    with pytest.raises(ValueError):
        gen_faces_like(0)


def test_scans_always_contain_both_classes():
    ds = gen_scans_like(300, seed=2)
    for lab in ds.target_cls:
        assert {1, 2} <= set(np.unique(lab))
    assert ds.images.shape == (300, 1, 32, 32)
    assert ds.target_reg.shape == (300, 1, 32, 32)


def test_scan_regions_have_constant_targets():
    v = np.full((4, 4), 0.37)
    for lab in (0, 1, 2):
        out = scan_remap(lab, v)
        assert np.all(out == out.flat[0])
    ds = gen_scans_like(20, seed=4)
    for lab, tgt in zip(ds.target_cls, ds.target_reg[:, 0]):
        comps, n = ndimage.label(lab > 0)
        assert n == 3
        for c in range(1, n + 1):
            vals = tgt[comps == c]
            assert np.all(vals == vals[0])


def test_scan_class_frequencies_match_expectation():
    ds = gen_scans_like(10_000, seed=5)
    freq = np.bincount(ds.target_cls.ravel(), minlength=3) / ds.target_cls.size
    for c, expected in expected_class_fraction(32, 32).items():
        assert abs(freq[c] - expected) <= 0.02 * expected, (c, freq[c], expected)


def test_expected_fraction_value():
    assert expected_class_fraction()[1] == pytest.approx(1.5 * 21 * np.pi / 1024, rel=1e-12)


def test_save_load_save_is_byte_identical(tmp_path):
    for ds in (gen_faces_like(5, seed=1), gen_scans_like(3, seed=1)):
        path = data.save(ds, tmp_path / f"{ds.kind}.sfgd")
        first = path.read_bytes()
        again = data.load(path)
        data.save(again, path)
        assert path.read_bytes() == first
        np.testing.assert_array_equal(again.images, ds.images)
        np.testing.assert_array_equal(again.target_cls, ds.target_cls)
        assert again.seed == ds.seed and again.kind == ds.kind


def test_corrupt_files_are_rejected(tmp_path):
    raw = to_bytes(gen_faces_like(2, 8, 8, seed=0))
    with pytest.raises(DatasetFormatError, match="magic"):
        from_bytes(b"XXXX" + raw[4:])
    with pytest.raises(DatasetFormatError, match="truncated"):
        from_bytes(raw[:-3])
    with pytest.raises(DatasetFormatError, match="trailing"):
        from_bytes(raw + b"\0")
    bad_version = bytearray(raw)
    bad_version[8] = 99
    with pytest.raises(DatasetFormatError, match="version"):
        from_bytes(bytes(bad_version))
    with pytest.raises(FileNotFoundError, match="nope.sfgd"):
        data.load(tmp_path / "nope.sfgd")


def _order_hash(loader, n_batches):
    h = hashlib.sha256()
    it = loader.indices()
    for _ in range(n_batches):
        h.update(np.asarray(next(it), dtype=np.int64).tobytes())
    return h.hexdigest()


def test_loader_order_is_seeded_and_reproducible():
    ds = gen_faces_like(40, 8, 8, seed=0)
    a, b, c = BatchLoader(ds, 8, 3), BatchLoader(ds, 8, 3), BatchLoader(ds, 8, 4)
    assert _order_hash(a, 12) == _order_hash(b, 12)
    assert _order_hash(a, 12) != _order_hash(c, 12)
    it = a.indices()
    epoch = np.concatenate([next(it) for _ in range(a.batches_per_epoch)])
    assert sorted(epoch) == list(range(40))
    batch = next(iter(a))
    assert len(batch) == 8
    with pytest.raises(ValueError):
        BatchLoader(ds, 41, 0)


def test_augment_identity_and_label_safety():
    ds = gen_scans_like(3, seed=6)
    rng = np.random.default_rng(0)
    img, lab, reg = augment(ds.images, rng, ds.target_cls, ds.target_reg, max_scale=0.0, max_rotation_deg=0.0)
    np.testing.assert_allclose(img, ds.images, atol=1e-12)
    np.testing.assert_array_equal(lab, ds.target_cls)
    img, lab, reg = augment(ds.images, rng, ds.target_cls, ds.target_reg)
    assert set(np.unique(lab)) <= {0, 1, 2}
    assert img.shape == ds.images.shape and reg.shape == ds.target_reg.shape
    assert not np.allclose(img, ds.images)
