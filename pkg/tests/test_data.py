import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from PIL import Image

from retina_eit.data import (
    AugmentConfig,
    Dataset,
    SplitManifest,
    adjust_brightness,
    adjust_contrast,
    augment,
    center_crop,
    clahe,
    clahe_subset,
    count_lesion_pixels,
    ingest,
    lesion_count_range,
    load_dataset,
    resize,
    rotate,
    save_dataset,
    stratified_split,
    synth_generate,
)
from retina_eit.errors import ConfigError, ValidationError


class _Scripted:
    """rng stand-in replaying fixed draws."""

    def __init__(self, randoms, uniforms=()):
        self._r, self._u = list(randoms), list(uniforms)

    def random(self):
        return self._r.pop(0)

    def uniform(self, lo, hi):
        return self._u.pop(0)


def toy_dataset(per_class, seed=0):
    rng = np.random.default_rng(seed)
    n = 5 * per_class
    ids = [f"s{i:04d}" for i in range(n)]
    labels = np.repeat(np.arange(5), per_class)
    return Dataset(ids, rng.integers(0, 256, (n, 4, 4, 3)).astype(np.uint8), labels)


def test_split_counts_for_100_per_class():
    split = stratified_split(toy_dataset(100), seed=0)
    ds = toy_dataset(100)
    for part, expected in ((split.train, 63), (split.val, 7), (split.test, 30)):
        np.testing.assert_array_equal(ds.subset(part).class_counts(), [expected] * 5)


@given(st.integers(0, 2**31 - 1))
def test_split_invariants_any_seed(seed):
    ds = toy_dataset(23)
    s = stratified_split(ds, seed)
    parts = [set(s.train), set(s.val), set(s.test)]
    assert not (parts[0] & parts[1] or parts[0] & parts[2] or parts[1] & parts[2])
    assert len(parts[0] | parts[1] | parts[2]) == len(ds)
    for c in range(5):
        n_train = sum(1 for i in s.train + s.val if ds.labels[ds.ids.index(i)] == c)
        n_test = sum(1 for i in s.test if ds.labels[ds.ids.index(i)] == c)
        assert abs(n_train * 3 - n_test * 7) <= 10  # 7:3 within one sample


def test_split_determinism_and_seed_dependence():
    ds = toy_dataset(30)
    assert stratified_split(ds, 5) == stratified_split(ds, 5)
    other = stratified_split(ds, 6)
    assert other.test != stratified_split(ds, 5).test
    assert len(other.test) == len(stratified_split(ds, 5).test)


def test_split_rejects_tiny_class():
    ds = toy_dataset(9)
    with pytest.raises(ConfigError):
        stratified_split(ds, 0)


def test_split_manifest_json_round_trip(tmp_path):
    s = stratified_split(toy_dataset(20), 3)
    s.save(tmp_path / "s.json")
    assert SplitManifest.load(tmp_path / "s.json") == s


def test_augment_no_ops_returns_input():
    img = np.random.default_rng(0).integers(0, 256, (16, 16, 3)).astype(np.uint8)
    out = augment(img, _Scripted([0.9] * 6))
    np.testing.assert_array_equal(out, img)


def test_augment_flip_only():
    img = np.arange(16 * 16 * 3, dtype=np.uint8).reshape(16, 16, 3)
    out = augment(img, _Scripted([0.9, 0.1, 0.9, 0.9, 0.9, 0.9]))
    np.testing.assert_array_equal(out, img[:, ::-1])


def test_augment_ops_filter_keeps_shape(rng):
    img = rng.integers(0, 256, (16, 16, 3)).astype(np.uint8)
    cfg = AugmentConfig(p=1.0, ops=("hflip",))
    np.testing.assert_array_equal(augment(img, rng, cfg), img[:, ::-1])
    with pytest.raises(ConfigError):
        AugmentConfig(ops=("shear",))


@given(st.integers(0, 10_000))
def test_augment_preserves_shape_and_range(seed):
    rng = np.random.default_rng(seed)
    img = rng.integers(0, 256, (12, 12, 3)).astype(np.uint8)
    out = augment(img, rng, AugmentConfig(p=0.5))
    assert out.shape == img.shape and out.dtype == np.uint8


def test_rotation_zero_is_identity(rng):
    img = rng.integers(0, 256, (20, 20, 3)).astype(np.uint8)
    assert np.abs(rotate(img, 0.0).astype(int) - img).max() <= 1


def test_rotation_90_ccw_on_square():
    img = np.zeros((5, 5, 3), np.uint8)
    img[0, 4] = 255  # top-right corner moves to top-left under a CCW quarter turn
    out = rotate(img, 90.0)
    assert out[0, 0, 0] == 255 and out[0, 4, 0] == 0


def test_brightness_inverse_pair_on_mid_gray():
    img = np.full((4, 4, 3), 128, np.uint8)
    np.testing.assert_array_equal(adjust_brightness(adjust_brightness(img, 0.2), -0.2), img)
    back = adjust_brightness(adjust_brightness(img, 0.33), -0.33)
    assert np.abs(back.astype(int) - 128).max() <= 1
    assert adjust_brightness(img, 0.95).max() == 255


def test_contrast_about_channel_mean():
    img = np.array([[[100, 0, 0], [200, 0, 0]]], np.uint8)
    out = adjust_contrast(img, 0.5)
    np.testing.assert_array_equal(out[..., 0], [[125, 175]])


def test_center_crop_keeps_size():
    img = np.zeros((16, 16, 3), np.uint8)
    img[4:12, 4:12] = 200
    np.testing.assert_array_equal(center_crop(img, 0.5), np.full((16, 16, 3), 200, np.uint8))


def test_resize_constant_and_dtype():
    img = np.full((10, 7, 3), 77, np.uint8)
    out = resize(img, 5, 3)
    assert out.shape == (5, 3, 3) and out.dtype == np.uint8 and (out == 77).all()


@pytest.mark.parametrize("value", [0, 90, 255])
def test_clahe_constant_image_stays_constant(value):
    out = clahe(np.full((32, 32, 3), value, np.uint8))
    assert out.shape == (32, 32, 3)
    assert (out == out[0, 0]).all()


def test_clahe_single_tile_unclipped_is_histogram_equalisation(rng):
    gray = rng.integers(40, 120, (32, 32)).astype(np.uint8)
    img = np.repeat(gray[..., None], 3, axis=2)
    out = clahe(img, tiles=1, clip_limit=np.inf)[..., 0].astype(int)
    # direct equalisation: cdf scaled to 255
    hist = np.bincount(gray.ravel(), minlength=256)
    lut = np.floor(np.cumsum(hist) * 255.0 / gray.size + 0.5)
    assert np.abs(out - lut[gray]).max() <= 1


def test_clahe_range_and_bad_grid(rng):
    img = rng.integers(0, 256, (24, 24, 3)).astype(np.uint8)
    out = clahe(img)
    assert out.dtype == np.uint8 and out.shape == img.shape
    with pytest.raises(ConfigError):
        clahe(img, tiles=25)


def test_clahe_subset_deterministic():
    ids = [f"x{i}" for i in range(50)]
    a = clahe_subset(ids, 4)
    assert a == clahe_subset(list(reversed(ids)), 4)
    assert len(a) == 15


def test_synth_bookkeeping():
    ds = synth_generate(6, seed=2)
    np.testing.assert_array_equal(ds.class_counts(), [6] * 5)
    assert ds.images.shape == (30, 64, 64, 3)
    again = synth_generate(6, seed=2)
    np.testing.assert_array_equal(ds.images, again.images)
    assert ds.masks[ds.labels == 0].sum() == 0


def test_synth_lesion_counts_in_range():
    from retina_eit.data import _render

    for label in range(5):
        for i in range(5):
            _, _, placed = _render(label, np.random.default_rng([9, label, i]), 64)
            lo, hi = lesion_count_range(label)
            assert lo <= placed <= hi


def test_threshold_detector_separates_extreme_classes():
    ds = synth_generate(20, seed=1)
    counts = np.array([count_lesion_pixels(im) for im in ds.images])
    assert counts[ds.labels == 0].max() < counts[ds.labels == 4].min()


def _write_pngs(tmp_path, n, labels):
    (tmp_path / "img").mkdir()
    rows = ["id_code,diagnosis"]
    for i in range(n):
        Image.fromarray(np.full((20, 30, 3), i * 10, np.uint8)).save(tmp_path / "img" / f"id{i}.png")
        rows.append(f"id{i},{labels[i]}")
    (tmp_path / "m.csv").write_text("\n".join(rows) + "\n")


def test_ingest_reads_and_resizes(tmp_path):
    _write_pngs(tmp_path, 10, [i % 5 for i in range(10)])
    ds = ingest(tmp_path / "m.csv", tmp_path / "img", side=16)
    assert len(ds) == 10 and ds.images.shape == (10, 16, 16, 3)
    np.testing.assert_array_equal(ds.class_counts(), [2] * 5)


def test_ingest_rejects_bad_diagnosis_with_row(tmp_path):
    _write_pngs(tmp_path, 3, [0, 7, 1])
    with pytest.raises(ValidationError, match="row 3"):
        ingest(tmp_path / "m.csv", tmp_path / "img", side=16)


def test_ingest_names_missing_file(tmp_path):
    _write_pngs(tmp_path, 2, [0, 1])
    (tmp_path / "img" / "id1.png").unlink()
    with pytest.raises(FileNotFoundError, match="id1"):
        ingest(tmp_path / "m.csv", tmp_path / "img", side=16)


def test_dataset_save_load_round_trip(tmp_path):
    ds = synth_generate(2, seed=0)
    save_dataset(ds, tmp_path / "d")
    back = load_dataset(tmp_path / "d")
    assert back.ids == ds.ids
    np.testing.assert_array_equal(back.images, ds.images)
    np.testing.assert_array_equal(back.masks, ds.masks)
