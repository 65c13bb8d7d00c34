import os

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lucidcam.data import (AugmentConfig, DataGenConfig, Sample, augment, class_plan, filter_outliers, flip_h,
                           generate_dataset, load_dataset_dir, load_image_dir, reflect_crop, rotate90, save_dataset,
                           stratified_split)
from lucidcam.errors import ArgumentError, DataError
from lucidcam.render import write_png_array
from lucidcam.rng import SplitMix64


def test_class_counts_rounding():
    kinds = class_plan(DataGenConfig(10, pos_frac=0.4, bright_outlier_frac=0, dark_outlier_frac=0))
    assert kinds.count("positive") == 4 and kinds.count("negative") == 6
    data = generate_dataset(DataGenConfig(10, size=24, pos_frac=0.4, bright_outlier_frac=0, dark_outlier_frac=0))
    assert sum(s.label for s in data) == 4


def test_generation_deterministic():
    cfg = DataGenConfig(12, size=32, seed=9)
    a, b = generate_dataset(cfg), generate_dataset(cfg)
    assert all(x.image.tobytes() == y.image.tobytes() and x.mask.tobytes() == y.mask.tobytes() for x, y in zip(a, b))
    c = generate_dataset(DataGenConfig(12, size=32, seed=10))
    assert any(x.image.tobytes() != y.image.tobytes() for x, y in zip(a, c))


def test_parallel_generation_matches_serial():
    cfg = DataGenConfig(8, size=24, seed=1)
    serial = generate_dataset(cfg)
    threaded = generate_dataset(cfg, workers=3)
    assert [s.image.tobytes() for s in serial] == [s.image.tobytes() for s in threaded]


def test_outliers_are_negative_and_planted(small_corpus):
    for s in small_corpus:
        assert s.image.shape == (3, 32, 32) and s.image.dtype == np.float32
        assert 0.0 <= s.image.min() and s.image.max() <= 1.0
        if s.kind in ("bright", "dark"):
            assert s.label == 0 and not s.mask.any()


def test_label_matches_mask(small_corpus):
    for s in small_corpus:
        assert s.label == int(s.mask.any())
        if s.label:
            c = s.mask.shape[0] // 3
            assert s.mask[c:2 * c, c:2 * c].any()


def test_default_corpus_outliers():
    data = generate_dataset(DataGenConfig(300, size=32, seed=42))
    kept, removed = filter_outliers(data)
    planted = {s.id for s in data if s.kind in ("bright", "dark")}
    assert {i for i, _ in removed} == planted and len(planted) == 6
    assert len(kept) == 294


def test_filter_examples():
    white = Sample(np.ones((3, 4, 4), np.float32), 0, id="w")
    gray = Sample(np.full((3, 4, 4), 0.5, np.float32), 0, id="g")
    kept, removed = filter_outliers([white, gray])
    assert [s.id for s in kept] == ["g"] and removed == [("w", 1.0)]
    with pytest.raises(ArgumentError):
        filter_outliers([gray], 0.9, 0.1)


def test_augment_disabled_is_identity(small_corpus):
    s = small_corpus[0]
    out = augment(s, SplitMix64(1), AugmentConfig.disabled())
    assert out.image.tobytes() == s.image.tobytes() and out.mask.tobytes() == s.mask.tobytes()


def test_flip_involution_and_rotation_inverse(small_corpus):
    img = small_corpus[1].image
    assert np.array_equal(flip_h(flip_h(img)), img)
    assert np.array_equal(rotate90(rotate90(img, 1), 3), img)
    assert not np.array_equal(rotate90(img, 1), img)


def test_reflect_crop_centre_is_identity(small_corpus):
    img = small_corpus[2].image
    assert np.array_equal(reflect_crop(img, 8, 8, 8), img)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 32))
def test_augment_keeps_mask_aligned_and_range(seed):
    base = np.zeros((3, 16, 16), np.float32)
    base[:, 2:5, 3:9] = 0.8
    mask = (base[0] > 0).astype(np.float32)
    out = augment(Sample(base, 1, mask, "x"), SplitMix64(seed), AugmentConfig(blur=0.0, lighting=0.0))
    assert out.image.shape == base.shape and out.mask.shape == mask.shape
    assert np.array_equal(out.image[0] > 0, out.mask > 0)
    full = augment(Sample(base, 1, mask, "x"), SplitMix64(seed))
    assert 0.0 <= full.image.min() and full.image.max() <= 1.0


def _labelled(n_neg, n_pos):
    z = np.zeros((3, 2, 2), np.float32)
    return [Sample(z, int(i >= n_neg), id=f"s{i:03d}") for i in range(n_neg + n_pos)]


def test_stratified_split_ratio():
    data = _labelled(60, 40)
    tr, va = stratified_split(data, 0.2, 3)
    assert abs(len(va) - 20) <= 1
    assert abs(sum(s.label for s in va) / len(va) - 0.4) <= 1 / len(va)
    ids_tr, ids_va = {s.id for s in tr}, {s.id for s in va}
    assert not ids_tr & ids_va and ids_tr | ids_va == {s.id for s in data}
    tr2, va2 = stratified_split(data, 0.2, 3)
    assert [s.id for s in va] == [s.id for s in va2]


def test_stratified_split_errors():
    with pytest.raises(ArgumentError):
        stratified_split(_labelled(5, 5), 1.0, 0)
    with pytest.raises(DataError):
        stratified_split(_labelled(5, 0), 0.2, 0)


def test_round_trip_through_disk(tmp_path, small_corpus):
    subset = small_corpus[:6]
    save_dataset(subset, str(tmp_path), {"note": 1})
    back = load_dataset_dir(str(tmp_path))
    assert [s.id for s in back] == [s.id for s in subset]
    assert [s.label for s in back] == [s.label for s in subset]
    for a, b in zip(subset, back):
        assert np.max(np.abs(a.image - b.image)) <= 0.5 / 255 + 1e-6
        assert np.array_equal(a.mask > 0.5, b.mask > 0.5)


def test_load_image_dir_examples(tmp_path):
    img = tmp_path / "img"
    img.mkdir()
    write_png_array(np.full((4, 4, 3), 255, np.uint8), str(img / "a.png"))
    write_png_array(np.zeros((4, 4, 3), np.uint8), str(img / "b.png"))
    csv = tmp_path / "labels.csv"
    csv.write_text("filename,label\na.png,1\nb.png,0\n")
    data = load_image_dir(str(img), str(csv))
    assert [s.label for s in data] == [1, 0]
    assert data[0].image.max() == 1.0 and data[0].image.min() == 1.0
    csv.write_text("filename,label\na.png,1\nmissing.png,0\n")
    with pytest.raises(DataError, match="missing.png"):
        load_image_dir(str(img), str(csv))
    csv.write_text("filename,label\na.png,2\n")
    with pytest.raises(DataError):
        load_image_dir(str(img), str(csv))
    with pytest.raises(DataError):
        load_dataset_dir(str(tmp_path / "nowhere"))


def test_config_validation():
    with pytest.raises(ArgumentError):
        generate_dataset(DataGenConfig(0))
    with pytest.raises(ArgumentError):
        generate_dataset(DataGenConfig(10, pos_frac=0.9, bright_outlier_frac=0.2))
