from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from PIL import Image

from cellnca.data import (
    EXCLUDED,
    DatasetManifest,
    HarmonizationMap,
    ImageSet,
    ManifestEntry,
    assign_splits,
    class_hues,
    harmonize,
    load_image_64,
    resize_bilinear,
    scan_folder,
    stratified_split,
    synth_blobs,
    write_image_set,
)
from cellnca.errors import DataError, UnmappedLabelError

from oracles import bilinear_direct, hue_of


def _png(path, array):
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.asarray(array, np.uint8), "RGB").save(path)
    return path


# --- loading -----------------------------------------------------------------

def test_native_size_is_exact_rescale(tmp_path, rng):
    raw = rng.integers(0, 256, (64, 64, 3))
    out = load_image_64(_png(tmp_path / "a.png", raw))
    assert out.shape == (64, 64, 3) and out.dtype == np.float32
    assert np.array_equal(out, (raw / 255.0).astype(np.float32))


def test_solid_colour_survives_resampling(tmp_path):
    raw = np.zeros((400, 400, 3))
    raw[...] = (200, 0, 100)
    out = load_image_64(_png(tmp_path / "solid.png", raw))
    np.testing.assert_allclose(out, np.broadcast_to(np.float32([200 / 255, 0, 100 / 255]), out.shape), atol=1e-7)


def test_checkerboard_upsample_matches_oracle():
    board = np.array([[0, 255], [255, 0]], float)[..., None].repeat(3, axis=2)
    np.testing.assert_allclose(resize_bilinear(board, 4, 4), bilinear_direct(board, 4, 4), atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 20), st.integers(1, 20), st.integers(1, 20), st.integers(1, 20), st.integers(0, 2 ** 31))
def test_resize_matches_oracle_for_any_shape(h, w, oh, ow, seed):
    img = np.random.default_rng(seed).random((h, w, 3))
    np.testing.assert_allclose(resize_bilinear(img, oh, ow), bilinear_direct(img, oh, ow), atol=1e-12)


def test_non_square_source_is_resampled_directly(tmp_path, rng):
    out = load_image_64(_png(tmp_path / "wide.png", rng.integers(0, 256, (36, 90, 3))))
    assert out.shape == (64, 64, 3)
    assert 0 <= out.min() and out.max() <= 1


def test_corrupt_file_error_carries_path(tmp_path):
    bad = tmp_path / "broken.png"
    bad.write_bytes(b"\x89PNG not really")
    with pytest.raises(DataError) as info:
        load_image_64(bad)
    assert info.value.path == bad


def test_unsupported_format_rejected(tmp_path):
    path = tmp_path / "x.bmp"
    Image.new("RGB", (4, 4)).save(path, format="BMP")
    with pytest.raises(DataError, match="unsupported"):
        load_image_64(path)


def test_jpeg_and_tiff_accepted(tmp_path):
    for fmt, suffix in (("JPEG", ".jpg"), ("TIFF", ".tif")):
        path = tmp_path / f"img{suffix}"
        Image.new("RGB", (10, 10), (10, 20, 30)).save(path, format=fmt)
        assert load_image_64(path).shape == (64, 64, 3)


# --- harmonization -----------------------------------------------------------

def test_identity_map_lookup():
    assert harmonize("3", "d", HarmonizationMap.identity("d", range(13))) == 3


def test_unmapped_label_names_domain_and_label():
    with pytest.raises(UnmappedLabelError) as info:
        harmonize("blast", "lab", HarmonizationMap.identity("lab", range(3)))
    assert info.value.domain == "lab" and info.value.label == "blast"


def test_map_rejects_out_of_range_class():
    with pytest.raises(DataError):
        HarmonizationMap({("d", "x"): 13})


def test_map_file_round_trip(tmp_path):
    hmap = HarmonizationMap({("a", "lymph"): 4, ("a", "smudge"): EXCLUDED, ("b", "LYT"): 4})
    hmap.write(tmp_path / "map.tsv")
    again = HarmonizationMap.read(tmp_path / "map.tsv")
    assert again.table == hmap.table
    assert again.domains() == ["a", "b"]


def test_map_file_bad_line(tmp_path):
    (tmp_path / "map.tsv").write_text("a\tx\n")
    with pytest.raises(DataError, match="line 1"):
        HarmonizationMap.read(tmp_path / "map.tsv")


def test_excluded_folder_dropped_and_counted(tmp_path):
    for i in range(2):
        _png(tmp_path / "keep" / f"{i}.png", np.zeros((4, 4, 3)))
    for i in range(3):
        _png(tmp_path / "junk" / f"{i}.png", np.zeros((4, 4, 3)))
    hmap = HarmonizationMap({("d", "keep"): 0, ("d", "junk"): EXCLUDED})
    manifest = scan_folder(tmp_path, hmap, "d")
    assert len(manifest) == 2
    assert hmap.dropped[("d", "junk")] == 3


def test_fifteen_labels_push_forward_to_thirteen_classes(tmp_path):
    rng = np.random.default_rng(4)
    raw_labels = [f"L{i:02d}" for i in range(15)]
    targets = {lab: (EXCLUDED if i == 14 else i % 13) for i, lab in enumerate(raw_labels)}
    counts = {lab: int(rng.integers(1, 4)) for lab in raw_labels}
    for lab in raw_labels:
        for i in range(counts[lab]):
            _png(tmp_path / lab / f"{i}.png", np.zeros((2, 2, 3)))
    hmap = HarmonizationMap({("d", lab): t for lab, t in targets.items()})
    manifest = scan_folder(tmp_path, hmap, "d")
    expected = Counter()
    for lab, t in targets.items():
        if t != EXCLUDED:
            expected[t] += counts[lab]
    assert manifest.class_counts() == expected
    assert all(0 <= e.class_id < 13 for e in manifest)


# --- folder scanning & manifests ---------------------------------------------

def _tree(root):
    for i in range(3):
        _png(root / "a" / f"{i}.png", np.zeros((4, 4, 3)))
    for i in range(5):
        _png(root / "b" / f"{i}.png", np.zeros((4, 4, 3)))
    return HarmonizationMap({("d", "a"): 0, ("d", "b"): 1})


def test_scan_two_folders(tmp_path):
    manifest = scan_folder(tmp_path, _tree(tmp_path), "d")
    assert len(manifest) == 8
    assert [e.raw_label for e in manifest] == ["a"] * 3 + ["b"] * 5


def test_rescan_is_byte_identical(tmp_path):
    hmap = _tree(tmp_path)
    assert scan_folder(tmp_path, hmap, "d").to_text() == scan_folder(tmp_path, hmap, "d").to_text()


def test_unmapped_folder_named_in_error(tmp_path):
    hmap = _tree(tmp_path)
    _png(tmp_path / "mystery" / "0.png", np.zeros((4, 4, 3)))
    with pytest.raises(UnmappedLabelError, match="mystery"):
        scan_folder(tmp_path, hmap, "d")


def test_empty_root_rejected(tmp_path):
    with pytest.raises(DataError):
        scan_folder(tmp_path, HarmonizationMap(), "d")


def test_manifest_file_round_trip(tmp_path):
    manifest = scan_folder(tmp_path, _tree(tmp_path), "d")
    manifest.write(tmp_path / "m.tsv")
    again = DatasetManifest.read(tmp_path / "m.tsv")
    assert again.entries == manifest.entries
    data = again.load()
    assert data.images.shape == (8, 64, 64, 3) and data.labels.tolist() == [0] * 3 + [1] * 5


def test_manifest_validation():
    with pytest.raises(DataError):
        DatasetManifest([ManifestEntry("x.png", "a", 13, "d")])
    with pytest.raises(DataError):
        DatasetManifest([ManifestEntry("x.png", "a", 0, "")])
    with pytest.raises(DataError):
        DatasetManifest([ManifestEntry("x.png", "a", 0, "d", "holdout")])


def test_load_reports_missing_file(tmp_path):
    with pytest.raises(DataError) as info:
        DatasetManifest([ManifestEntry(str(tmp_path / "gone.png"), "a", 0, "d")]).load()
    assert "gone.png" in str(info.value.path)


def test_split_assignment_is_disjoint_and_stratified():
    entries = [ManifestEntry(f"{c}_{i}.png", str(c), c, "d") for c in range(3) for i in range(20)]
    manifest = assign_splits(DatasetManifest(entries), {"train": 0.7, "val": 0.15, "test": 0.15}, seed=0)
    parts = {name: {e.path for e in manifest.split(name)} for name in ("train", "val", "test")}
    assert sum(len(p) for p in parts.values()) == 60
    assert not (parts["train"] & parts["val"] or parts["train"] & parts["test"] or parts["val"] & parts["test"])
    assert manifest.split("test").class_counts() == {0: 3, 1: 3, 2: 3}


def test_stratified_split_holds_out_each_class():
    data = ImageSet(np.zeros((40, 2, 2, 3)), np.repeat([0, 1], 20))
    rest, held = stratified_split(data, 0.15, seed=1)
    assert Counter(held.labels.tolist()) == {0: 3, 1: 3}
    assert len(rest) == 34


# --- synthetic blobs ---------------------------------------------------------

def test_blob_counts_and_range():
    data = synth_blobs(0, per_class=10)
    assert data.images.shape == (30, 64, 64, 3)
    assert Counter(data.labels.tolist()) == {0: 10, 1: 10, 2: 10}
    assert 0 <= data.images.min() and data.images.max() <= 1


def test_blobs_deterministic():
    assert synth_blobs(5, 4).images.tobytes() == synth_blobs(5, 4).images.tobytes()
    assert synth_blobs(5, 4).images.tobytes() != synth_blobs(6, 4).images.tobytes()


@pytest.mark.parametrize("num_classes, hue_shift", [(3, 0.0), (3, 0.5), (13, 0.0)])
def test_blobs_separable_by_hue_rule(num_classes, hue_shift):
    data = synth_blobs(11, per_class=20, num_classes=num_classes, hue_shift=hue_shift)
    hues = class_hues(num_classes, hue_shift)
    correct = 0
    for img, y in zip(data.images.astype(np.float64), data.labels):
        mx, mn = img.max(axis=2), img.min(axis=2)
        disk = (mx - mn) / np.maximum(mx, 1e-9) > 0.4
        h = hue_of(img[disk].mean(axis=0))
        dist = np.abs((hues - h + 0.5) % 1.0 - 0.5)
        correct += int(np.argmin(dist) == y)
    assert correct / len(data) >= 0.99


def test_blobs_reject_bad_arguments():
    with pytest.raises(ValueError):
        synth_blobs(0, per_class=0)
    with pytest.raises(ValueError):
        synth_blobs(0, per_class=1, num_classes=14)


def test_written_set_reloads_to_same_pixels(tmp_path):
    data = synth_blobs(2, per_class=2)
    manifest = write_image_set(data, tmp_path, {"train": 0.5, "test": 0.5}, seed=0)
    loaded = manifest.load()
    assert np.max(np.abs(loaded.images - data.images)) <= 0.5 / 255 + 1e-6
    assert np.array_equal(loaded.labels, data.labels)
    assert {e.split for e in manifest} == {"train", "test"}
