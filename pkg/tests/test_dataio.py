import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from enhseg import dataio
from enhseg.core import ClassVocabulary, ConfigError, DataError, LabelMap, Provenance
from enhseg.dataio import (DatasetDescriptor, PseudoManifest, VersionError, coco_annotation_mask, ingest_coco,
                           labeled_count, load_pseudo, load_sample, load_split, make_split, pascal_voc_descriptor,
                           read_label_png, read_manifest, save_pseudo, synthetic_dataset, write_ids,
                           write_label_png, write_manifest)


def _manifest(vocab, thr=0.25):
    return PseudoManifest(vocab.to_dict(), thr, "a photo of a {classlabel}", {"proposer": "x"})


def test_pseudo_label_round_trip(tmp_path, rng):
    vocab = ClassVocabulary(tuple(f"c{k}" for k in range(21)))
    ids = rng.integers(0, 21, (13, 17))
    ids[0, :5] = 255
    write_manifest(tmp_path, _manifest(vocab, 0.37))
    save_pseudo(tmp_path, "img_1", LabelMap(ids))
    back = load_pseudo(tmp_path, "img_1", vocab)
    np.testing.assert_array_equal(back.ids, ids)
    assert back.provenance is Provenance.PSEUDO
    assert read_manifest(tmp_path).sim_threshold == 0.37


def test_pseudo_labels_for_other_vocabulary_are_rejected(tmp_path):
    write_manifest(tmp_path, _manifest(ClassVocabulary(("a", "b", "c"))))
    save_pseudo(tmp_path, "x", LabelMap(np.zeros((2, 2), int)))
    with pytest.raises(VersionError):
        load_pseudo(tmp_path, "x", ClassVocabulary(("a", "b", "c", "d")))


def test_manifest_version_checked(tmp_path):
    write_manifest(tmp_path, _manifest(ClassVocabulary(("a", "b"))))
    d = json.loads((tmp_path / "manifest.json").read_text())
    d["version"] = 99
    (tmp_path / "manifest.json").write_text(json.dumps(d))
    with pytest.raises(VersionError):
        read_manifest(tmp_path)


def test_label_png_rejects_out_of_range(tmp_path):
    with pytest.raises(Exception):
        write_label_png(tmp_path / "x.png", np.array([[256]]))
    write_label_png(tmp_path / "ok.png", np.array([[0, 255]]))
    np.testing.assert_array_equal(read_label_png(tmp_path / "ok.png"), [[0, 255]])


def test_pascal_split_counts():
    ids = [f"{i:06d}" for i in range(1464)]
    for frac, n in (("1/16", 92), ("1/8", 183), ("1/4", 366), ("1/2", 732)):
        s = make_split(ids, frac, seed=0)
        assert len(s.labeled_ids) == n and len(s.unlabeled_ids) == 1464 - n


def test_coco_split_counts():
    for frac, n in (("1/512", 232), ("1/256", 463), ("1/128", 925), ("1/64", 1849)):
        assert labeled_count(118287, frac) == n


@given(st.integers(1, 400), st.sampled_from(["1/2", "1/4", "1/8", "1/16", "full"]), st.integers(0, 2**31))
def test_split_is_a_deterministic_partition(n, frac, seed):
    ids = [f"id{i}" for i in range(n)]
    a, b = make_split(ids, frac, seed), make_split(ids, frac, seed)
    assert a == b
    assert set(a.labeled_ids).isdisjoint(a.unlabeled_ids)
    assert sorted(a.labeled_ids + a.unlabeled_ids) == sorted(ids)
    assert len(a.labeled_ids) == labeled_count(n, frac)


def test_split_seed_changes_selection():
    ids = [f"id{i}" for i in range(200)]
    assert make_split(ids, "1/8", 0).labeled_ids != make_split(ids, "1/8", 1).labeled_ids


def test_bad_fractions():
    for frac in ("0", "3/2", "half"):
        with pytest.raises(ConfigError):
            make_split(["a", "b"], frac, 0)
    with pytest.raises(ConfigError):
        make_split([], "1/2", 0)


def test_synthetic_dataset_is_reproducible(tmp_path):
    a = synthetic_dataset(tmp_path / "a", seed=5, n_images=4, n_classes=4, size=24, n_val=2)
    synthetic_dataset(tmp_path / "b", seed=5, n_images=4, n_classes=4, size=24, n_val=2)
    for i in a.train_ids() + a.val_ids():
        for sub, ext in (("images", ".png"), ("labels", ".png")):
            assert (tmp_path / "a" / sub / f"{i}{ext}").read_bytes() == (tmp_path / "b" / sub / f"{i}{ext}").read_bytes()
        img, lab = load_sample(a, i)
        assert img.shape == (24, 24, 3) and lab.ids.max() < 4
    loaded = DatasetDescriptor.load(tmp_path / "a")
    assert loaded.vocabulary == a.vocabulary and loaded.train_ids() == a.train_ids()


def test_load_split_persists_and_prefers_existing_lists(tmp_path):
    desc = synthetic_dataset(tmp_path, seed=0, n_images=16, n_classes=2, size=16, n_val=1)
    s = load_split(desc, "1/4", 3)
    d = dataio.split_dir(desc, "1/4", 3)
    assert dataio.read_ids(d / "labeled.txt") == list(s.labeled_ids)
    write_ids(d / "labeled.txt", ["train_00000"])
    write_ids(d / "unlabeled.txt", ["train_00001"])
    assert load_split(desc, "1/4", 3).labeled_ids == ("train_00000",)


def test_void_ids_map_to_ignore_and_missing_files(tmp_path):
    desc = synthetic_dataset(tmp_path, seed=0, n_images=2, n_classes=3, size=16, n_val=1)
    i = desc.train_ids()[0]
    ids = np.zeros((16, 16), int)
    ids[0, 0] = 250
    write_label_png(desc.label_path(i), ids)
    desc.void_ids = (250,)
    assert load_sample(desc, i)[1].ids[0, 0] == 255
    desc.void_ids = ()
    with pytest.raises(DataError, match=i):
        load_sample(desc, i)
    desc.label_path(i).unlink()
    with pytest.raises(DataError, match="label missing"):
        load_sample(desc, i)
    with pytest.raises(DataError, match="image missing"):
        load_sample(desc, "nope")
    with pytest.raises(DataError):
        DatasetDescriptor.load(tmp_path / "absent")


def test_pascal_descriptor_layout(tmp_path):
    d = pascal_voc_descriptor(tmp_path)
    assert d.vocabulary.num_classes == 21 and d.image_ext == ".jpg"
    assert d.image_path("2007_000032") == tmp_path / "JPEGImages" / "2007_000032.jpg"
    assert DatasetDescriptor.load(tmp_path).label_dir == "SegmentationClass"


def _rle_encode(counts):
    """String form of an uncompressed RLE, following the reference encoder."""
    s = []
    for i, x in enumerate(counts):
        if i > 2:
            x -= counts[i - 2]
        more = True
        while more:
            c = x & 0x1F
            x >>= 5
            more = (x != -1) if (c & 0x10) else (x != 0)
            if more:
                c |= 0x20
            s.append(chr(c + 48))
    return "".join(s)


def _mask_to_counts(m):
    flat = m.T.reshape(-1)
    counts, cur, run = [], False, 0
    for v in flat:
        if v == cur:
            run += 1
        else:
            counts.append(run)
            cur, run = v, 1
    counts.append(run)
    return counts


def test_coco_rle_both_encodings(rng):
    m = rng.random((7, 9)) < 0.4
    counts = _mask_to_counts(m)
    for seg in ({"counts": counts, "size": [7, 9]}, {"counts": _rle_encode(counts), "size": [7, 9]}):
        np.testing.assert_array_equal(coco_annotation_mask({"segmentation": seg}, 7, 9), m)


def test_ingest_coco(tmp_path):
    ann = {
        "categories": [{"id": 90, "name": "z"}, {"id": 1, "name": "a"}],
        "images": [{"id": 7, "file_name": "000007.jpg", "height": 10, "width": 10}],
        "annotations": [
            {"image_id": 7, "category_id": 90, "area": 36, "iscrowd": 0,
             "segmentation": [[1, 1, 7, 1, 7, 7, 1, 7]]},
            {"image_id": 7, "category_id": 1, "area": 4, "iscrowd": 1,
             "segmentation": {"counts": [0, 4, 96], "size": [10, 10]}},
        ],
    }
    p = tmp_path / "ann.json"
    p.write_text(json.dumps(ann))
    mapping = ingest_coco(p, tmp_path / "labels")
    assert mapping == {1: 1, 90: 2}
    out = read_label_png(tmp_path / "labels" / "000007.png")
    assert (out[:4, 0] == 255).all() and out[4, 0] == 0
    assert (out[2:6, 2:6] == 2).all() and out[9, 9] == 0
