"""Synthetic data generation, manifests, normalization, and splits."""

import hashlib
import os

import numpy as np
import pytest

from m3ad.config import TRANSITION_PRIORS, TRANSITIONS
from m3ad.data import (C3_NAMES, Dataset, SampleRecord, assign_splits,
                       class_region_mask, gen_synthetic, kfold_splits,
                       load_manifest, load_split, robust_zscore, synth_image,
                       transition_change_label, transition_diag_label,
                       write_manifest, _marker_tile, _sample_rng)
from m3ad.errors import ContractError, ManifestError, StratifyError
from m3ad.numerics import load_m3t


def test_transition_label_tables():
    # diagnosis is the destination of the transition
    assert [transition_diag_label(c) for c in range(7)] == [0, 1, 2, 1, 2, 2, 0]
    # C3 groups: stable, conversion, reversion
    assert [transition_change_label(c, "C3") for c in range(7)] == [0, 0, 0, 1, 1, 1, 2]
    assert [transition_change_label(c, "C9") for c in range(7)] == list(range(7))
    with pytest.raises(ContractError):
        transition_change_label(0, "C5")


def test_transition_priors_group_structure():
    priors = np.asarray(TRANSITION_PRIORS)
    assert abs(priors.sum() - 1.0) < 1e-9
    stable = priors[:3].sum()
    conversion = priors[3:6].sum()
    reversion = priors[6]
    assert abs(stable - 0.653) < 1e-9
    assert abs(conversion - 0.330) < 1e-9
    assert abs(reversion - 0.017) < 1e-9


def test_generation_is_deterministic(tmp_path):
    m1 = gen_synthetic(tmp_path / "a", seed=5, n=6, size=32)
    m2 = gen_synthetic(tmp_path / "b", seed=5, n=6, size=32)
    assert open(m1).read() == open(m2).read()
    for rec in load_manifest(m1):
        blob1 = open(os.path.join(tmp_path / "a", rec.path), "rb").read()
        blob2 = open(os.path.join(tmp_path / "b", rec.path), "rb").read()
        assert blob1 == blob2
    m3 = gen_synthetic(tmp_path / "c", seed=6, n=6, size=32)
    assert open(m1).read() != open(m3).read()


def test_schemes_share_images_and_differ_in_change_codes(tmp_path):
    m3 = gen_synthetic(tmp_path / "c3", seed=9, n=10, size=32, scheme="C3")
    m9 = gen_synthetic(tmp_path / "c9", seed=9, n=10, size=32, scheme="C9")
    r3 = load_manifest(m3)
    r9 = load_manifest(m9)
    for a, b in zip(r3, r9):
        assert a.diag == b.diag
        assert a.change == transition_change_label(b.change, "C3")
        blob_a = open(os.path.join(tmp_path / "c3", a.path), "rb").read()
        blob_b = open(os.path.join(tmp_path / "c9", b.path), "rb").read()
        assert blob_a == blob_b


def test_region_intensity_orders_by_diagnosis():
    region = class_region_mask(64)
    assert 0.02 < region.mean() < 0.2  # a central minority of pixels
    means = []
    for diag in range(3):
        acc = []
        for i in range(60):
            rng = _sample_rng(77, i)
            img = synth_image(rng, 64, diag, code=diag)  # stable transitions
            acc.append(img[region].mean())
        means.append(np.mean(acc))
    assert means[0] > means[1] + 0.02
    assert means[1] > means[2] + 0.02


def test_marker_tiles_distinct_and_stamped():
    tiles = [_marker_tile(c, 8) for c in range(7)]
    for i in range(7):
        for j in range(i + 1, 7):
            assert np.abs(tiles[i] - tiles[j]).max() > 0
    rng = _sample_rng(3, 0)
    img = synth_image(rng, 64, 1, code=4)
    stamped = img[1:9, 1:9]
    # marker pixels sit at 0.15 or 0.90 before the +-0.02 noise
    expected = 0.15 + 0.75 * _marker_tile(4, 8)
    assert np.abs(stamped - expected).max() < 0.1


def test_code_draw_frequencies_match_priors():
    priors = np.asarray(TRANSITION_PRIORS)
    counts = np.zeros(7)
    for i in range(5000):
        rng = _sample_rng(42, i)
        counts[int(rng.choice(7, p=priors))] += 1
    np.testing.assert_allclose(counts / 5000.0, priors, atol=0.03)


def test_generated_label_frequencies(tmp_path):
    manifest = gen_synthetic(tmp_path, seed=1, n=400, size=32, scheme="C3")
    records = load_manifest(manifest)
    change = np.asarray([r.change for r in records])
    freqs = np.bincount(change, minlength=3) / len(records)
    np.testing.assert_allclose(freqs, [0.653, 0.330, 0.017], atol=0.06)


def test_images_are_distinct(tmp_path):
    manifest = gen_synthetic(tmp_path, seed=2, n=30, size=32)
    digests = set()
    base = os.path.dirname(manifest)
    for rec in load_manifest(manifest):
        blob = open(os.path.join(base, rec.path), "rb").read()
        digests.add(hashlib.sha256(blob).hexdigest())
    assert len(digests) == 30


def test_image_range_and_dtype():
    img = synth_image(_sample_rng(0, 0), 64, 0, 0)
    assert img.dtype == np.float32
    assert img.min() >= 0.0 and img.max() <= 1.0


def test_gen_synthetic_contracts(tmp_path):
    with pytest.raises(ContractError):
        gen_synthetic(tmp_path, seed=0, n=4, size=33)
    with pytest.raises(ContractError):
        gen_synthetic(tmp_path, seed=0, n=4, size=32, label_priors=(1.0, 0.0))
    with pytest.raises(ContractError):
        gen_synthetic(tmp_path, seed=0, n=4, size=32,
                      label_priors=(-1.0,) * 7)


# -- manifest ----------------------------------------------------------


def _records():
    return [SampleRecord("images/a.m3t", 70.0, 1, 1450.0, 0, 0, "train"),
            SampleRecord("images/b.m3t", 75.5, 0, 1390.0, 2, 1, "val")]


def test_manifest_round_trip(tmp_path):
    path = tmp_path / "manifest.csv"
    write_manifest(path, _records())
    back = load_manifest(path, check_files=False)
    assert back == _records()
    text = path.read_text()
    assert text.splitlines()[0] == "path,age,gender,etiv,diag,change,split"
    assert "\r" not in text


@pytest.mark.parametrize("mutate,message", [
    (lambda rows: rows.__setitem__(0, "bad,header,row"), "bad header"),
    (lambda rows: rows.__setitem__(1, "images/a.m3t,70.0,1,1450.0,0,0"), "expected 7 fields"),
    (lambda rows: rows.__setitem__(1, "images/a.m3t,old,1,1450.0,0,0,train"), "could not convert"),
    (lambda rows: rows.__setitem__(2, rows[1]), "duplicate path"),
    (lambda rows: rows.__setitem__(1, "images/a.m3t,70.0,1,1450.0,5,0,train"), "diag=5"),
    (lambda rows: rows.__setitem__(1, "images/a.m3t,70.0,1,1450.0,0,9,train"), "change=9"),
    (lambda rows: rows.__setitem__(1, "images/a.m3t,70.0,2,1450.0,0,0,train"), "gender=2"),
    (lambda rows: rows.__setitem__(1, "images/a.m3t,70.0,1,1450.0,0,0,holdout"), "split="),
])
def test_manifest_rejects_bad_rows(tmp_path, mutate, message):
    path = tmp_path / "manifest.csv"
    write_manifest(path, _records())
    rows = path.read_text().splitlines()
    mutate(rows)
    path.write_text("\n".join(rows) + "\n")
    with pytest.raises(ManifestError, match=message):
        load_manifest(path, check_files=False)


def test_manifest_missing_file_check(tmp_path):
    path = tmp_path / "manifest.csv"
    write_manifest(path, _records()[:1])
    with pytest.raises(ManifestError, match="missing image file"):
        load_manifest(path, check_files=True)
    assert load_manifest(path, check_files=False)[0].path == "images/a.m3t"


def test_manifest_empty_file(tmp_path):
    path = tmp_path / "manifest.csv"
    path.write_text("")
    with pytest.raises(ManifestError, match="empty"):
        load_manifest(path)


# -- normalization -----------------------------------------------------


def test_robust_zscore_frozen_oracle():
    x = np.array([0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 100.0])
    expected = np.array([
        -0.48025731323015364, -0.44582077118938146, -0.407978417298423,
        -0.3701360634074646, -0.3322937095165061, -0.2944513556255477,
        -0.2566090017345892, -0.2187666478436308, -0.18092429395267237,
        2.9872375737983683])
    np.testing.assert_allclose(robust_zscore(x), expected, atol=1e-12)


def test_robust_zscore_properties(rng):
    img = rng.standard_normal((32, 32)).astype(np.float32)
    out = robust_zscore(img)
    assert out.dtype == np.float32
    assert abs(out.mean()) < 1e-5
    assert abs(out.std() - 1.0) < 1e-3
    flat = robust_zscore(np.full((8, 8), 3.25))
    np.testing.assert_array_equal(flat, np.zeros((8, 8)))
    assert robust_zscore(np.arange(16).reshape(4, 4)).dtype == np.float64
    with pytest.raises(ContractError):
        robust_zscore(np.empty((0,)))


# -- splits ------------------------------------------------------------


def _many_records(n=60, seed=0):
    rng = np.random.default_rng(seed)
    return [SampleRecord(f"images/{i}.m3t", 70.0, 0, 1450.0,
                         int(rng.integers(0, 3)), 0, "train")
            for i in range(n)]


def test_assign_splits_stratified_counts():
    records = _many_records(90)
    out = assign_splits(records, (0.7, 0.15, 0.15), seed=4)
    assert len(out) == len(records)
    for klass in range(3):
        members = [r for r in out if r.diag == klass]
        n_k = len(members)
        n_train = sum(r.split == "train" for r in members)
        n_val = sum(r.split == "val" for r in members)
        assert n_train == round(0.7 * n_k)
        assert abs(n_val - 0.15 * n_k) <= 1.0
    again = assign_splits(records, (0.7, 0.15, 0.15), seed=4)
    assert [r.split for r in again] == [r.split for r in out]


def test_assign_splits_empty_test_fraction():
    out = assign_splits(_many_records(30), (0.8, 0.2, 0.0), seed=1)
    assert all(r.split in ("train", "val") for r in out)


def test_assign_splits_contracts():
    with pytest.raises(ContractError):
        assign_splits(_many_records(10), (0.5, 0.2, 0.2), seed=0)
    with pytest.raises(ContractError):
        assign_splits(_many_records(10), (0.8, 0.3, -0.1), seed=0)


def test_kfold_partition_properties():
    records = _many_records(61)
    folds = kfold_splits(records, 4, seed=3)
    assert len(folds) == 4
    all_idx = np.concatenate(folds)
    assert len(all_idx) == len(records)
    assert len(np.unique(all_idx)) == len(records)
    sizes = [len(f) for f in folds]
    assert max(sizes) - min(sizes) <= 3  # one +-1 per stratum
    diag = np.asarray([r.diag for r in records])
    for klass in range(3):
        counts = [int((diag[f] == klass).sum()) for f in folds]
        assert max(counts) - min(counts) <= 1
    again = kfold_splits(records, 4, seed=3)
    for a, b in zip(folds, again):
        np.testing.assert_array_equal(a, b)


def test_kfold_contracts():
    records = _many_records(30)
    with pytest.raises(ContractError):
        kfold_splits(records, 1, seed=0)
    rare = [SampleRecord(f"images/{i}.m3t", 70.0, 0, 1450.0, 2 if i == 0 else 0, 0, "train")
            for i in range(10)]
    with pytest.raises(StratifyError):
        kfold_splits(rare, 3, seed=0)


# -- dataset loading ---------------------------------------------------


def test_load_split_arrays(tiny_data_dir, tiny_splits):
    train, val, test = tiny_splits
    assert len(train) == 16 and len(val) == 4 and len(test) == 4
    assert train.images.dtype == np.float32
    assert train.images.shape[1:] == (32, 32)
    # images arrive normalized
    assert abs(float(train.images[0].mean())) < 1e-4
    assert train.diag.dtype == np.int64
    assert set(np.unique(train.gender)) <= {0, 1}
    records = load_manifest(tiny_data_dir)
    raw = load_m3t(os.path.join(os.path.dirname(tiny_data_dir),
                                [r for r in records if r.split == "train"][0].path))
    np.testing.assert_allclose(train.images[0], robust_zscore(raw), atol=1e-6)


def test_load_split_contracts(tiny_data_dir):
    with pytest.raises(ContractError):
        load_split(tiny_data_dir, "holdout")


def test_load_split_missing_rows(tmp_path):
    manifest = gen_synthetic(tmp_path, seed=3, n=6, size=32, fractions=(1.0, 0.0, 0.0))
    with pytest.raises(ManifestError, match="no rows"):
        load_split(manifest, "test")


def test_c3_names_order():
    assert C3_NAMES == ("Stable", "Conversion", "Reversion")
    assert len(TRANSITIONS) == 7
