import logging
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mltp import data as D
from mltp.errors import IngestionError, InvalidInputError


def write_raw_idx(tmp_path, images, labels, img_magic=0x803, lbl_magic=0x801, truncate=0):
    n, h, w = images.shape
    ip, lp = tmp_path / "img.idx", tmp_path / "lbl.idx"
    blob = struct.pack(">IIII", img_magic, n, h, w) + images.astype(np.uint8).tobytes()
    ip.write_bytes(blob[:len(blob) - truncate])
    lp.write_bytes(struct.pack(">II", lbl_magic, len(labels)) + np.asarray(labels, np.uint8).tobytes())
    return ip, lp


# ---------------------------------------------------------------- IDX

def test_idx_zero_image_and_scaling(tmp_path):
    ip, lp = write_raw_idx(tmp_path, np.zeros((1, 2, 2)), [0])
    ds = D.load_idx(ip, lp)
    assert ds.x.shape == (1, 1, 2, 2) and np.all(ds.x == 0.0)
    ip, lp = write_raw_idx(tmp_path, np.full((1, 2, 2), 255), [0])
    assert np.all(D.load_idx(ip, lp).x == 1.0)


@pytest.mark.parametrize("kwargs,field", [
    (dict(img_magic=0x802), "magic"),
    (dict(lbl_magic=0x803), "magic"),
    (dict(truncate=1), "data"),
])
def test_idx_errors_name_the_field(tmp_path, kwargs, field):
    ip, lp = write_raw_idx(tmp_path, np.zeros((2, 3, 3)), [0, 1], **kwargs)
    with pytest.raises(IngestionError, match=field):
        D.load_idx(ip, lp)


def test_idx_count_mismatch(tmp_path):
    ip, lp = write_raw_idx(tmp_path, np.zeros((2, 3, 3)), [0, 1, 1])
    with pytest.raises(IngestionError, match="count"):
        D.load_idx(ip, lp)


def test_idx_truncated_header(tmp_path):
    (tmp_path / "a").write_bytes(b"\x00\x00\x08")
    (tmp_path / "b").write_bytes(struct.pack(">II", 0x801, 0))
    with pytest.raises(IngestionError, match="magic"):
        D.load_idx(tmp_path / "a", tmp_path / "b")


@given(st.integers(1, 5), st.integers(1, 4), st.integers(1, 4), st.integers(0, 2**32 - 1))
@settings(max_examples=25, deadline=None)
def test_idx_round_trip_bytes(tmp_path_factory, n, h, w, seed):
    tmp = tmp_path_factory.mktemp("idx")
    rng = np.random.default_rng(seed)
    ip, lp = write_raw_idx(tmp, rng.integers(0, 256, (n, h, w)), rng.integers(0, 10, n))
    ds = D.load_idx(ip, lp, num_classes=10)
    D.write_idx(ds, tmp / "i2", tmp / "l2")
    assert (tmp / "i2").read_bytes() == ip.read_bytes()
    assert (tmp / "l2").read_bytes() == lp.read_bytes()


# ---------------------------------------------------------------- CSV

def test_csv_single_row(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("1.0,2.0,0\n")
    ds = D.load_csv(p, 2, 2)
    assert np.array_equal(ds.x, [[1.0, 2.0]]) and ds.y.tolist() == [0]


@pytest.mark.parametrize("text,match", [
    ("", "no rows"),
    ("1.0,2.0,0\n1.0,0\n", "row 2"),
    ("1.0,abc,0\n", "row 1"),
    ("1.0,2.0,5\n", "row 1"),
    ("1.0,2.0,0.5\n", "row 1"),
])
def test_csv_errors(tmp_path, text, match):
    p = tmp_path / "d.csv"
    p.write_text(text)
    with pytest.raises(IngestionError, match=match):
        D.load_csv(p, 2, 3)


def test_csv_round_trip_100_rows(tmp_path):
    ds = D.make_synth("spirals", 50, 2, 0.2, seed=1)
    D.write_csv(ds, tmp_path / "a.csv")
    back = D.load_csv(tmp_path / "a.csv", 2, 2)
    assert np.array_equal(back.x, ds.x) and np.array_equal(back.y, ds.y)
    D.write_csv(back, tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


# ---------------------------------------------------------------- synthetic

def test_blobs_without_noise_sit_on_centers():
    ds = D.make_synth("blobs", 5, 3, 0.0, seed=0)
    centers = D.blob_centers(3)
    assert np.array_equal(ds.x, centers[ds.y])
    dists = np.linalg.norm(centers[:, None] - centers[None], axis=-1)
    assert np.allclose(dists[~np.eye(3, dtype=bool)], 1.0)


@pytest.mark.parametrize("kind", ["blobs", "spirals"])
def test_synth_is_deterministic(kind):
    a = D.make_synth(kind, 20, 2, 0.1, seed=5)
    b = D.make_synth(kind, 20, 2, 0.1, seed=5)
    c = D.make_synth(kind, 20, 2, 0.1, seed=6)
    assert np.array_equal(a.x, b.x) and np.array_equal(a.y, b.y)
    assert not np.array_equal(a.x, c.x)
    assert np.bincount(a.y).tolist() == [20, 20]


@pytest.mark.parametrize("classes", [2, 3, 5])
def test_blobs_nearest_center_oracle(classes):
    ds = D.make_synth("blobs", 400, classes, 0.1, seed=2)
    centers = D.blob_centers(classes)
    pred = np.argmin(np.linalg.norm(ds.x[:, None] - centers[None], axis=-1), axis=1)
    assert np.mean(pred == ds.y) > 0.99


def test_synth_rejects_bad_arguments():
    with pytest.raises(InvalidInputError):
        D.make_synth("blobs", 0)
    with pytest.raises(InvalidInputError):
        D.make_synth("moons", 5)


# ---------------------------------------------------------------- preprocessing

def test_standardize_examples():
    const = D.Dataset(np.full((1, 4), 7.0), np.array([0]), 1)
    assert np.all(D.standardize(const).x == 0)
    two = D.Dataset(np.array([[0.0, 2.0]]), np.array([0]), 1)
    assert np.array_equal(D.standardize(two).x, [[-1.0, 1.0]])


def test_global_standardize_uses_train_stats():
    rng = np.random.default_rng(0)
    train = D.Dataset(rng.normal(0, 1, (200, 3)), np.zeros(200, int), 1)
    test = D.Dataset(rng.normal(2, 1, (100, 3)), np.zeros(100, int), 1)
    stats = D.global_stats(train)
    tr, te = D.standardize(train, "global", stats), D.standardize(test, "global", stats)
    assert abs(tr.x.mean()) < 1e-12
    assert abs(te.x.mean() - (test.x.mean() - stats[0]) / stats[1]) < 1e-12
    assert te.x.mean() > 1.0
    with pytest.raises(InvalidInputError):
        D.standardize(train, "minmax")


@given(st.lists(st.floats(-100, 100), min_size=3, max_size=12))
@settings(max_examples=60, deadline=None)
def test_per_image_standardize_idempotent(values):
    x = np.array([values])
    if np.std(x) < 1e-3:
        return
    ds = D.Dataset(x, np.array([0]), 1)
    once = D.standardize(ds)
    twice = D.standardize(once)
    assert np.max(np.abs(once.x - twice.x)) < 1e-6


def test_augment_identity_and_zero_image():
    x = np.random.default_rng(0).standard_normal((3, 2, 5, 5))
    assert np.array_equal(D.augment(x, D.AugmentSpec(), seed=1), x)
    zeros = np.zeros((4, 1, 6, 6))
    assert np.all(D.augment(zeros, D.AugmentSpec(pad=2, flip=True, crop=(4, 4)), seed=1) == 0)
    with pytest.raises(InvalidInputError):
        D.augment(x, D.AugmentSpec(pad=0, crop=(6, 6)), seed=1)


def test_augment_flip_and_determinism():
    x = np.arange(16, dtype=float).reshape(1, 1, 4, 4).repeat(64, axis=0)
    out, (oy, ox, flips) = D.augment(x, D.AugmentSpec(flip=True), seed=3, return_offsets=True)
    assert np.array_equal(out[flips], x[flips][..., ::-1])
    assert np.array_equal(out[~flips], x[~flips])
    assert 0 < flips.sum() < 64
    assert np.array_equal(D.augment(x, D.AugmentSpec(flip=True), seed=3), out)


def test_augment_crop_offsets_uniform():
    n = 10_000
    x = np.zeros((n, 1, 32, 32))
    _, (oy, ox, _) = D.augment(x, D.AugmentSpec(pad=4), seed=11, return_offsets=True)
    # each axis: 9 offsets, every count within 3 sigma of n/9
    for axis in (oy, ox):
        counts = np.bincount(axis, minlength=9)
        assert counts.size == 9
        sigma = np.sqrt(n * (1 / 9) * (8 / 9))
        assert np.all(np.abs(counts - n / 9) <= 3 * sigma)
    # joint 9x9 grid: chi-square below the 99.9% quantile for 80 dof (124.84)
    joint = np.bincount(oy * 9 + ox, minlength=81)
    chi2 = np.sum((joint - n / 81) ** 2 / (n / 81))
    assert chi2 < 124.84


# ---------------------------------------------------------------- batching

def test_epoch_visits_every_sample_once():
    batches = D.epoch_batches(103, 16, D.stream(0, "shuffle", 1))
    flat = np.concatenate(batches)
    assert sorted(flat.tolist()) == list(range(103))
    assert len(D.epoch_batches(103, 16, D.stream(0, "shuffle", 1), drop_last=True)) == 6


def test_named_streams_are_independent_and_reproducible():
    a = D.stream(0, "shuffle").random(5)
    assert np.array_equal(a, D.stream(0, "shuffle").random(5))
    assert not np.array_equal(a, D.stream(0, "augment").random(5))


def test_split_task_pair_rule():
    batch = D.Batch(np.arange(4.0)[:, None], np.zeros(4, int), np.array([5, 2, 7, 1]))
    pair = D.split_task_pair(batch)
    assert pair.task_i.index.tolist() == [5, 2] and pair.task_j.index.tolist() == [7, 1]


def test_split_128_into_64s_and_odd_sizes(caplog):
    rng = np.random.default_rng(0)
    batch = D.Batch(rng.standard_normal((128, 3)), rng.integers(0, 2, 128), rng.permutation(128))
    pair = D.split_task_pair(batch)
    assert len(pair.task_i) == len(pair.task_j) == 64
    assert set(pair.task_i.index) | set(pair.task_j.index) == set(batch.index)
    assert not set(pair.task_i.index) & set(pair.task_j.index)
    odd = D.Batch(np.zeros((5, 1)), np.zeros(5, int))
    with caplog.at_level(logging.INFO):
        pair = D.split_task_pair(odd)
    assert len(pair.task_i) == len(pair.task_j) == 2 and "odd" in caplog.text
    with pytest.raises(InvalidInputError):
        D.split_task_pair(D.Batch(np.zeros((1, 1)), np.zeros(1, int)))


def test_dataset_validation():
    with pytest.raises(InvalidInputError):
        D.Dataset(np.zeros((0, 2)), np.zeros(0, int), 2)
    with pytest.raises(InvalidInputError):
        D.Dataset(np.zeros((2, 2)), np.array([0, 2]), 2)
    with pytest.raises(InvalidInputError):
        D.Dataset(np.zeros((3, 2)), np.array([0, 1]), 2)
