import math
import struct

import numpy as np
import pytest
from sklearn.linear_model import LogisticRegression

from s3nas.data import (Dataset, FormatError, InvalidConfig, class_template, generate_synthetic, load_flat,
                        save_flat)


@pytest.fixture(scope="module")
def default_split():
    return generate_synthetic(0)


def test_same_seed_same_bytes():
    a, _ = generate_synthetic(3, n_train=64, n_val=16)
    b, _ = generate_synthetic(3, n_train=64, n_val=16)
    c, _ = generate_synthetic(4, n_train=64, n_val=16)
    assert a.images.tobytes() == b.images.tobytes() and np.array_equal(a.labels, b.labels)
    assert a.images.tobytes() != c.images.tobytes()


def test_noise_free_images_identical_per_class():
    tr, _ = generate_synthetic(0, n_train=40, n_val=8, noise=0.0)
    for k in range(tr.classes):
        imgs = tr.images[tr.labels == k]
        assert np.all(imgs == imgs[0])


def test_every_class_in_both_splits(default_split):
    for ds in default_split:
        assert set(np.unique(ds.labels)) == set(range(ds.classes))
        assert ds.images.dtype == np.float32
        assert ds.images.min() >= 0 and ds.images.max() <= 1


def test_splits_are_disjoint(default_split):
    tr, va = default_split
    train_rows = {row.tobytes() for row in tr.images}
    assert not any(row.tobytes() in train_rows for row in va.images)


def test_templates_are_distinct():
    ts = [class_template(k, 4, 32, 0.02) for k in range(4)]
    for i in range(4):
        for j in range(i + 1, 4):
            assert np.abs(ts[i] - ts[j]).max() > 0.01


def test_linear_probe_learns_task(default_split):
    tr, va = default_split
    clf = LogisticRegression(max_iter=2000).fit(tr.images.reshape(len(tr), -1), tr.labels)
    assert clf.score(va.images.reshape(len(va), -1), va.labels) >= 0.9


def test_shuffled_labels_give_chance(default_split):
    tr, va = default_split
    shuffled = np.random.default_rng(0).permutation(tr.labels)
    clf = LogisticRegression(max_iter=2000).fit(tr.images.reshape(len(tr), -1), shuffled)
    acc = clf.score(va.images.reshape(len(va), -1), va.labels)
    k = tr.classes
    assert abs(acc - 1 / k) <= 3 * math.sqrt((1 / k) * (1 - 1 / k) / len(va))


@pytest.mark.parametrize("kwargs", [dict(classes=1), dict(side=4), dict(n_train=0), dict(n_val=2, classes=4),
                                    dict(noise=-0.1), dict(channels=0)])
def test_invalid_config(kwargs):
    with pytest.raises(InvalidConfig):
        generate_synthetic(0, **kwargs)


def test_flat_round_trip(tmp_path):
    tr, va = generate_synthetic(2, n_train=32, n_val=8, channels=2)
    for ds in (tr, va):
        path = tmp_path / f"{ds.split}.s3ds"
        save_flat(ds, path)
        back = load_flat(path)
        assert back.split == ds.split and back.classes == ds.classes
        assert np.array_equal(back.images, ds.images) and np.array_equal(back.labels, ds.labels)


def _written(tmp_path):
    tr, _ = generate_synthetic(2, n_train=16, n_val=4)
    path = tmp_path / "x.s3ds"
    save_flat(tr, path)
    return path, path.read_bytes()


def test_truncated_payload(tmp_path):
    path, raw = _written(tmp_path)
    path.write_bytes(raw[:-3])
    with pytest.raises(FormatError) as exc:
        load_flat(path)
    assert exc.value.field == "payload length"


def test_zero_classes_header(tmp_path):
    path, raw = _written(tmp_path)
    # header: magic, version, N, C, S, K, split
    path.write_bytes(raw[:20] + struct.pack("<I", 0) + raw[24:])
    with pytest.raises(FormatError) as exc:
        load_flat(path)
    assert exc.value.field == "classes"


def test_bad_magic(tmp_path):
    path, raw = _written(tmp_path)
    path.write_bytes(b"NOPE" + raw[4:])
    with pytest.raises(FormatError, match="magic"):
        load_flat(path)


def test_batches_cover_dataset_once():
    tr, _ = generate_synthetic(0, n_train=50, n_val=4)
    seen = np.concatenate([y for _, y in tr.batches(16, np.random.default_rng(0))])
    assert len(seen) == 50
    assert sorted(seen.tolist()) == sorted(tr.labels.tolist())
    dropped = list(tr.batches(16, np.random.default_rng(0), drop_last=True))
    assert len(dropped) == 3


def test_dataset_shape_checks():
    with pytest.raises(InvalidConfig):
        Dataset(np.zeros((2, 8, 8), dtype=np.float32), np.zeros(2, dtype=np.int64), 2)
    with pytest.raises(InvalidConfig):
        Dataset(np.zeros((2, 1, 8, 8), dtype=np.float32), np.zeros(3, dtype=np.int64), 2)


def test_standardize_uses_training_statistics():
    from s3nas.data import standardize

    tr, va = generate_synthetic(3, n_train=64, n_val=32)
    s_tr, s_va = standardize(tr, va)
    assert abs(float(s_tr.images.mean())) < 1e-5 and abs(float(s_tr.images.std()) - 1) < 1e-4
    mu, sd = float(tr.images.mean(dtype=np.float64)), float(tr.images.std(dtype=np.float64))
    assert np.allclose(s_va.images, (va.images - mu) / sd, atol=1e-5)
    assert np.array_equal(s_va.labels, va.labels) and s_va.split == "val"
