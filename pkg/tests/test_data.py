"""Dataset generation and ingestion contracts."""

import hashlib
import json

import numpy as np
import pytest

from causaliv.data import DatasetError, Dataset, generate_shapes, load_dataset


def test_shapes_counts_exactly_balanced():
    batch = generate_shapes(600, 3, seed=7)
    assert batch.n == 600
    assert np.bincount(batch.labels).tolist() == [200, 200, 200]


def test_shapes_deterministic():
    a = generate_shapes(32, 3, seed=5)
    b = generate_shapes(32, 3, seed=5)
    assert np.array_equal(a.images, b.images)
    assert np.array_equal(a.labels, b.labels)
    c = generate_shapes(32, 3, seed=6)
    assert not np.array_equal(a.images, c.images)


def test_shapes_pixel_range_and_shape():
    batch = generate_shapes(16, 2, seed=1)
    assert batch.images.shape == (16, 3, 32, 32)
    assert batch.images.min() >= 0.0 and batch.images.max() <= 1.0


def test_shapes_class_count_validation():
    with pytest.raises(DatasetError, match="classes"):
        generate_shapes(10, 7, seed=0)


def test_load_dataset_spec_and_batches():
    ds = load_dataset({"kind": "shapes", "k": 3, "n_train": 48, "n_test": 24, "seed": 3})
    assert ds.train.n == 48 and ds.test.n == 24 and ds.num_classes == 3
    batches = list(ds.batches("train", 16, seed=0))
    assert [b.n for b in batches] == [16, 16, 16]
    again = list(ds.batches("train", 16, seed=0))
    assert all(np.array_equal(a.images, b.images) for a, b in zip(batches, again))


def test_load_dataset_same_spec_identical_bytes():
    spec = {"kind": "shapes", "k": 3, "n_train": 32, "n_test": 16, "seed": 9}
    a = load_dataset(spec)
    b = load_dataset(spec)
    assert a.train.images.tobytes() == b.train.images.tobytes()


def _write_cifar_style(root, n=20, with_checksums=False):
    rng = np.random.default_rng(0)
    files = {}
    for name in [f"data_batch_{i}.bin" for i in range(1, 6)] + ["test_batch.bin"]:
        records = np.empty((n, 3073), dtype=np.uint8)
        records[:, 0] = rng.integers(0, 10, n)
        records[:, 1:] = rng.integers(0, 256, (n, 3072))
        (root / name).write_bytes(records.tobytes())
        files[name] = hashlib.sha256(records.tobytes()).hexdigest()
    if with_checksums:
        (root / "checksums.json").write_text(json.dumps(files))


def test_cifar_style_layout(tmp_path):
    _write_cifar_style(tmp_path)
    ds = load_dataset(tmp_path)
    assert ds.train.n == 100 and ds.test.n == 20
    assert ds.train.images.shape[1:] == (3, 32, 32)
    assert ds.train.images.max() <= 1.0


def test_cifar_missing_file_names_it(tmp_path):
    _write_cifar_style(tmp_path)
    (tmp_path / "data_batch_3.bin").unlink()
    with pytest.raises(DatasetError, match="data_batch_3.bin"):
        load_dataset(tmp_path)


def test_cifar_checksum_failure(tmp_path):
    _write_cifar_style(tmp_path, with_checksums=True)
    path = tmp_path / "data_batch_1.bin"
    raw = bytearray(path.read_bytes())
    raw[100] ^= 0xFF
    path.write_bytes(bytes(raw))
    with pytest.raises(DatasetError, match="checksum"):
        load_dataset(tmp_path)


def test_shapes_json_in_directory(tmp_path):
    (tmp_path / "shapes.json").write_text(json.dumps({"kind": "shapes", "k": 3, "n_train": 12, "n_test": 6, "seed": 2}))
    ds = load_dataset(tmp_path)
    assert isinstance(ds, Dataset) and ds.train.n == 12


def test_empty_directory_error(tmp_path):
    with pytest.raises(DatasetError, match="no shapes.json"):
        load_dataset(tmp_path)
