#!/usr/bin/env python3
"""
Dataset parsing, subsampling, partitioning and download retries

ADULT and MNIST checks run only when the files are present in the raw data
directory (python src/cli.py train --dataset adult --download fetches them).
"""

import gzip
import struct
import sys
import tempfile
from pathlib import Path

import numpy as np
import pytest
import requests

sys.path.append(str(Path(__file__).parent.parent.parent))

from src.config import RAW_DATA_DIR
from src.data_io import (
    ADULT_FEATURES, BenchmarkDownloader, Dataset, load_idx, load_libsvm, make_synthetic,
    partition, resolve_dataset, save_libsvm, split_train_test, stratified_subsample,
)
from src.errors import ConfigurationError, DatasetFormatError, DatasetParseError
from src.gbt_core import Instance
from src.tests.suite import run_suite


def _idx_pair(directory, count=3, rows=2, cols=2, truncate=0):
    images = struct.pack(">IIII", 0x803, count, rows, cols) + bytes(range(count * rows * cols))
    labels = struct.pack(">II", 0x801, count) + bytes(i % 10 for i in range(count))
    img_path = Path(directory) / "images-idx3-ubyte"
    lbl_path = Path(directory) / "labels-idx1-ubyte.gz"
    img_path.write_bytes(images[:len(images) - truncate])
    with gzip.open(lbl_path, "wb") as handle:
        handle.write(labels)
    return img_path, lbl_path


def test_libsvm_line():
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "tiny.txt"
        path.write_text("+1 3:1 11:1\n-1 1:0.5  # comment\n\n")
        ds = load_libsvm(path)
        assert len(ds) == 2
        assert ds.num_features == 11
        assert ds.instances[0] == Instance({2: 1.0, 10: 1.0}, 1)
        assert ds.instances[1] == Instance({0: 0.5}, 0)
        assert ds.num_classes == 2


def test_libsvm_errors():
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "bad.txt"
        path.write_text("+1 3:1\n+1 3-1\n")
        with pytest.raises(DatasetParseError) as info:
            load_libsvm(path)
        assert info.value.line_number == 2
        path.write_text("+1 0:1\n")
        with pytest.raises(DatasetParseError):
            load_libsvm(path)
        path.write_text("+1 5:1\n")
        with pytest.raises(DatasetParseError):
            load_libsvm(path, num_features=3)
        with pytest.raises(DatasetFormatError):
            load_libsvm(Path(tmp) / "absent.txt")


def test_libsvm_save_and_reload():
    ds = make_synthetic(20, 4, seed=1)
    with tempfile.TemporaryDirectory() as tmp:
        reloaded = load_libsvm(save_libsvm(ds, Path(tmp) / "out.txt"), num_features=4)
    assert np.array_equal(reloaded.X, ds.X)
    assert np.array_equal(reloaded.y, ds.y)


def test_idx_parsing_and_truncation():
    with tempfile.TemporaryDirectory() as tmp:
        images, labels = _idx_pair(tmp)
        ds = load_idx(images, labels)
        assert ds.X.shape == (3, 4)
        assert ds.X[2, 3] == pytest.approx(11 / 255)
        assert list(ds.y) == [0, 1, 2]
        images, labels = _idx_pair(tmp, truncate=1)
        with pytest.raises(DatasetFormatError):
            load_idx(images, labels)


def test_partition_is_disjoint_and_balanced():
    parts = partition(10, ["u1", "u2", "u3", "u4", "u5"], seed=3)
    assert set(parts.sizes().values()) == {2}
    everything = np.concatenate(list(parts.assignments.values()))
    assert sorted(everything.tolist()) == list(range(10))
    uneven = partition(11, [1, 2, 3], seed=3)
    assert sorted(uneven.sizes().values()) == [3, 4, 4]
    assert partition(10, [1, 2], seed=9).assignments[1].tolist() == \
        partition(10, [1, 2], seed=9).assignments[1].tolist()
    with pytest.raises(ConfigurationError):
        partition(3, [1, 2, 3, 4], seed=0)


def test_stratified_subsample_keeps_proportions():
    y = np.array([0] * 75 + [1] * 25)
    ds = Dataset(np.arange(100, dtype=float)[:, None], y, 2)
    sub = stratified_subsample(ds, 20)
    assert len(sub) == 20
    assert int((sub.y == 1).sum()) == 5
    # first instances of each class in file order
    assert sub.X[:, 0].tolist()[:3] == [0.0, 1.0, 2.0]
    assert stratified_subsample(ds, 500) is ds


def test_split_and_synthetic():
    ds = make_synthetic(90, 5, seed=4)
    assert ds.X.shape == (90, 5)
    assert set(np.unique(ds.y)) == {0, 1}
    train, test = split_train_test(ds, 1 / 3, seed=4)
    assert (len(train), len(test)) == (60, 30)
    multi = make_synthetic(60, 3, seed=4, num_classes=3)
    assert multi.y.max() <= 2
    train, test = resolve_dataset("synthetic", seed=4, synthetic_instances=90,
                                  synthetic_features=5, subsample=30)
    assert len(train) == 30
    with pytest.raises(ConfigurationError):
        resolve_dataset("iris", seed=0)


class _StubResponse:
    def __init__(self, status_code, content=b""):
        self.status_code = status_code
        self.content = content


class _StubSession:
    """Replays a scripted sequence of responses or exceptions"""

    def __init__(self, script):
        self.script = list(script)
        self.calls = 0

    def get(self, url, timeout=None):
        self.calls += 1
        step = self.script.pop(0)
        if isinstance(step, Exception):
            raise step
        return step


def test_downloader_retries():
    import src.data_io as data_io_module

    sleeps = []
    original_sleep = data_io_module.time.sleep
    data_io_module.time.sleep = sleeps.append
    try:
        with tempfile.TemporaryDirectory() as tmp:
            session = _StubSession([requests.exceptions.Timeout(), _StubResponse(200, b"data")])
            loader = BenchmarkDownloader(tmp, session)
            assert loader._fetch("http://example.invalid/a9a") == b"data"
            assert session.calls == 2 and sleeps == [5]

            failing = _StubSession([_StubResponse(404)])
            loader = BenchmarkDownloader(tmp, failing)
            with pytest.raises(DatasetFormatError):
                loader.download("adult")
            with pytest.raises(ConfigurationError):
                loader.download("iris")
    finally:
        data_io_module.time.sleep = original_sleep


def test_adult_files_if_present():
    if not (RAW_DATA_DIR / "a9a").is_file():
        pytest.skip("ADULT files not downloaded")
    train, test = resolve_dataset("adult", seed=0, subsample=500)
    assert train.num_features == ADULT_FEATURES
    assert len(train) == 500
    assert set(np.unique(test.y)) == {0, 1}


def test_mnist_files_if_present():
    present = any((RAW_DATA_DIR / n).is_file()
                  for n in ("train-images-idx3-ubyte", "train-images-idx3-ubyte.gz"))
    if not present:
        pytest.skip("MNIST files not downloaded")
    train, _ = resolve_dataset("mnist", seed=0, subsample=1000)
    assert train.num_features == 784
    assert train.num_classes == 10
    assert float(train.X.max()) <= 1.0


def run_all_tests():
    return run_suite("DATA I/O", [
        ("LIBSVM line", test_libsvm_line),
        ("LIBSVM errors", test_libsvm_errors),
        ("LIBSVM save/reload", test_libsvm_save_and_reload),
        ("IDX parsing", test_idx_parsing_and_truncation),
        ("Partition", test_partition_is_disjoint_and_balanced),
        ("Stratified subsample", test_stratified_subsample_keeps_proportions),
        ("Split and synthetic", test_split_and_synthetic),
        ("Downloader retries", test_downloader_retries),
        ("ADULT files", test_adult_files_if_present),
        ("MNIST files", test_mnist_files_if_present),
    ])


if __name__ == "__main__":
    sys.exit(0 if run_all_tests() else 1)
