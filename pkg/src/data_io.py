"""
Benchmark dataset loading for the FedXGB simulator

Parses sparse LIBSVM text (ADULT) and IDX binaries (MNIST), downloads them
with retry logic, builds desk-scale subsamples and partitions instances
across users without overlap.
"""

import gzip
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Hashable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import requests

from src.config import RAW_DATA_DIR
from src.errors import ConfigurationError, DatasetFormatError, DatasetParseError
from src.gbt_core import Instance

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
ADULT_FEATURES = 123

DATASET_URLS = {
    "adult": {
        "a9a": "https://www.csie.ntu.edu.tw/~cjlin/libsvmtools/datasets/binary/a9a",
        "a9a.t": "https://www.csie.ntu.edu.tw/~cjlin/libsvmtools/datasets/binary/a9a.t",
    },
    "mnist": {
        "train-images-idx3-ubyte.gz": "https://storage.googleapis.com/cvdf-datasets/mnist/train-images-idx3-ubyte.gz",
        "train-labels-idx1-ubyte.gz": "https://storage.googleapis.com/cvdf-datasets/mnist/train-labels-idx1-ubyte.gz",
        "t10k-images-idx3-ubyte.gz": "https://storage.googleapis.com/cvdf-datasets/mnist/t10k-images-idx3-ubyte.gz",
        "t10k-labels-idx1-ubyte.gz": "https://storage.googleapis.com/cvdf-datasets/mnist/t10k-labels-idx1-ubyte.gz",
    },
}


@dataclass
class Dataset:
    """Dense feature matrix plus labels; instances are exposed in sparse form"""
    X: np.ndarray
    y: np.ndarray
    num_classes: int
    name: str = "dataset"

    def __len__(self):
        return len(self.y)

    @property
    def num_features(self) -> int:
        return int(self.X.shape[1]) if self.X.ndim == 2 else 0

    @property
    def instances(self) -> List[Instance]:
        out = []
        for row, label in zip(self.X, self.y):
            nz = np.flatnonzero(row)
            out.append(Instance({int(i): float(row[i]) for i in nz}, int(label)))
        return out

    def subset(self, indices, name: Optional[str] = None) -> "Dataset":
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(self.X[indices], self.y[indices], self.num_classes, name or self.name)

    @classmethod
    def from_instances(cls, instances: Sequence[Instance], num_features: Optional[int] = None,
                       num_classes: Optional[int] = None, name: str = "dataset") -> "Dataset":
        q = num_features
        if q is None:
            q = max((max(inst.features, default=-1) + 1 for inst in instances), default=0)
        X = np.zeros((len(instances), q), dtype=np.float64)
        for r, inst in enumerate(instances):
            for idx, value in inst.features.items():
                if idx >= q:
                    raise ConfigurationError(f"feature id {idx} >= feature count {q}")
                X[r, idx] = value
        y = np.array([int(inst.label) for inst in instances], dtype=np.int64)
        classes = num_classes if num_classes is not None else max(2, int(y.max()) + 1 if len(y) else 2)
        return cls(X, y, classes, name)


@dataclass
class Partition:
    """Instance indices held by each user"""
    assignments: Dict[Hashable, np.ndarray] = field(default_factory=dict)

    def sizes(self) -> Dict[Hashable, int]:
        return {u: len(idx) for u, idx in self.assignments.items()}


# ---------------------------------------------------------------------------
# LIBSVM text
# ---------------------------------------------------------------------------

def _open_text(path: Path):
    return gzip.open(path, "rt") if path.suffix == ".gz" else open(path, "r")


def load_libsvm(path, num_features: Optional[int] = None, name: Optional[str] = None) -> Dataset:
    """
    Load a sparse "label idx:val ..." file

    Parameters:
    -----------
    path : str or Path
        File to parse (optionally gzip-compressed)
    num_features : int, optional
        Feature count; inferred from the largest index when omitted

    Returns:
    --------
    Dataset : labels {-1, +1} mapped to {0, 1}, indices made 0-based
    """
    path = Path(path)
    if not path.is_file():
        raise DatasetFormatError(f"dataset file not found: {path}")

    labels: List[float] = []
    rows: List[Dict[int, float]] = []
    with _open_text(path) as handle:
        for line_number, raw in enumerate(handle, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            tokens = line.split()
            try:
                label = float(tokens[0])
            except ValueError:
                raise DatasetParseError(line_number, f"bad label {tokens[0]!r}")
            features = {}
            for token in tokens[1:]:
                idx_text, sep, value_text = token.partition(":")
                if not sep:
                    raise DatasetParseError(line_number, f"expected idx:value, got {token!r}")
                try:
                    idx = int(idx_text)
                    value = float(value_text)
                except ValueError:
                    raise DatasetParseError(line_number, f"bad feature {token!r}")
                if idx < 1:
                    raise DatasetParseError(line_number, f"feature index {idx} must be >= 1")
                if not np.isfinite(value):
                    raise DatasetParseError(line_number, f"non-finite value in {token!r}")
                features[idx - 1] = value
            labels.append(label)
            rows.append(features)

    q = num_features
    if q is None:
        q = max((max(r, default=-1) + 1 for r in rows), default=0)
    X = np.zeros((len(rows), q), dtype=np.float64)
    for r, features in enumerate(rows):
        for idx, value in features.items():
            if idx >= q:
                raise DatasetParseError(r + 1, f"feature index {idx + 1} exceeds feature count {q}")
            X[r, idx] = value

    y, num_classes = normalize_labels(np.array(labels, dtype=np.float64))
    return Dataset(X, y, num_classes, name or path.stem)


def normalize_labels(raw: np.ndarray) -> Tuple[np.ndarray, int]:
    if len(raw) == 0:
        return raw.astype(np.int64), 2
    values = set(np.unique(raw).tolist())
    if values <= {-1.0, 1.0}:
        return (raw > 0).astype(np.int64), 2
    if any(v != int(v) or v < 0 for v in values):
        raise ConfigurationError(f"labels must be +-1 or non-negative class ids, got {sorted(values)[:5]}")
    y = raw.astype(np.int64)
    return y, max(2, int(y.max()) + 1)


def save_libsvm(dataset: Dataset, path) -> Path:
    path = Path(path)
    lines = []
    for row, label in zip(dataset.X, dataset.y):
        parts = [str(int(label))]
        parts.extend(f"{i + 1}:{row[i]!r}" for i in np.flatnonzero(row))
        lines.append(" ".join(parts))
    path.write_text("\n".join(lines) + ("\n" if lines else ""))
    return path


# ---------------------------------------------------------------------------
# IDX binaries
# ---------------------------------------------------------------------------

def _read_bytes(path: Path) -> bytes:
    if not path.is_file():
        raise DatasetFormatError(f"dataset file not found: {path}")
    return gzip.open(path, "rb").read() if path.suffix == ".gz" else path.read_bytes()


def load_idx(images_path, labels_path, name: str = "mnist") -> Dataset:
    """Read an IDX image/label pair; pixels scaled to [0, 1]"""
    images = _read_bytes(Path(images_path))
    labels = _read_bytes(Path(labels_path))
    if len(images) < 16 or len(labels) < 8:
        raise DatasetFormatError("IDX header truncated")

    magic, count, rows, cols = struct.unpack(">IIII", images[:16])
    if magic != IDX_IMAGES_MAGIC:
        raise DatasetFormatError(f"bad image magic {magic:#010x}")
    label_magic, label_count = struct.unpack(">II", labels[:8])
    if label_magic != IDX_LABELS_MAGIC:
        raise DatasetFormatError(f"bad label magic {label_magic:#010x}")
    if count != label_count:
        raise DatasetFormatError(f"{count} images but {label_count} labels")
    pixels = rows * cols
    if len(images) - 16 != count * pixels:
        raise DatasetFormatError("image payload truncated or oversized")
    if len(labels) - 8 != count:
        raise DatasetFormatError("label payload truncated or oversized")

    X = np.frombuffer(images, dtype=np.uint8, offset=16).reshape(count, pixels).astype(np.float64) / 255.0
    y = np.frombuffer(labels, dtype=np.uint8, offset=8).astype(np.int64)
    return Dataset(X, y, 10, name)


# ---------------------------------------------------------------------------
# Sampling and partitioning
# ---------------------------------------------------------------------------

def stratified_subsample(dataset: Dataset, total: int) -> Dataset:
    """First instances of each class in file order, class proportions preserved"""
    if total >= len(dataset):
        return dataset
    classes, counts = np.unique(dataset.y, return_counts=True)
    quota = np.floor(counts / counts.sum() * total).astype(np.int64)
    # hand out the rounding remainder to the largest classes first
    for i in np.argsort(-counts, kind="stable")[: total - int(quota.sum())]:
        quota[i] += 1
    picks = []
    for c, k in zip(classes, quota):
        picks.extend(np.flatnonzero(dataset.y == c)[:k].tolist())
    return dataset.subset(sorted(picks))


def split_train_test(dataset: Dataset, test_fraction: float, seed: int) -> Tuple[Dataset, Dataset]:
    order = np.random.default_rng([seed, 0x7E57]).permutation(len(dataset))
    cut = int(round(len(dataset) * (1.0 - test_fraction)))
    return dataset.subset(np.sort(order[:cut]), dataset.name), dataset.subset(np.sort(order[cut:]), dataset.name)


def partition(num_instances: int, users: Sequence[Hashable], seed: int) -> Partition:
    """Seeded shuffle, then round-robin; sizes differ by at most one"""
    if len(users) > num_instances:
        raise ConfigurationError(f"{len(users)} users but only {num_instances} instances")
    order = np.random.default_rng([seed, 0x9A27]).permutation(num_instances)
    return Partition({u: np.sort(order[i::len(users)]) for i, u in enumerate(users)})


def make_synthetic(num_instances: int, num_features: int, seed: int, num_classes: int = 2,
                   name: str = "synthetic") -> Dataset:
    """Linearly separable data on a 0.01 grid"""
    rng = np.random.default_rng([seed, 0x5717])
    X = np.round(rng.uniform(0.0, 1.0, size=(num_instances, num_features)), 2)
    if num_classes == 2:
        w = rng.normal(size=num_features)
        z = X @ w
        y = (z > np.median(z)).astype(np.int64)
    else:
        W = rng.normal(size=(num_features, num_classes))
        y = np.argmax(X @ W, axis=1).astype(np.int64)
    return Dataset(X, y, num_classes, name)


# ---------------------------------------------------------------------------
# Download and resolution
# ---------------------------------------------------------------------------

class BenchmarkDownloader:
    """
    Fetches benchmark files into the raw data directory
    """

    def __init__(self, data_dir=None, session=None):
        """
        Parameters:
        -----------
        data_dir : Path, optional
            Destination (default: RAW_DATA_DIR)
        session : requests.Session, optional
        """
        self.data_dir = Path(data_dir or RAW_DATA_DIR)
        self.session = session or requests.Session()

    def _fetch(self, url, max_retries=3):
        """
        Download one URL with retry logic

        Returns:
        --------
        bytes : response body, or None after exhausting retries
        """
        for attempt in range(max_retries):
            try:
                response = self.session.get(url, timeout=60)

                if response.status_code == 200:
                    return response.content

                elif response.status_code == 429:
                    wait_time = 30 * (attempt + 1)
                    print(f"  Rate limited. Waiting {wait_time}s before retry...")
                    time.sleep(wait_time)

                else:
                    print(f" Error {response.status_code} fetching {url}")
                    return None

            except requests.exceptions.Timeout:
                print(f"  Timeout on attempt {attempt + 1}/{max_retries}")
                time.sleep(5)

            except requests.exceptions.RequestException as e:
                print(f" Request failed: {e}")
                return None

        print(f" Failed after {max_retries} attempts")
        return None

    def download(self, name: str, force: bool = False) -> List[Path]:
        if name not in DATASET_URLS:
            raise ConfigurationError(f"no download source for dataset '{name}'")
        print(f"\n{'='*60}")
        print(f"Downloading {name} into {self.data_dir}")
        print(f"{'='*60}\n")
        self.data_dir.mkdir(parents=True, exist_ok=True)
        saved = []
        for filename, url in DATASET_URLS[name].items():
            target = self.data_dir / filename
            if target.exists() and not force:
                print(f" {filename}: already present")
                saved.append(target)
                continue
            body = self._fetch(url)
            if body is None:
                raise DatasetFormatError(f"could not download {url}")
            target.write_bytes(body)
            print(f" {filename}: {len(body) / 1024:.0f} KiB")
            saved.append(target)
        return saved


def _first_existing(directory: Path, *names: str) -> Path:
    for n in names:
        if (directory / n).is_file():
            return directory / n
    raise DatasetFormatError(
        f"none of {names} found in {directory}; fetch them with the --download flag"
    )


def resolve_dataset(name: str, seed: int, data_dir=None, subsample: Optional[int] = None,
                    test_subsample: Optional[int] = None, synthetic_instances: int = 600,
                    synthetic_features: int = 8) -> Tuple[Dataset, Dataset]:
    """Training and test splits for a named benchmark"""
    data_dir = Path(data_dir or RAW_DATA_DIR)
    if name == "synthetic":
        train, test = split_train_test(
            make_synthetic(synthetic_instances, synthetic_features, seed), 1.0 / 3.0, seed
        )
    elif name == "adult":
        train = load_libsvm(_first_existing(data_dir, "a9a", "a9a.txt"), ADULT_FEATURES, "adult")
        test = load_libsvm(_first_existing(data_dir, "a9a.t", "a9a.t.txt"), ADULT_FEATURES, "adult")
    elif name == "mnist":
        train = load_idx(_first_existing(data_dir, "train-images-idx3-ubyte", "train-images-idx3-ubyte.gz"),
                         _first_existing(data_dir, "train-labels-idx1-ubyte", "train-labels-idx1-ubyte.gz"))
        test = load_idx(_first_existing(data_dir, "t10k-images-idx3-ubyte", "t10k-images-idx3-ubyte.gz"),
                        _first_existing(data_dir, "t10k-labels-idx1-ubyte", "t10k-labels-idx1-ubyte.gz"))
    else:
        raise ConfigurationError(f"unknown dataset '{name}'")

    if subsample is not None:
        train = stratified_subsample(train, subsample)
    if test_subsample is not None:
        test = stratified_subsample(test, test_subsample)
    return train, test


def display_summary(dataset: Dataset):
    """
    Print summary statistics of a loaded dataset

    Parameters:
    -----------
    dataset : Dataset
    """
    if dataset is None or len(dataset) == 0:
        print("No data to display")
        return

    print(f"\n{'='*60}")
    print(f"DATASET SUMMARY: {dataset.name}")
    print(f"{'='*60}\n")
    print(f" Instances: {len(dataset):,}")
    print(f" Features:  {dataset.num_features}")
    print(f" Classes:   {dataset.num_classes}")
    density = float(np.count_nonzero(dataset.X)) / max(1, dataset.X.size)
    print(f" Density:   {density:.3f}")

    counts = pd.Series(dataset.y).value_counts().sort_index()
    print("\n Label distribution:")
    for label, count in counts.items():
        print(f"   {label}: {count:,} ({count / len(dataset) * 100:.1f}%)")
