"""Datasets: synthetic generators, IDX ingestion and seeded batching."""

from __future__ import annotations

import hashlib
import io
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

# IDX type code -> big-endian numpy dtype
IDX_DTYPES = {
    0x08: np.dtype(">u1"),
    0x09: np.dtype(">i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}
SYNTHETIC_KINDS = ("blobs", "moons", "spirals")


class IDXFormatError(ValueError):
    pass


class IDXTruncatedError(IDXFormatError):
    def __init__(self, expected: int, actual: int):
        super().__init__(f"IDX payload truncated: expected {expected} bytes, got {actual}")
        self.expected = expected
        self.actual = actual


@dataclass(frozen=True)
class IDXHeader:
    type_code: int
    dims: tuple[int, ...]

    @property
    def dtype(self) -> np.dtype:
        return IDX_DTYPES[self.type_code]


def parse_idx(data: bytes) -> tuple[np.ndarray, IDXHeader]:
    """Decode an IDX blob into a row-major array plus its header."""
    data = bytes(data)
    if len(data) < 4:
        raise IDXFormatError(f"IDX header needs 4 magic bytes, got {data.hex(' ') or 'nothing'}")
    magic = data[:4]
    if magic[0] != 0 or magic[1] != 0 or magic[2] not in IDX_DTYPES or magic[3] == 0:
        raise IDXFormatError(f"bad IDX magic bytes: {magic.hex(' ')}")
    type_code, rank = magic[2], magic[3]
    header_len = 4 + 4 * rank
    if len(data) < header_len:
        raise IDXTruncatedError(header_len, len(data))
    dims = struct.unpack(f">{rank}I", data[4:header_len])
    dtype = IDX_DTYPES[type_code]
    expected = math.prod(dims) * dtype.itemsize
    actual = len(data) - header_len
    if actual != expected:
        if actual < expected:
            raise IDXTruncatedError(expected, actual)
        raise IDXFormatError(f"IDX payload has {actual - expected} trailing bytes (expected {expected})")
    arr = np.frombuffer(data, dtype=dtype, offset=header_len).reshape(dims)
    return arr.astype(dtype.newbyteorder("=")), IDXHeader(type_code, tuple(dims))


def serialize_idx(arr: np.ndarray, type_code: int = 0x08) -> bytes:
    if type_code not in IDX_DTYPES:
        raise IDXFormatError(f"unknown IDX type code {type_code:#04x}")
    arr = np.asarray(arr)
    if arr.ndim == 0 or arr.ndim > 255:
        raise IDXFormatError(f"IDX rank must be in [1, 255], got {arr.ndim}")
    dtype = IDX_DTYPES[type_code]
    out = io.BytesIO()
    out.write(bytes([0, 0, type_code, arr.ndim]))
    out.write(struct.pack(f">{arr.ndim}I", *arr.shape))
    out.write(np.ascontiguousarray(arr, dtype=dtype).tobytes())
    return out.getvalue()


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    n_classes: int
    splits: dict[str, np.ndarray] = field(default_factory=dict)
    name: str = ""

    def __post_init__(self):
        if self.features.ndim != 2 or self.features.shape[0] != self.labels.shape[0]:
            raise ValueError("features must be (n, d) with one label per row")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise ValueError(f"labels must lie in [0, {self.n_classes})")
        seen = np.zeros(len(self), dtype=int)
        for idx in self.splits.values():
            np.add.at(seen, idx, 1)
        if (seen > 1).any():
            raise ValueError("splits overlap")

    def __len__(self) -> int:
        return self.labels.shape[0]

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    @property
    def id(self) -> str:
        """Content hash over raw little-endian bit patterns (platform-stable)."""
        h = hashlib.sha256()
        h.update(struct.pack("<qqq", len(self), self.n_features, self.n_classes))
        h.update(self.features.astype("<f8").tobytes())
        h.update(self.labels.astype("<i8").tobytes())
        for name in sorted(self.splits):
            h.update(name.encode())
            h.update(np.asarray(self.splits[name]).astype("<i8").tobytes())
        return h.hexdigest()[:16]

    def subset(self, split: str) -> "Dataset":
        idx = self.splits[split]
        return Dataset(
            self.features[idx], self.labels[idx], self.n_classes,
            {split: np.arange(idx.size)}, f"{self.name}:{split}",
        )

    def train_test(self) -> tuple["Dataset", "Dataset"]:
        return self.subset("train"), self.subset("test")

    def to_csv(self, path) -> None:
        split_of = np.full(len(self), "", dtype=object)
        for name, idx in self.splits.items():
            split_of[idx] = name
        cols = [f"x{j}" for j in range(self.n_features)]
        with open(path, "w", newline="\n") as f:
            f.write(",".join(cols + ["label", "split"]) + "\n")
            for row, y, s in zip(self.features, self.labels, split_of):
                f.write(",".join(f"{v:.17g}" for v in row) + f",{y},{s}\n")


def _standardize(x: np.ndarray) -> np.ndarray:
    std = x.std(axis=0)
    std[std == 0] = 1.0
    return (x - x.mean(axis=0)) / std


def _class_counts(n: int, k: int) -> list[int]:
    return [n // k + (c < n % k) for c in range(k)]


def _split(n: int, test_fraction: float, rng: np.random.Generator) -> dict[str, np.ndarray]:
    perm = rng.permutation(n)
    n_test = int(round(test_fraction * n))
    return {"train": np.sort(perm[n_test:]), "test": np.sort(perm[:n_test])}


def make_synthetic(
    kind: str,
    n: int,
    noise: float,
    seed: int,
    n_classes: int | None = None,
    test_fraction: float = 0.25,
    turns: float = 1.0,
) -> Dataset:
    """Two-dimensional toy classification tasks.

    ``blobs`` places one isotropic Gaussian per class on a circle, ``moons``
    is the interleaved half-circles task (always 2 classes) and ``spirals``
    winds ``n_classes`` arms around the origin ``turns`` times.  Features are
    standardized per dimension.
    """
    if kind not in SYNTHETIC_KINDS:
        raise ValueError(f"kind must be one of {SYNTHETIC_KINDS}, got {kind!r}")
    if n < 10:
        raise ValueError("n must be >= 10")
    if noise < 0:
        raise ValueError("noise must be >= 0")
    if not 0.0 <= test_fraction < 1.0:
        raise ValueError("test_fraction must lie in [0, 1)")
    if kind == "moons":
        if n_classes not in (None, 2):
            raise ValueError("moons has exactly 2 classes")
        k = 2
    else:
        k = n_classes or (3 if kind == "blobs" else 2)
    rng = np.random.default_rng(seed)
    xs, ys = [], []
    for c, m in enumerate(_class_counts(n, k)):
        if kind == "blobs":
            angle = 2 * np.pi * c / k
            center = 3.0 * np.array([np.cos(angle), np.sin(angle)])
            pts = np.tile(center, (m, 1))
        elif kind == "moons":
            s = rng.uniform(0.0, np.pi, m)
            if c == 0:
                pts = np.stack([np.cos(s), np.sin(s)], axis=1)
            else:
                pts = np.stack([1.0 - np.cos(s), 0.5 - np.sin(s)], axis=1)
        else:
            r = rng.uniform(0.05, 1.0, m)
            theta = 2 * np.pi * (turns * r + c / k)
            pts = np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1)
        xs.append(pts + noise * rng.normal(size=pts.shape))
        ys.append(np.full(m, c))
    x = np.concatenate(xs)
    y = np.concatenate(ys).astype(np.int64)
    order = rng.permutation(n)
    x, y = _standardize(x[order]), y[order]
    return Dataset(x, y, k, _split(n, test_fraction, rng), f"{kind}-{n}-{noise:g}-{seed}")


def load_idx(images_path, labels_path, test_fraction: float = 0.0, seed: int = 0) -> Dataset:
    """Build a Dataset from an IDX image file and its label file.

    Pixels are flattened per example and scaled to [0, 1] by 255.
    """
    images, ih = parse_idx(Path(images_path).read_bytes())
    labels, lh = parse_idx(Path(labels_path).read_bytes())
    if lh.dims[0] != ih.dims[0] or labels.ndim != 1:
        raise IDXFormatError(f"label file {lh.dims} does not match image file {ih.dims}")
    x = images.reshape(ih.dims[0], -1).astype(np.float64) / 255.0
    y = labels.astype(np.int64)
    rng = np.random.default_rng(seed)
    return Dataset(x, y, int(y.max()) + 1, _split(len(y), test_fraction, rng), Path(images_path).stem)


def batches(dataset: Dataset | int, batch_size: int, seed: int, epoch: int) -> list[np.ndarray]:
    """Seeded permutation of example indices for one epoch, cut into batches.

    The last batch may be short.  ``dataset`` may also be an example count.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    n = dataset if isinstance(dataset, int) else len(dataset)
    perm = np.random.default_rng([seed, epoch]).permutation(n)
    return [perm[i:i + batch_size] for i in range(0, n, batch_size)]
