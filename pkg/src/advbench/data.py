"""Dataset container, the synthetic desk-scale generator, and the binary format.

Samples live in [-1, 1]^d.  The synthetic generator places one Gaussian
cluster per class, with cluster spread tuned so a small network separates
them well above 90% yet targeted perturbations of a few percent of the
dynamic range still cross the decision boundaries.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .seeding import substream
from .serial import DATASET_MAGIC, FormatError, Reader, pack_f64, pack_u32

SPLIT_NAMES = ("train", "validation", "test")
_SPLIT_CODE = {name: i for i, name in enumerate(SPLIT_NAMES)}

DEFAULT_RATIOS = (0.5, 0.3, 0.2)
# Cluster geometry defaults: centers of equal norm in near-orthogonal
# directions, spread small enough that an L-inf budget of ~3% of the
# dynamic range reaches every other class region.
DEFAULT_CENTER_NORM = 0.42
DEFAULT_CLUSTER_STD = 0.13


@dataclass
class Dataset:
    X: np.ndarray
    y: np.ndarray
    split: np.ndarray
    k: int

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        self.split = np.asarray(self.split, dtype=np.int8)
        if self.X.ndim != 2 or len(self.y) != len(self.X) or len(self.split) != len(self.X):
            raise ValueError("dataset arrays are inconsistent")
        if self.k < 2:
            raise ValueError(f"need at least 2 classes, got k={self.k}")
        if self.y.size and (self.y.min() < 0 or self.y.max() >= self.k):
            raise ValueError("labels out of range")
        if self.X.size and (self.X.min() < -1.0 or self.X.max() > 1.0):
            raise ValueError("sample values outside [-1, 1]")

    @property
    def n(self) -> int:
        return len(self.X)

    @property
    def d(self) -> int:
        return self.X.shape[1]

    def indices(self, split_name: str) -> np.ndarray:
        return np.flatnonzero(self.split == _SPLIT_CODE[split_name])

    def arrays(self, split_name: str) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(X, y, global sample ids) for one split."""
        idx = self.indices(split_name)
        return self.X[idx], self.y[idx], idx


def _split_counts(per_class: int, ratios) -> tuple[int, int, int]:
    train_n = int(round(per_class * ratios[0]))
    val_n = int(round(per_class * ratios[1]))
    test_n = per_class - train_n - val_n
    if min(train_n, val_n, test_n) <= 0:
        raise ValueError(f"split ratios {ratios} leave an empty split for per_class={per_class}")
    return train_n, val_n, test_n


def synth_dataset(
    classes: int,
    dim: int,
    per_class: int,
    seed: int,
    *,
    center_norm: float = DEFAULT_CENTER_NORM,
    cluster_std: float = DEFAULT_CLUSTER_STD,
    ratios=DEFAULT_RATIOS,
) -> Dataset:
    """Gaussian class clusters clipped into [-1, 1]^dim, split per ratios."""
    if classes < 2:
        raise ValueError(f"need at least 2 classes, got {classes}")
    if dim < 2:
        raise ValueError(f"need at least 2 dimensions, got {dim}")
    if per_class < 10:
        raise ValueError(
            f"per_class={per_class} is insufficient for calibration, need at least 10"
        )
    rng = substream(seed, "synth-dataset")
    directions = rng.standard_normal((classes, dim))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    centers = center_norm * directions

    train_n, val_n, _ = _split_counts(per_class, ratios)
    X = np.empty((classes * per_class, dim))
    y = np.empty(classes * per_class, dtype=np.int64)
    split = np.empty(classes * per_class, dtype=np.int8)
    for c in range(classes):
        block = slice(c * per_class, (c + 1) * per_class)
        X[block] = np.clip(
            centers[c] + cluster_std * rng.standard_normal((per_class, dim)), -1.0, 1.0
        )
        y[block] = c
        codes = np.full(per_class, _SPLIT_CODE["test"], dtype=np.int8)
        codes[:train_n] = _SPLIT_CODE["train"]
        codes[train_n : train_n + val_n] = _SPLIT_CODE["validation"]
        split[block] = codes
    return Dataset(X=X, y=y, split=split, k=classes)


def save_dataset(dataset: Dataset, path) -> None:
    """Write the flat binary format: magic, u32 {k, d, n}, then records."""
    parts = [DATASET_MAGIC, pack_u32(dataset.k, dataset.d, dataset.n)]
    for i in range(dataset.n):
        parts.append(pack_f64(dataset.X[i]))
        parts.append(pack_u32(int(dataset.y[i])))
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def load_external(path, ratios=DEFAULT_RATIOS) -> Dataset:
    """Read the flat binary dataset format and assign splits per ratios.

    The file carries no split tags; splits are assigned per class in file
    order, so a save/load round trip preserves bytes but not tags.
    """
    with open(path, "rb") as fh:
        blob = fh.read()
    r = Reader(blob)
    r.expect_magic(DATASET_MAGIC)
    k = r.u32("class count k")
    d = r.u32("dimension d")
    n = r.u32("sample count n")
    if k == 0:
        raise FormatError("header declares k=0 classes", offset=5)
    if d == 0:
        raise FormatError("header declares d=0 dimensions", offset=9)

    X = np.empty((n, d))
    y = np.empty(n, dtype=np.int64)
    for i in range(n):
        row_offset = r.pos
        X[i] = r.f64_array(d, f"sample {i} values")
        bad = np.flatnonzero((X[i] < -1.0) | (X[i] > 1.0) | ~np.isfinite(X[i]))
        if bad.size:
            j = int(bad[0])
            raise FormatError(
                f"sample {i} coordinate {j} = {X[i][j]!r} outside [-1, 1]",
                offset=row_offset + 8 * j,
            )
        label_offset = r.pos
        y[i] = r.u32(f"sample {i} label")
        if y[i] >= k:
            raise FormatError(f"sample {i} label {y[i]} >= k={k}", offset=label_offset)
    r.done()

    split = np.empty(n, dtype=np.int8)
    for c in range(k):
        members = np.flatnonzero(y == c)
        if members.size == 0:
            continue
        t = int(round(members.size * ratios[0]))
        v = int(round(members.size * ratios[1]))
        split[members] = _SPLIT_CODE["test"]
        split[members[:t]] = _SPLIT_CODE["train"]
        split[members[t : t + v]] = _SPLIT_CODE["validation"]
    return Dataset(X=X, y=y, split=split, k=k)
