"""Dataset ingestion, normalization, splitting, and synthetic generation.

CSV contract: UTF-8, one header row, comma separated, decimal-point reals.
Class labels may be arbitrary strings; they are re-indexed to contiguous ids
1..R in order of first appearance.  Real targets must parse as finite floats.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace

import numpy as np

CLASS = "class"
REAL = "real"


class DatasetFormatError(ValueError):
    """Raised for malformed dataset files, with row/column context."""


@dataclass(frozen=True)
class Dataset:
    """An immutable feature matrix with class ids (1..R) or real targets."""

    features: np.ndarray
    labels: np.ndarray
    kind: str
    name: str = ""

    def __post_init__(self):
        features = np.asarray(self.features, dtype=float)
        if features.ndim != 2:
            raise ValueError("features must be a 2-d array")
        if features.shape[0] < 1 or features.shape[1] < 1:
            raise ValueError("need n >= 1 rows and d >= 1 columns")
        if not np.all(np.isfinite(features)):
            raise ValueError("features contain non-finite values")
        if self.kind not in (CLASS, REAL):
            raise ValueError(f"unknown label kind: {self.kind!r}")
        if self.kind == CLASS:
            labels = np.asarray(self.labels, dtype=int)
            present = np.unique(labels)
            if len(labels) and not np.array_equal(
                present, np.arange(1, present[-1] + 1)
            ):
                raise ValueError("class ids must be contiguous 1..R")
        else:
            labels = np.asarray(self.labels, dtype=float)
            if not np.all(np.isfinite(labels)):
                raise ValueError("labels contain non-finite values")
        if labels.shape != (features.shape[0],):
            raise ValueError("labels must be a vector matching the row count")
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "labels", labels)

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]

    @property
    def n_classes(self) -> int:
        if self.kind != CLASS:
            raise ValueError("n_classes is only defined for classed datasets")
        return int(self.labels.max())

    def subset(self, idx, name=None) -> "Dataset":
        idx = np.asarray(idx)
        sub = Dataset.__new__(Dataset)
        # bypass __post_init__ contiguity check: a subset may drop classes,
        # callers that need re-indexing do it explicitly
        object.__setattr__(sub, "features", self.features[idx])
        object.__setattr__(sub, "labels", self.labels[idx])
        object.__setattr__(sub, "kind", self.kind)
        object.__setattr__(sub, "name", self.name if name is None else name)
        return sub

    def with_features(self, features) -> "Dataset":
        return replace(self, features=np.asarray(features, dtype=float))


@dataclass(frozen=True)
class NormStats:
    """Per-column mean and (floored) standard deviation fitted on train data."""

    mean: np.ndarray
    std: np.ndarray

    def apply(self, features: np.ndarray) -> np.ndarray:
        return (np.asarray(features, dtype=float) - self.mean) / self.std

    def unapply(self, features: np.ndarray) -> np.ndarray:
        return np.asarray(features, dtype=float) * self.std + self.mean


@dataclass(frozen=True)
class SplitSpec:
    """A seeded partition of [0, n) into folds whose sizes differ by <= 1."""

    n_folds: int
    seed: int
    assignment: np.ndarray = field(repr=False)

    def fold_indices(self, fold: int):
        return np.flatnonzero(self.assignment == fold)

    def to_json(self) -> str:
        return json.dumps(
            {
                "seed": int(self.seed),
                "n_folds": int(self.n_folds),
                "assignment": [int(a) for a in self.assignment],
            }
        )

    @staticmethod
    def from_json(text: str) -> "SplitSpec":
        obj = json.loads(text)
        return SplitSpec(
            n_folds=obj["n_folds"],
            seed=obj["seed"],
            assignment=np.asarray(obj["assignment"], dtype=int),
        )


def load_csv(path, label_column: str, label_kind: str) -> Dataset:
    """Load a dataset from CSV.

    Parameters
    ----------
    path : path-like
    label_column : str
        Header name of the label column.
    label_kind : "class" or "real"
        Class labels are taken verbatim (any string) and re-indexed to 1..R
        by first appearance; real labels must be finite floats.

    Raises
    ------
    DatasetFormatError
        On a missing column, a non-numeric or non-finite cell, or an empty
        file.  Messages include the offending row and column.
    """
    if label_kind not in (CLASS, REAL):
        raise ValueError(f"label_kind must be 'class' or 'real', got {label_kind!r}")
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DatasetFormatError(f"{path}: file is empty") from None
        header = [name.strip() for name in header]
        if label_column not in header:
            raise DatasetFormatError(
                f"{path}: missing label column {label_column!r} "
                f"(columns: {', '.join(header)})"
            )
        label_idx = header.index(label_column)
        rows = []
        raw_labels = []
        for row_num, row in enumerate(reader, start=1):
            if not row:
                continue
            if len(row) != len(header):
                raise DatasetFormatError(
                    f"{path}: row {row_num} has {len(row)} cells, expected {len(header)}"
                )
            values = []
            for col_idx, cell in enumerate(row):
                if col_idx == label_idx:
                    continue
                value = _parse_real(path, cell, row_num, header[col_idx])
                values.append(value)
            rows.append(values)
            raw_labels.append(row[label_idx].strip())
    if not rows:
        raise DatasetFormatError(f"{path}: no data rows")

    features = np.asarray(rows, dtype=float)
    if label_kind == CLASS:
        seen: dict[str, int] = {}
        labels = np.empty(len(raw_labels), dtype=int)
        for i, raw in enumerate(raw_labels):
            labels[i] = seen.setdefault(raw, len(seen) + 1)
    else:
        labels = np.array(
            [
                _parse_real(path, raw, row_num, label_column)
                for row_num, raw in enumerate(raw_labels, start=1)
            ]
        )
    name = getattr(path, "name", str(path))
    return Dataset(features=features, labels=labels, kind=label_kind, name=name)


def _parse_real(path, cell, row_num, col_name):
    try:
        value = float(cell)
    except ValueError:
        raise DatasetFormatError(
            f"{path}: non-numeric cell {cell!r} at row {row_num}, column {col_name!r}"
        ) from None
    if not np.isfinite(value):
        raise DatasetFormatError(
            f"{path}: non-finite value {cell!r} at row {row_num}, column {col_name!r}"
        )
    return value


def save_csv(path, ds: Dataset, label_column: str = "label") -> None:
    """Write a dataset as CSV; floats serialized via repr so the file
    round-trips through :func:`load_csv` exactly."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        cols = [f"x{i + 1}" for i in range(ds.d)] + [label_column]
        fh.write(",".join(cols) + "\n")
        for row, label in zip(ds.features, ds.labels):
            cells = [repr(float(v)) for v in row]
            cells.append(str(int(label)) if ds.kind == CLASS else repr(float(label)))
            fh.write(",".join(cells) + "\n")


# std entries this close to zero (relative to the mean's size) are treated
# as constant columns and floored to 1
_STD_FLOOR_REL = 1e-12


def zscore_fit_apply(train: Dataset, others=()) -> tuple[NormStats, list[Dataset]]:
    """Fit column-wise z-scoring on ``train`` only, apply to all datasets.

    Uses the population (divide-by-n) standard deviation.  Constant columns
    get std floored to 1 so they map to zeros rather than dividing by zero.
    Returns the stats and the normalized datasets, ``train`` first.
    """
    mean = train.features.mean(axis=0)
    std = train.features.std(axis=0)
    floor = _STD_FLOOR_REL * (1.0 + np.abs(mean))
    std = np.where(std <= floor, 1.0, std)
    stats = NormStats(mean=mean, std=std)
    out = []
    for ds in (train, *others):
        if ds.d != train.d:
            raise ValueError(
                f"dimension mismatch: train has d={train.d}, {ds.name or 'dataset'} has d={ds.d}"
            )
        out.append(ds.with_features(stats.apply(ds.features)))
    return stats, out


def kfold(n: int, n_folds: int, seed: int) -> SplitSpec:
    """Assign each of n points to one of n_folds folds, sizes within 1."""
    if n_folds < 2:
        raise ValueError("need at least 2 folds")
    if n < n_folds:
        raise ValueError(f"cannot split n={n} points into {n_folds} folds")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    assignment = np.empty(n, dtype=int)
    assignment[perm] = np.arange(n) % n_folds
    return SplitSpec(n_folds=n_folds, seed=seed, assignment=assignment)


def sin_targets(features: np.ndarray, c1: float, decay: float) -> np.ndarray:
    """Noise-free targets y_j = sum_i sin(c_i x_ji) with c_i = decay * c_{i-1}."""
    d = features.shape[1]
    c = c1 * decay ** np.arange(d)
    return np.sin(features * c).sum(axis=1)


def synth_sin(
    n: int,
    d: int,
    c1: float = 50.0,
    decay: float = 0.6,
    rotate: bool = False,
    noise_std: float = 0.1,
    seed: int = 0,
) -> Dataset:
    """Synthetic regression data: sums of sines at geometrically decaying
    frequencies, optionally followed by a random rotation of feature space.

    Features are uniform on [0,1]^d.  Targets are generated before the
    rotation is applied, so ``rotate`` changes features only.
    """
    if d < 1:
        raise ValueError("d must be >= 1")
    if not 0.0 < decay <= 1.0:
        raise ValueError("decay must be in (0, 1]")
    rng = np.random.default_rng(seed)
    features = rng.uniform(0.0, 1.0, size=(n, d))
    targets = sin_targets(features, c1, decay)
    if noise_std > 0.0:
        targets = targets + noise_std * rng.standard_normal(n)
    if rotate:
        features = features @ _rotation_from_rng(rng, d)
    return Dataset(features=features, labels=targets, kind=REAL, name="synth_sin")


def random_rotation(d: int, seed: int) -> np.ndarray:
    """A seeded d x d rotation matrix (orthogonal, det +1)."""
    if d < 1:
        raise ValueError("d must be >= 1")
    return _rotation_from_rng(np.random.default_rng(seed), d)


def _rotation_from_rng(rng, d):
    gauss = rng.standard_normal((d, d))
    q, r = np.linalg.qr(gauss)
    q = q * np.sign(np.diag(r))  # make the factorization unique
    if np.linalg.det(q) < 0:
        q[:, -1] = -q[:, -1]
    return q
