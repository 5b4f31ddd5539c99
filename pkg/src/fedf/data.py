"""Datasets, synthetic generators, CSV ingestion and shard splitting."""

import csv
import math
from dataclasses import dataclass, field

import numpy as np


class DataError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class DataShard:
    """A block of samples held by one party.

    ``targets`` is a float matrix (samples x outputs) for regression or an
    integer vector of class indices for classification.
    """

    features: np.ndarray
    targets: np.ndarray
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        x = np.ascontiguousarray(self.features, dtype=np.float64)
        if x.ndim == 1:
            x = x.reshape(-1, 1)
        y = np.asarray(self.targets)
        if np.issubdtype(y.dtype, np.integer):
            y = np.ascontiguousarray(y.reshape(-1), dtype=np.int64)
        else:
            y = np.ascontiguousarray(y, dtype=np.float64)
            if y.ndim == 1:
                y = y.reshape(-1, 1)
        if x.ndim != 2:
            raise DataError(f"features must be 2-D, got shape {x.shape}")
        if x.shape[0] < 1:
            raise DataError("a shard needs at least one sample")
        if y.shape[0] != x.shape[0]:
            raise DataError(f"{x.shape[0]} feature rows but {y.shape[0]} targets")
        if not np.all(np.isfinite(x)) or (y.dtype == np.float64 and not np.all(np.isfinite(y))):
            raise DataError("non-finite value in shard")
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "targets", y)

    @property
    def sample_count(self):
        return self.features.shape[0]

    @property
    def input_dim(self):
        return self.features.shape[1]

    @property
    def is_classification(self):
        return self.targets.dtype == np.int64

    def take(self, index):
        return DataShard(self.features[index], self.targets[index], dict(self.meta))

    def __len__(self):
        return self.sample_count


SYNTHETIC_KINDS = ("linear", "logistic-blobs", "quadratic")


def generate_synthetic(kind, n, dim, noise_sigma, seed, n_classes=2):
    """Draw a reproducible synthetic dataset.

    ``linear`` records its ground-truth weights and bias in ``meta``.
    For ``logistic-blobs`` ``noise_sigma`` is the per-class spread around
    the class centres.
    """
    if n < 1:
        raise DataError("n must be >= 1")
    if dim < 1:
        raise DataError("dim must be >= 1")
    if noise_sigma < 0:
        raise DataError("noise_sigma must be >= 0")
    rng = np.random.default_rng(seed)
    meta = {"kind": kind, "n": n, "dim": dim, "noise_sigma": noise_sigma, "seed": seed}
    if kind == "linear":
        w = rng.normal(size=dim)
        b = float(rng.normal())
        x = rng.normal(size=(n, dim))
        y = x @ w + b + noise_sigma * rng.normal(size=n)
        meta["ground_truth"] = {"weights": w.tolist(), "bias": b}
        return DataShard(x, y.reshape(-1, 1), meta)
    if kind == "logistic-blobs":
        if n_classes < 2:
            raise DataError("logistic-blobs needs at least 2 classes")
        centres = rng.normal(scale=1.5, size=(n_classes, dim))
        labels = rng.integers(0, n_classes, size=n)
        x = centres[labels] + noise_sigma * rng.normal(size=(n, dim))
        meta["n_classes"] = n_classes
        meta["centres"] = centres.tolist()
        return DataShard(x, labels.astype(np.int64), meta)
    if kind == "quadratic":
        a = rng.normal(size=dim)
        w = rng.normal(size=dim)
        x = rng.uniform(-1.0, 1.0, size=(n, dim))
        y = (x**2) @ a + x @ w + noise_sigma * rng.normal(size=n)
        meta["ground_truth"] = {"quadratic": a.tolist(), "linear": w.tolist()}
        return DataShard(x, y.reshape(-1, 1), meta)
    raise DataError(f"unknown synthetic kind {kind!r}; expected one of {SYNTHETIC_KINDS}")


@dataclass(frozen=True)
class SplitSpec:
    n_parts: int
    min_fraction: float
    seed: int
    concentration: float = 5.0

    def validate(self):
        if self.n_parts < 1:
            raise DataError("n_parts must be >= 1")
        if not 0 < self.min_fraction <= 1.0 / self.n_parts + 1e-12:
            raise DataError(
                f"infeasible min_fraction {self.min_fraction} for {self.n_parts} parts"
            )


def shard_sizes(total, spec):
    """Integer shard sizes: a guaranteed floor plus a Dirichlet share of the rest."""
    spec.validate()
    if total < spec.n_parts:
        raise DataError(f"cannot split {total} samples into {spec.n_parts} parts")
    if spec.n_parts == 1:
        return [total]
    floor = math.ceil(spec.min_fraction * total - 1e-9)
    rest = total - floor * spec.n_parts
    if rest < 0:
        raise DataError(
            f"infeasible min_fraction {spec.min_fraction}: "
            f"{spec.n_parts} x {floor} > {total} samples"
        )
    rng = np.random.default_rng(spec.seed)
    share = rng.dirichlet(np.full(spec.n_parts, spec.concentration)) * rest
    extra = np.floor(share).astype(int)
    # largest remainder, ties to the lower index
    leftover = rest - int(extra.sum())
    order = sorted(range(spec.n_parts), key=lambda i: (-(share[i] - extra[i]), i))
    for i in order[:leftover]:
        extra[i] += 1
    return [floor + int(e) for e in extra]


def split(data, spec):
    """Partition ``data`` into ``spec.n_parts`` disjoint shards.

    Samples are shuffled before assignment; with one part the input is
    returned unchanged.
    """
    sizes = shard_sizes(data.sample_count, spec)
    if spec.n_parts == 1:
        return [data]
    perm = np.random.default_rng([spec.seed, 1]).permutation(data.sample_count)
    bounds = np.cumsum([0] + sizes)
    return [data.take(perm[lo:hi]) for lo, hi in zip(bounds[:-1], bounds[1:])]


def holdout(data, test_fraction, seed):
    """Split off a test set; returns (train, test)."""
    if not 0 < test_fraction < 1:
        raise DataError("test_fraction must be in (0, 1)")
    n_test = max(1, int(round(test_fraction * data.sample_count)))
    if n_test >= data.sample_count:
        raise DataError("test split leaves no training samples")
    perm = np.random.default_rng([seed, 2]).permutation(data.sample_count)
    return data.take(np.sort(perm[n_test:])), data.take(np.sort(perm[:n_test]))


@dataclass(frozen=True)
class CsvSchema:
    n_features: int
    n_targets: int = 1
    header: bool = False
    classification: bool = False
    delimiter: str = ","


def load_csv(path, schema):
    """Read numeric rows; the first ``n_features`` columns are features."""
    width = schema.n_features + schema.n_targets
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh, delimiter=schema.delimiter)
        for row in reader:
            lineno = reader.line_num
            if lineno == 1 and schema.header:
                continue
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != width:
                raise DataError(f"{path}: line {lineno}: expected {width} columns, got {len(row)}")
            try:
                values = [float(cell) for cell in row]
            except ValueError as exc:
                raise DataError(f"{path}: line {lineno}: {exc}") from None
            if not all(math.isfinite(v) for v in values):
                raise DataError(f"{path}: line {lineno}: non-finite value")
            rows.append(values)
    if not rows:
        raise DataError(f"{path}: no data rows")
    table = np.array(rows, dtype=np.float64)
    x = table[:, : schema.n_features]
    y = table[:, schema.n_features :]
    if schema.classification:
        if schema.n_targets != 1 or not np.all(y == np.round(y)):
            raise DataError(f"{path}: class targets must be a single integer column")
        y = y[:, 0].astype(np.int64)
    return DataShard(x, y, {"source": str(path)})


def save_csv(path, data, header=None):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        if header:
            writer.writerow(header)
        ys = data.targets.reshape(data.sample_count, -1)
        for x, y in zip(data.features, ys):
            writer.writerow([repr(float(v)) for v in x] + [repr(v.item()) for v in y])
