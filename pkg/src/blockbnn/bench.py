"""Benchmark data: synthetic regression functions, CSV ingestion, metrics.

The four synthetic functions follow the standard interaction-detection
suite: ten features drawn i.i.d. uniform on (0, 1], response f(x) plus
N(0, noise_var) noise. Data generation runs on the Philox counter-based
generator, so identical seeds are bit-identical across platforms.
"""

from __future__ import annotations

import csv as _csv
import math
from dataclasses import dataclass, field

import numpy as np

from .rngs import stream

SYNTHETIC_DIM = 10


@dataclass(frozen=True, eq=False)
class Dataset:
    x: np.ndarray                       # (n, p)
    y: np.ndarray                       # (n,)
    feature_names: tuple[str, ...]
    seed: int = 0
    standardized: bool = False
    feature_mean: np.ndarray = field(default=None)
    feature_std: np.ndarray = field(default=None)

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def p(self) -> int:
        return self.x.shape[1]


@dataclass(frozen=True)
class GroundTruth:
    fid: int
    interactions: tuple[frozenset, ...]  # 0-based feature index sets
    noise_var: float


def _f1(x):
    return (10.0 * np.sin(np.pi * x[:, 0] * x[:, 1]) + 20.0 * (x[:, 2] - 0.5) ** 2
            + 10.0 * x[:, 3] + 5.0 * x[:, 4])


def _f2(x):
    return (10.0 * np.exp(x[:, 0] * x[:, 1]) - 20.0 * np.cos(x[:, 2] + x[:, 3] + x[:, 4])
            + 7.0 * np.arcsin(x[:, 8] * x[:, 9]))


def _f3(x):
    return (np.exp(np.abs(x[:, 0] * x[:, 1]) + 1.0)
            + np.exp(np.abs(x[:, 2] + x[:, 3]) + 1.0)
            - 19.0 * np.cos(x[:, 4] + x[:, 5])
            - 10.0 * np.sqrt(x[:, 7] ** 2 + x[:, 8] ** 2 + x[:, 9] ** 2))


def _f4(x):
    return (1.0 / (1.0 + x[:, 0] ** 2 + x[:, 1] ** 2 + x[:, 2] ** 2)
            - 5.0 * np.sqrt(np.exp(x[:, 3] + x[:, 4]))
            + 10.0 * np.abs(x[:, 5] + x[:, 6])
            + 6.0 * x[:, 7] * x[:, 8] * x[:, 9])


SYNTHETIC_FUNCTIONS = {
    1: (_f1, (frozenset({0, 1}),)),
    2: (_f2, (frozenset({0, 1}), frozenset({2, 3, 4}), frozenset({8, 9}))),
    3: (_f3, (frozenset({0, 1}), frozenset({2, 3}), frozenset({4, 5}),
              frozenset({7, 8, 9}))),
    4: (_f4, (frozenset({0, 1, 2}), frozenset({3, 4}), frozenset({5, 6}),
              frozenset({7, 8, 9}))),
}


def synthetic_function(fid: int):
    if fid not in SYNTHETIC_FUNCTIONS:
        raise ValueError(f"unknown synthetic function id {fid}; known: 1..4")
    return SYNTHETIC_FUNCTIONS[fid][0]


def generate_synthetic(fid: int, n: int, noise_var: float = 1.0,
                       seed: int = 0) -> tuple[Dataset, GroundTruth]:
    """Draw n samples of synthetic function `fid` with N(0, noise_var) noise."""
    if n < 1:
        raise ValueError("n must be >= 1")
    fn, interactions = SYNTHETIC_FUNCTIONS.get(fid, (None, None))
    if fn is None:
        raise ValueError(f"unknown synthetic function id {fid}; known: 1..4")
    rng = stream(seed, "synth", fid)
    x = 1.0 - rng.random((n, SYNTHETIC_DIM))  # uniform on (0, 1]
    y = fn(x)
    if noise_var > 0.0:
        y = y + math.sqrt(noise_var) * rng.standard_normal(n)
    names = tuple(f"x{i + 1}" for i in range(SYNTHETIC_DIM))
    ds = Dataset(x=x, y=y, feature_names=names, seed=seed,
                 feature_mean=x.mean(axis=0), feature_std=x.std(axis=0))
    return ds, GroundTruth(fid=fid, interactions=interactions, noise_var=noise_var)


def synthetic_split(fid: int, n_train: int = 5000, n_test: int = 5000,
                    noise_var: float = 1.0, seed: int = 0):
    """Independent train/test draws of the same function."""
    train, gt = generate_synthetic(fid, n_train, noise_var, seed=seed)
    test, _ = generate_synthetic(fid, n_test, noise_var, seed=seed + 1_000_003)
    return train, test, gt


# ---------------------------------------------------------------------------
# CSV ingestion.
# ---------------------------------------------------------------------------

class CsvFormatError(ValueError):
    pass


def ingest_csv(path, target_column: str, standardize: bool = True) -> Dataset:
    """Read a headered numeric CSV into a dataset.

    Features are standardized to mean 0 / std 1 when flagged; the target is
    left raw with the per-feature stats recorded either way.
    """
    with open(path, "r", newline="", encoding="utf-8") as handle:
        reader = _csv.reader(handle)
        try:
            header = next(reader)
        except StopIteration:
            raise CsvFormatError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        if target_column not in header:
            raise CsvFormatError(f"{path}: missing target column {target_column!r} "
                                 f"(columns: {header})")
        rows = []
        for ri, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise CsvFormatError(f"{path}: row {ri} has {len(row)} cells, "
                                     f"expected {len(header)}")
            vals = []
            for ci, cell in enumerate(row):
                try:
                    vals.append(float(cell))
                except ValueError:
                    raise CsvFormatError(
                        f"{path}: non-numeric cell {cell!r} at row {ri}, "
                        f"column {ci + 1} ({header[ci]!r})") from None
            rows.append(vals)
    if not rows:
        raise CsvFormatError(f"{path}: no data rows")
    table = np.asarray(rows, dtype=np.float64)
    if not np.all(np.isfinite(table)):
        raise CsvFormatError(f"{path}: non-finite values after parsing")
    t_idx = header.index(target_column)
    keep = [i for i in range(len(header)) if i != t_idx]
    x = table[:, keep]
    y = table[:, t_idx]
    names = tuple(header[i] for i in keep)
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    if standardize:
        flat = np.nonzero(std == 0.0)[0]
        if flat.size:
            raise CsvFormatError(
                f"{path}: constant column(s) {[names[i] for i in flat]} "
                "cannot be standardized (std = 0)")
        x = (x - mean) / std
    return Dataset(x=x, y=y, feature_names=names, standardized=standardize,
                   feature_mean=mean, feature_std=std)


def unstandardize(ds: Dataset) -> np.ndarray:
    """Invert feature standardization (affine inverse of the recorded stats)."""
    if not ds.standardized:
        return ds.x.copy()
    return ds.x * ds.feature_std + ds.feature_mean


def write_dataset_csv(ds: Dataset, path) -> None:
    """Deterministic CSV emission: repr() of each float, stable ordering."""
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = _csv.writer(handle)
        writer.writerow(list(ds.feature_names) + ["y"])
        for i in range(ds.n):
            writer.writerow([repr(v) for v in ds.x[i]] + [repr(float(ds.y[i]))])


# ---------------------------------------------------------------------------
# Metrics: RMSE, mean log likelihood, top-rank recall.
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Metrics:
    rmse: float
    mll: float
    top_rank_recall: float | None = None


def top_rank_recall(truths, ranked_subsets) -> float:
    """Fraction of true interactions found before the first false positive.

    A ranked subset counts as true if it is a superset of a not-yet-matched
    truth (one superset per truth); singleton entries are ignored. The scan
    stops at the first entry that matches nothing.
    """
    remaining = [frozenset(t) for t in truths]
    total = len(remaining)
    if total == 0:
        raise ValueError("need at least one ground-truth interaction")
    matched = 0
    for subset in ranked_subsets:
        s = frozenset(subset)
        if len(s) < 2:
            continue
        hit = next((t for t in remaining if t <= s), None)
        if hit is None:
            break
        remaining.remove(hit)
        matched += 1
    return matched / total


def regression_metrics(prediction, y_true, ground_truth: GroundTruth | None = None,
                       report=None) -> Metrics:
    """RMSE and MLL of a posterior predictive; recall when a report is given.

    `prediction.var` is the epistemic variance; the likelihood noise
    `prediction.noise_var` is added here, so pass predictions made with
    include_noise=False.
    """
    y = np.asarray(y_true, dtype=np.float64).ravel()
    mean = np.asarray(prediction.mean, dtype=np.float64).ravel()
    if mean.size != y.size:
        raise ValueError(f"prediction/target length mismatch: {mean.size} vs {y.size}")
    var_total = np.asarray(prediction.var, dtype=np.float64).ravel() + prediction.noise_var
    if np.any(var_total <= 0.0):
        raise ValueError("predictive variance must be positive everywhere")
    rmse = float(np.sqrt(np.mean((mean - y) ** 2)))
    mll = float(np.mean(-0.5 * np.log(2.0 * np.pi * var_total)
                        - (y - mean) ** 2 / (2.0 * var_total)))
    recall = None
    if ground_truth is not None and report is not None:
        ranked = [entry.subset for entry in report.entries]
        recall = top_rank_recall(ground_truth.interactions, ranked)
    return Metrics(rmse=rmse, mll=mll, top_rank_recall=recall)
