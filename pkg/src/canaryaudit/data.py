"""Datasets: in-memory feature/label tables, CSV ingestion, and synthetic generators."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

REGRESSION = "regression"
CLASSIFICATION = "classification"


class DataError(ValueError):
    """Raised for malformed or inconsistent dataset inputs."""


class Sample(NamedTuple):
    x: np.ndarray
    y: float


@dataclass
class Dataset:
    """Ordered collection of samples. Row order is stable: indices are identities.

    ``x`` is (n, d) float64; ``y`` is (n,) float64 (class labels are stored as
    exact integral floats). ``num_classes`` is required for classification.
    """

    x: np.ndarray
    y: np.ndarray
    task: str
    num_classes: int = 0

    def __post_init__(self):
        self.x = np.ascontiguousarray(self.x, dtype=np.float64)
        self.y = np.ascontiguousarray(self.y, dtype=np.float64)
        if self.x.ndim != 2:
            raise DataError(f"features must be 2-D, got shape {self.x.shape}")
        if self.y.shape != (self.x.shape[0],):
            raise DataError(
                f"labels shape {self.y.shape} does not match {self.x.shape[0]} rows"
            )
        if not np.all(np.isfinite(self.x)) or not np.all(np.isfinite(self.y)):
            raise DataError("non-finite entries in dataset")
        if self.task not in (REGRESSION, CLASSIFICATION):
            raise DataError(f"unknown task {self.task!r}")
        if self.task == CLASSIFICATION:
            if self.num_classes < 1:
                raise DataError("classification dataset needs num_classes >= 1")
            if np.any(self.y != np.round(self.y)):
                raise DataError("classification labels must be integral")
            if self.y.size and (self.y.min() < 0 or self.y.max() >= self.num_classes):
                raise DataError("class labels outside [0, num_classes)")

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def d(self) -> int:
        return self.x.shape[1]

    def __len__(self) -> int:
        return self.n

    def __getitem__(self, i: int) -> Sample:
        return Sample(self.x[i], float(self.y[i]))

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.x[idx].copy(), self.y[idx].copy(), self.task, self.num_classes)

    def without(self, indices) -> "Dataset":
        mask = np.ones(self.n, dtype=bool)
        mask[np.asarray(indices, dtype=np.int64)] = False
        return Dataset(self.x[mask].copy(), self.y[mask].copy(), self.task, self.num_classes)

    def with_rows(self, features: np.ndarray, labels: np.ndarray) -> "Dataset":
        """New dataset with extra rows appended after the existing ones."""
        feats = np.atleast_2d(np.asarray(features, dtype=np.float64))
        labs = np.atleast_1d(np.asarray(labels, dtype=np.float64))
        if feats.shape[1] != self.d:
            raise DataError(f"appended rows have dimension {feats.shape[1]}, expected {self.d}")
        return Dataset(
            np.vstack([self.x, feats]),
            np.concatenate([self.y, labs]),
            self.task,
            self.num_classes,
        )


def ingest_csv(path, task: str, num_classes: int = 0) -> Dataset:
    """Load a dataset from a CSV file with header ``f0,...,f{d-1},label``.

    Row order is preserved; floats are parsed in decimal. Malformed rows are
    reported with their line number.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        if not header or header[-1] != "label":
            raise DataError(f"{path}: last header column must be 'label', got {header[-1:]}")
        d = len(header) - 1
        expected = [f"f{i}" for i in range(d)] + ["label"]
        if header != expected:
            raise DataError(f"{path}: header {header} does not match f0..f{d-1},label")
        rows, labels = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != d + 1:
                raise DataError(f"{path}:{lineno}: expected {d + 1} fields, got {len(row)}")
            try:
                values = [float(v) for v in row]
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
            rows.append(values[:-1])
            labels.append(values[-1])
    if not rows:
        raise DataError(f"{path}: no data rows")
    if task == CLASSIFICATION and num_classes == 0:
        num_classes = int(max(labels)) + 1
    return Dataset(np.array(rows), np.array(labels), task, num_classes)


def export_csv(path, dataset: Dataset) -> None:
    """Write a dataset in the ``ingest_csv`` format. Floats use repr so that a
    round trip reproduces the values exactly."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"f{i}" for i in range(dataset.d)] + ["label"])
        for i in range(dataset.n):
            writer.writerow([repr(v) for v in dataset.x[i]] + [repr(float(dataset.y[i]))])


def blob_means(k: int, d: int, separation: float) -> np.ndarray:
    """Class means for the blobs generator: scaled orthonormal directions, so
    every pair of means is exactly ``separation`` apart. Requires k <= d."""
    if k > d:
        raise DataError(f"blobs needs k <= d, got k={k}, d={d}")
    means = np.zeros((k, d))
    scale = separation / np.sqrt(2.0)
    for i in range(k):
        means[i, i] = scale
    return means


def synth_blobs(k: int, d: int, n: int, separation: float, seed: int) -> Dataset:
    """k isotropic Gaussian classes with equidistant means (unit covariance)."""
    if min(k, d, n) < 1 or separation <= 0:
        raise DataError("blob parameters must be positive")
    rng = np.random.default_rng(seed)
    means = blob_means(k, d, separation)
    labels = rng.integers(0, k, size=n)
    x = means[labels] + rng.standard_normal((n, d))
    return Dataset(x, labels.astype(np.float64), CLASSIFICATION, k)


def synth_linear_gaussian(d: int, n: int, noise_std: float, seed: int):
    """Regression data y = <theta_true, x> + noise. Returns (dataset, theta_true)."""
    if min(d, n) < 1 or noise_std < 0:
        raise DataError("linear-gaussian parameters must be positive")
    rng = np.random.default_rng(seed)
    theta_true = rng.standard_normal(d)
    x = rng.standard_normal((n, d))
    y = x @ theta_true
    if noise_std > 0:
        y = y + noise_std * rng.standard_normal(n)
    return Dataset(x, y, REGRESSION), theta_true
