"""Synthetic regression data, non-iid partitioning and contract-driven splits."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .market import ContractBook

LABEL_PREFIX = "label_"


class DataError(ValueError):
    """Malformed or unusable training data."""


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=float)
        self.labels = np.asarray(self.labels, dtype=float)
        if self.labels.ndim == 1:
            self.labels = self.labels[:, None]
        if self.features.ndim != 2 or self.labels.ndim != 2:
            raise DataError("features and labels must be matrices")
        if self.features.shape[0] != self.labels.shape[0]:
            raise DataError("features and labels have different row counts")
        if not (np.all(np.isfinite(self.features)) and np.all(np.isfinite(self.labels))):
            raise DataError("dataset contains non-finite entries")

    @property
    def n_rows(self) -> int:
        return self.features.shape[0]

    def take(self, idx) -> "Dataset":
        return Dataset(self.features[idx], self.labels[idx])

    @classmethod
    def empty(cls, d: int, k: int) -> "Dataset":
        return cls(np.zeros((0, d)), np.zeros((0, k)))

    @classmethod
    def concat(cls, parts: Sequence["Dataset"], d: int, k: int) -> "Dataset":
        parts = [p for p in parts if p.n_rows]
        if not parts:
            return cls.empty(d, k)
        return cls(np.vstack([p.features for p in parts]), np.vstack([p.labels for p in parts]))


def synth_dataset(seed: int, n_samples: int = 5000, d: int = 8, k: int = 1,
                  noise_sigma: float = 0.1) -> tuple[Dataset, np.ndarray]:
    """Linear-Gaussian regression task; returns the data and the true model."""
    rng = np.random.default_rng(seed)
    truth = rng.standard_normal((d, k))
    features = rng.standard_normal((n_samples, d))
    labels = features @ truth + noise_sigma * rng.standard_normal((n_samples, k))
    return Dataset(features, labels), truth


@dataclass
class PartitionPlan:
    """Per-user blocks of the label-sorted dataset plus contract-derived counts."""

    order: np.ndarray
    bounds: list[tuple[int, int]]
    encrypted_count: list[int] = field(default_factory=list)
    local_count: list[int] = field(default_factory=list)

    def block(self, n: int) -> np.ndarray:
        start, stop = self.bounds[n]
        return self.order[start:stop]

    def block_size(self, n: int) -> int:
        start, stop = self.bounds[n]
        return stop - start


def partition_non_iid(ds: Dataset, n_mus: int) -> PartitionPlan:
    """Sort rows by the first label column and slice into sequential blocks.

    Block sizes differ by at most one row when ``n_mus`` does not divide the
    row count.
    """
    if n_mus < 1:
        raise DataError("need at least one user")
    if ds.n_rows < n_mus:
        raise DataError("fewer rows than users")
    order = np.argsort(ds.labels[:, 0], kind="stable")
    edges = np.cumsum([0] + [len(c) for c in np.array_split(np.arange(ds.n_rows), n_mus)])
    bounds = [(int(a), int(b)) for a, b in zip(edges[:-1], edges[1:])]
    return PartitionPlan(order, bounds, [0] * n_mus, [0] * n_mus)


@dataclass
class ContractSplit:
    local: list[Dataset]
    encrypted: list[Dataset]
    plan: PartitionPlan
    warnings: list[dict]

    def pooled_encrypted(self) -> Dataset:
        d = self.local[0].features.shape[1]
        k = self.local[0].labels.shape[1]
        return Dataset.concat(self.encrypted, d, k)


def apply_contract_split(ds: Dataset, plan: PartitionPlan, book: ContractBook,
                         realized_type: int, eta: np.ndarray,
                         rows_per_sample=1.0) -> ContractSplit:
    """Cut every user's block into an encrypted head, a local middle and unused rest.

    Counts are ``floor(rows_per_sample * trained encrypted size)`` and
    ``floor(rows_per_sample * local size)``; ``rows_per_sample`` may be a
    per-user vector to map contract units onto dataset rows. Requests larger
    than the block are clamped and reported in ``warnings``.
    """
    n_mus = len(plan.bounds)
    if book.n_mus != n_mus:
        raise DataError("contract book and partition disagree on the number of users")
    unit = np.broadcast_to(np.asarray(rows_per_sample, dtype=float), (n_mus,))
    locals_, encs, warnings = [], [], []
    enc_counts, local_counts = [], []
    for n in range(n_mus):
        idx = plan.block(n)
        size = idx.shape[0]
        want_enc = int(math.floor(eta[realized_type][n] * book.d_enc[realized_type, n] * unit[n] + 1e-9))
        want_local = int(math.floor(book.d_local[n] * unit[n] + 1e-9))
        n_enc = min(want_enc, size)
        n_local = min(want_local, size - n_enc)
        if (n_enc, n_local) != (want_enc, want_local):
            warnings.append({"mu": n, "requested_encrypted": want_enc,
                             "requested_local": want_local, "block": size,
                             "encrypted": n_enc, "local": n_local})
        encs.append(ds.take(idx[:n_enc]))
        locals_.append(ds.take(idx[n_enc:n_enc + n_local]))
        enc_counts.append(n_enc)
        local_counts.append(n_local)
    out_plan = PartitionPlan(plan.order, list(plan.bounds), enc_counts, local_counts)
    return ContractSplit(locals_, encs, out_plan, warnings)


def split_by_share(ds: Dataset, plan: PartitionPlan, encrypted_share: float,
                   local_share: float | None = None) -> ContractSplit:
    """Split every block by fixed fractions (no contract involved)."""
    if not 0 <= encrypted_share <= 1:
        raise DataError("encrypted_share must be in [0, 1]")
    local_share = 1.0 - encrypted_share if local_share is None else local_share
    locals_, encs, enc_counts, local_counts = [], [], [], []
    for n in range(len(plan.bounds)):
        idx = plan.block(n)
        n_enc = int(math.floor(encrypted_share * idx.shape[0] + 1e-9))
        n_local = min(int(math.floor(local_share * idx.shape[0] + 1e-9)), idx.shape[0] - n_enc)
        encs.append(ds.take(idx[:n_enc]))
        locals_.append(ds.take(idx[n_enc:n_enc + n_local]))
        enc_counts.append(n_enc)
        local_counts.append(n_local)
    return ContractSplit(locals_, encs, PartitionPlan(plan.order, list(plan.bounds), enc_counts,
                                                      local_counts), [])


def load_csv(path) -> Dataset:
    """Read a numeric CSV with a header; columns named ``label_*`` are labels."""
    with Path(path).open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        label_cols = [j for j, h in enumerate(header) if h.strip().startswith(LABEL_PREFIX)]
        feature_cols = [j for j in range(len(header)) if j not in label_cols]
        if not label_cols or not feature_cols:
            raise DataError(f"{path}: need at least one feature and one '{LABEL_PREFIX}*' column")
        rows, bad = [], []
        for r, row in enumerate(reader):
            if len(row) != len(header):
                bad.append((r, "wrong column count"))
                continue
            try:
                vals = [float(v) for v in row]
            except ValueError:
                bad.append((r, "non-numeric value"))
                continue
            if not all(math.isfinite(v) for v in vals):
                bad.append((r, "non-finite value"))
                continue
            rows.append(vals)
    if bad:
        report = "; ".join(f"row {r}: {why}" for r, why in bad[:20])
        raise DataError(f"{path}: {len(bad)} invalid data rows ({report})")
    if not rows:
        raise DataError(f"{path}: no data rows")
    arr = np.asarray(rows, dtype=float)
    return Dataset(arr[:, feature_cols], arr[:, label_cols])


def write_csv(path, ds: Dataset) -> None:
    d = ds.features.shape[1]
    k = ds.labels.shape[1]
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow([f"f{j}" for j in range(d)] + [f"{LABEL_PREFIX}{j}" for j in range(k)])
        for f, l in zip(ds.features, ds.labels):
            writer.writerow([repr(float(v)) for v in f] + [repr(float(v)) for v in l])
