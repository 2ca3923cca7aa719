"""Candidate scoring and top-N user selection."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .market import MuProfile

ROSTER_COLUMNS = ("id", "d_total", "d_local_cap", "eps", "a_fn", "zeta",
                  "cycles", "freq", "rate", "compute")


@dataclass(frozen=True)
class SelectionWeights:
    """Weights on normalized data size, compute and rate; must sum to one."""

    w_data: float = 1 / 3
    w_compute: float = 1 / 3
    w_rate: float = 1 / 3

    def __post_init__(self):
        w = (self.w_data, self.w_compute, self.w_rate)
        if min(w) < 0 or abs(sum(w) - 1.0) > 1e-12:
            raise ValueError(f"selection weights must be non-negative and sum to 1, got {w}")


def normalize(values) -> np.ndarray:
    """Min-max scale to [0, 1]; a constant vector maps to all ones."""
    v = np.asarray(values, dtype=float).reshape(-1)
    if v.size == 0:
        raise ValueError("cannot normalize an empty vector")
    lo, hi = v.min(), v.max()
    if hi == lo:
        return np.ones_like(v)
    return (v - lo) / (hi - lo)


def selection_score(d_norm, k_norm, r_norm, w: SelectionWeights):
    """Weighted selection metric; scalars or equal-length arrays."""
    if not isinstance(w, SelectionWeights):
        raise TypeError("w must be SelectionWeights")
    return w.w_data * np.asarray(d_norm) + w.w_compute * np.asarray(k_norm) + w.w_rate * np.asarray(r_norm)


def candidate_scores(candidates: Sequence[MuProfile], w: SelectionWeights) -> np.ndarray:
    d = normalize([c.d_total for c in candidates])
    k = normalize([c.compute for c in candidates])
    r = normalize([c.rate for c in candidates])
    return np.asarray(selection_score(d, k, r, w), dtype=float)


def select_top_n(candidates: Sequence[MuProfile], w: SelectionWeights, n: int) -> list[int]:
    """Ids of the ``n`` highest-scoring candidates, ties broken by ascending id."""
    if n > len(candidates):
        raise ValueError(f"cannot select {n} users from {len(candidates)} candidates")
    if n < 0:
        raise ValueError("n must be non-negative")
    if n == 0:
        return []
    scores = candidate_scores(candidates, w)
    ids = np.array([c.id for c in candidates])
    order = np.lexsort((ids, -scores))
    return [int(ids[j]) for j in order[:n]]


def load_roster(path) -> list[MuProfile]:
    """Read a candidate roster CSV with the columns in ``ROSTER_COLUMNS``."""
    out = []
    with Path(path).open(newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(ROSTER_COLUMNS) - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"roster is missing columns: {sorted(missing)}")
        for row in reader:
            out.append(MuProfile(
                id=int(row["id"]), d_total=float(row["d_total"]),
                d_local_cap=float(row["d_local_cap"]), eps_priv=float(row["eps"]),
                a_fn=float(row["a_fn"]), zeta=float(row["zeta"]),
                cycles_per_sample=float(row["cycles"]), freq=float(row["freq"]),
                rate=float(row["rate"]), compute=float(row["compute"])))
    return out


def write_roster(path, candidates: Sequence[MuProfile]) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(ROSTER_COLUMNS)
        for c in candidates:
            writer.writerow([c.id, repr(c.d_total), repr(c.d_local_cap), repr(c.eps_priv),
                             repr(c.a_fn), repr(c.zeta), repr(c.cycles_per_sample),
                             repr(c.freq), repr(c.rate), repr(c.compute)])


def generate_candidates(seed: int, n: int, d_total=(2e4, 6e4), local_cap_frac=(0.2, 0.5),
                        eps_priv=(0.1, 1.0), compute=(0.5, 1.5), rate=(100e6, 400e6),
                        **fixed) -> list[MuProfile]:
    """Seeded synthetic roster; each attribute is uniform on its (low, high) range."""
    if n < 1:
        raise ValueError("need at least one candidate")
    rng = np.random.default_rng(seed)
    out = []
    for j in range(n):
        d = float(rng.uniform(*d_total))
        out.append(MuProfile(id=j, d_total=d, d_local_cap=d * float(rng.uniform(*local_cap_frac)),
                             eps_priv=float(rng.uniform(*eps_priv)),
                             compute=float(rng.uniform(*compute)), rate=float(rng.uniform(*rate)),
                             **fixed))
    return out
