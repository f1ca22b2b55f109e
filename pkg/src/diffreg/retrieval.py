"""Integer-label reference index and reference-set retrieval.

A query is matched against the bucket of training samples whose rounded label
equals the target age. The bucket is narrowed to the ``P`` nearest samples in
feature space, and ``R`` of those are drawn uniformly without replacement.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import _kernels
from .dataset import Dataset, Sample, round_half_away
from .errors import ConfigError, RetrievalError


@dataclass(frozen=True)
class RetrievalConfig:
    P: int = 30
    R: int = 10
    max_widen: int = 3
    exclude_subject: bool = True
    method: str = "nearest"  # or "random": uniform over the whole bucket

    def __post_init__(self):
        if self.P <= 0 or self.R <= 0:
            raise ConfigError("P and R must be positive")
        if self.R > self.P:
            raise ConfigError(f"R={self.R} exceeds P={self.P}")
        if self.max_widen < 0:
            raise ConfigError("max_widen must be nonnegative")
        if self.method not in ("nearest", "random"):
            raise ConfigError(f"unknown retrieval method {self.method!r}")


class Retrieved(NamedTuple):
    rows: np.ndarray  # row ids into the index, pool order
    widen: int  # widening radius actually used
    pool: np.ndarray  # the nearest-neighbour pool the rows were drawn from


class ReferenceIndex:
    """Training samples bucketed by ``round(label)``.

    Rows are stored in ``sample_id`` order so that a row id doubles as the
    distance tie-break key.
    """

    def __init__(self, ds: Dataset, source: str = ""):
        if len(ds) == 0:
            raise RetrievalError("cannot index an empty dataset")
        order = sorted(range(len(ds)), key=lambda i: ds.samples[i].sample_id)
        self.samples: tuple[Sample, ...] = tuple(ds.samples[i] for i in order)
        self.features = np.ascontiguousarray(ds.features[order], dtype=np.float64)
        self.labels = ds.labels[order].copy()
        self.ages = round_half_away(self.labels)
        self.label_min = ds.label_min
        self.label_max = ds.label_max
        self.feature_dim = ds.feature_dim
        self.source = source
        subjects = sorted({s.subject_id for s in self.samples})
        self._subject_code = {s: i for i, s in enumerate(subjects)}
        self.subject_codes = np.array([self._subject_code[s.subject_id] for s in self.samples], dtype=np.int64)
        self.buckets: dict[int, np.ndarray] = {}
        for t in np.unique(self.ages):
            self.buckets[int(t)] = np.flatnonzero(self.ages == t)

    def __len__(self):
        return len(self.samples)

    def bucket(self, t: int) -> np.ndarray:
        return self.buckets.get(int(t), np.empty(0, dtype=np.int64))

    def clamp_age(self, t) -> int:
        return int(min(max(round_half_away(t), self.label_min), self.label_max))

    def subject_code(self, subject_id: str | None) -> int:
        if subject_id is None:
            return -1
        return self._subject_code.get(subject_id, -1)

    def to_dataset(self) -> Dataset:
        return Dataset(self.samples, self.feature_dim, self.label_min, self.label_max)


def build_reference_index(ds: Dataset, source: str = "") -> ReferenceIndex:
    return ReferenceIndex(ds, source)


def candidate_rows(idx: ReferenceIndex, target_age, max_widen: int, excluded_code: int = -1):
    """Candidate row ids (sorted) and the widening radius used."""
    t = idx.clamp_age(target_age)
    for w in range(max_widen + 1):
        if w == 0:
            rows = idx.bucket(t)
        else:
            parts = [idx.bucket(t - j) for j in range(-w, w + 1)]
            rows = np.sort(np.concatenate(parts))
        if excluded_code >= 0 and rows.size:
            rows = rows[idx.subject_codes[rows] != excluded_code]
        if rows.size:
            return rows, w
    raise RetrievalError(f"no references within +-{max_widen} of age {t}")


def retrieve_rows(idx: ReferenceIndex, query_features, target_age, cfg: RetrievalConfig,
                  rng: np.random.Generator, excluded_subject: str | None = None) -> Retrieved:
    if len(idx) == 0:
        raise RetrievalError("empty reference index")
    q = np.ascontiguousarray(query_features, dtype=np.float64)
    if q.shape != (idx.feature_dim,):
        raise RetrievalError(f"query has shape {q.shape}, index expects ({idx.feature_dim},)")
    code = idx.subject_code(excluded_subject) if cfg.exclude_subject else -1
    rows, w = candidate_rows(idx, target_age, cfg.max_widen, code)
    if cfg.method == "nearest":
        pool = _kernels.nearest_pool(idx.features, rows, q, cfg.P)
    else:
        pool = rows
    if pool.size <= cfg.R:
        return Retrieved(pool, w, pool)
    pick = np.sort(rng.choice(pool.size, size=cfg.R, replace=False))
    return Retrieved(pool[pick], w, pool)


def retrieve_references(idx: ReferenceIndex, query_features, target_age, cfg: RetrievalConfig,
                        rng: np.random.Generator, excluded_subject: str | None = None) -> list[Sample]:
    hit = retrieve_rows(idx, query_features, target_age, cfg, rng, excluded_subject)
    return [idx.samples[i] for i in hit.rows]
