"""Samples, datasets, CSV persistence, subject-exclusive splits, and the
seeded synthetic generator."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, ParseError, SplitError

LATENT_DIM = 8


def round_half_away(x):
    """Round to the nearest integer, halves away from zero."""
    x = np.asarray(x, dtype=np.float64)
    out = np.sign(x) * np.floor(np.abs(x) + 0.5)
    return out.astype(np.int64) if out.ndim else int(out)


@dataclass(frozen=True)
class Sample:
    sample_id: str
    subject_id: str
    label: float
    features: np.ndarray
    groups: dict = field(default_factory=dict)

    def __eq__(self, other):
        if not isinstance(other, Sample):
            return NotImplemented
        return (
            self.sample_id == other.sample_id
            and self.subject_id == other.subject_id
            and self.label == other.label
            and self.groups == other.groups
            and np.array_equal(self.features, other.features)
        )

    __hash__ = None  # type: ignore[assignment]


class Dataset:
    """Ordered, immutable collection of samples sharing one feature dimension.

    Feature and label arrays are materialised once so the numeric code can work
    on matrices; ``samples`` keeps the per-record view.
    """

    def __init__(self, samples: Sequence[Sample], feature_dim: int | None = None,
                 label_min: int | None = None, label_max: int | None = None):
        samples = tuple(samples)
        if feature_dim is None:
            if not samples:
                raise ConfigError("cannot infer feature_dim of an empty dataset")
            feature_dim = len(samples[0].features)
        if feature_dim <= 0:
            raise ConfigError("feature_dim must be positive")
        labels = np.array([s.label for s in samples], dtype=np.float64)
        if samples and not np.all(np.isfinite(labels)):
            raise ConfigError("labels must be finite")
        rounded = round_half_away(labels) if samples else np.empty(0, dtype=np.int64)
        if label_min is None:
            label_min = int(rounded.min()) if samples else 0
        if label_max is None:
            label_max = int(rounded.max()) if samples else 0
        if label_min > label_max:
            raise ConfigError(f"empty label range [{label_min}, {label_max}]")
        if samples and (rounded.min() < label_min or rounded.max() > label_max):
            raise ConfigError(f"labels fall outside [{label_min}, {label_max}]")
        ids = set()
        for s in samples:
            if len(s.features) != feature_dim:
                raise ConfigError(f"sample {s.sample_id!r} has {len(s.features)} features, expected {feature_dim}")
            if s.sample_id in ids:
                raise ConfigError(f"duplicate sample_id {s.sample_id!r}")
            ids.add(s.sample_id)
        self.samples = samples
        self.feature_dim = int(feature_dim)
        self.label_min = int(label_min)
        self.label_max = int(label_max)
        self.labels = labels
        self.labels.setflags(write=False)
        feats = np.array([s.features for s in samples], dtype=np.float64).reshape(len(samples), feature_dim)
        feats.setflags(write=False)
        self.features = feats

    def __len__(self):
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def __getitem__(self, i):
        return self.samples[i]

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (self.feature_dim == other.feature_dim and self.label_min == other.label_min
                and self.label_max == other.label_max and self.samples == other.samples)

    __hash__ = None  # type: ignore[assignment]

    def __repr__(self):
        return (f"Dataset(n={len(self)}, feature_dim={self.feature_dim}, "
                f"labels=[{self.label_min}, {self.label_max}])")

    @property
    def subject_ids(self) -> list[str]:
        return [s.subject_id for s in self.samples]

    @property
    def group_names(self) -> list[str]:
        names: dict[str, None] = {}
        for s in self.samples:
            names.update(dict.fromkeys(s.groups))
        return list(names)

    def subset(self, indices: Iterable[int]) -> "Dataset":
        return Dataset([self.samples[i] for i in indices], self.feature_dim, self.label_min, self.label_max)


# ---------------------------------------------------------------------------
# CSV I/O
# ---------------------------------------------------------------------------

def _fmt(x: float) -> str:
    # repr gives the shortest string that round-trips
    return repr(float(x))


def dumps_dataset(ds: Dataset) -> str:
    groups = ds.group_names
    header = ["sample_id", "subject_id", "label"] + [f"group:{g}" for g in groups]
    header += [f"f{j}" for j in range(ds.feature_dim)]
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for s in sorted(ds.samples, key=lambda s: s.sample_id):
        row = [s.sample_id, s.subject_id, _fmt(s.label)]
        row += [s.groups.get(g, "") for g in groups]
        row += [_fmt(v) for v in s.features]
        writer.writerow(row)
    return buf.getvalue()


def save_dataset(ds: Dataset, path) -> None:
    Path(path).write_text(dumps_dataset(ds), encoding="utf-8")


def loads_dataset(text: str, label_min: int | None = None, label_max: int | None = None) -> Dataset:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or not any(cell.strip() for cell in rows[0]):
        raise ParseError("row 1: missing header")
    header = rows[0]
    if header[:3] != ["sample_id", "subject_id", "label"]:
        raise ParseError("row 1: header must start with sample_id,subject_id,label")
    group_cols = []
    feat_cols = []
    for j, name in enumerate(header[3:], start=3):
        if name.startswith("group:"):
            if feat_cols:
                raise ParseError("row 1: group columns must precede feature columns")
            group_cols.append((j, name[len("group:"):]))
        elif name == f"f{len(feat_cols)}":
            feat_cols.append(j)
        else:
            raise ParseError(f"row 1: unexpected column {name!r}")
    if not feat_cols:
        raise ParseError("row 1: no feature columns")
    samples = []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(header):
            raise ParseError(f"row {lineno}: expected {len(header)} columns, found {len(row)}")
        try:
            label = float(row[2])
            feats = np.array([float(row[j]) for j in feat_cols], dtype=np.float64)
        except ValueError as exc:
            raise ParseError(f"row {lineno}: non-numeric value ({exc})") from None
        if not math.isfinite(label) or not np.all(np.isfinite(feats)):
            raise ParseError(f"row {lineno}: non-finite value")
        groups = {g: row[j] for j, g in group_cols}
        samples.append(Sample(row[0], row[1], label, feats, groups))
    if not samples:
        raise ParseError("row 2: no data rows")
    try:
        return Dataset(samples, len(feat_cols), label_min, label_max)
    except ConfigError as exc:
        raise ParseError(str(exc)) from None


def load_dataset(path, label_min: int | None = None, label_max: int | None = None) -> Dataset:
    """Read a dataset CSV. Label bounds default to the observed rounded range."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except FileNotFoundError:
        raise ParseError(f"no such file: {path}") from None
    return loads_dataset(text, label_min, label_max)


# ---------------------------------------------------------------------------
# Subject-exclusive split
# ---------------------------------------------------------------------------

def subject_exclusive_split(ds: Dataset, train_frac: float = 0.78, dist_frac: float = 0.02,
                            seed: int = 0) -> tuple[Dataset, Dataset, Dataset]:
    """Partition ``ds`` by subject into (train, dist, test).

    Subjects are shuffled with ``seed`` and assigned greedily: a subject joins
    the first partition whose cumulative sample target its midpoint falls
    under. Every partition receives at least one subject.
    """
    if not (train_frac > 0 and dist_frac > 0 and train_frac + dist_frac < 1):
        raise SplitError("need train_frac > 0, dist_frac > 0, train_frac + dist_frac < 1")
    by_subject: dict[str, list[int]] = {}
    for i, s in enumerate(ds.samples):
        by_subject.setdefault(s.subject_id, []).append(i)
    subjects = sorted(by_subject)
    if len(subjects) < 3:
        raise SplitError(f"need at least 3 subjects, found {len(subjects)}")
    rng = np.random.default_rng(seed)
    order = [subjects[i] for i in rng.permutation(len(subjects))]

    n = len(ds)
    bounds = (train_frac * n, (train_frac + dist_frac) * n)
    cuts = [0, 0]
    cum = 0
    for subj in order:
        size = len(by_subject[subj])
        mid = cum + size / 2
        cuts[0] += mid < bounds[0]
        cuts[1] += mid < bounds[1]
        cum += size
    # every partition keeps at least one subject
    n_subj = len(order)
    c0 = min(max(cuts[0], 1), n_subj - 2)
    c1 = min(max(cuts[1], c0 + 1), n_subj - 1)
    parts = [order[:c0], order[c0:c1], order[c1:]]
    parts = [sorted(i for subj in part for i in by_subject[subj]) for part in parts]
    return tuple(ds.subset(p) for p in parts)  # type: ignore[return-value]


# ---------------------------------------------------------------------------
# Synthetic generator
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GroupDef:
    """A categorical attribute assigned per subject.

    ``shift`` is the offset scale along the attribute's random feature
    direction; category ``i`` is displaced by ``i * shift``. ``aging`` offsets
    the label the label-dependent part of the features is generated from:
    category ``i`` looks ``i * aging`` label units older than it is. ``weights``
    are category proportions (uniform when omitted).
    """

    name: str
    categories: tuple[str, ...]
    shift: float = 0.0
    weights: tuple[float, ...] | None = None
    aging: float = 0.0


@dataclass(frozen=True)
class SynthConfig:
    num_subjects: int = 500
    samples_per_subject: int = 4
    feature_dim: int = 32
    noise_sigma: float = 0.5
    label_range: tuple[int, int] = (16, 77)
    group_defs: tuple[GroupDef, ...] = ()
    seed: int = 0

    def validate(self):
        if self.num_subjects <= 0 or self.samples_per_subject <= 0:
            raise ConfigError("num_subjects and samples_per_subject must be positive")
        if self.feature_dim <= 0:
            raise ConfigError("feature_dim must be positive")
        if not (self.noise_sigma >= 0 and math.isfinite(self.noise_sigma)):
            raise ConfigError("noise_sigma must be a finite nonnegative number")
        lo, hi = self.label_range
        if not lo < hi:
            raise ConfigError(f"label_range {self.label_range} is empty")
        for g in self.group_defs:
            if not g.categories:
                raise ConfigError(f"group {g.name!r} has no categories")
            if g.weights is not None:
                if len(g.weights) != len(g.categories) or min(g.weights) < 0 or sum(g.weights) <= 0:
                    raise ConfigError(f"group {g.name!r}: bad category weights")


def age_basis(a, span):
    """Nonlinear label basis [a/span, sin(a/10), sin(a/25), log(1+a)]."""
    a = np.asarray(a, dtype=np.float64)
    return np.stack([a / span, np.sin(a / 10.0), np.sin(a / 25.0), np.log1p(a)], axis=-1)


def _skewed_labels(rng, lo, hi, size):
    # rejection from a triangular density peaking a third of the way up the range
    mode = lo + (hi - lo) / 3.0
    out = np.empty(size)
    filled = 0
    while filled < size:
        x = rng.uniform(lo, hi, size=2 * (size - filled))
        peak = np.where(x < mode, (x - lo) / (mode - lo), (hi - x) / (hi - mode))
        acc = x[rng.uniform(size=x.size) < peak]
        take = min(acc.size, size - filled)
        out[filled:filled + take] = acc[:take]
        filled += take
    # integer-valued labels, as with ages in whole years
    return np.clip(np.rint(out), lo, hi)


def generate_synthetic(cfg: SynthConfig) -> Dataset:
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    lo, hi = cfg.label_range
    d = cfg.feature_dim
    A = rng.normal(size=(d, 4))
    B = rng.normal(size=(d, LATENT_DIM)) / np.sqrt(LATENT_DIM)
    directions = [rng.normal(size=d) / np.sqrt(d) for _ in cfg.group_defs]

    n_subj, per = cfg.num_subjects, cfg.samples_per_subject
    latent = rng.normal(size=(n_subj, LATENT_DIM))
    cats = []
    for g in cfg.group_defs:
        p = None
        if g.weights is not None:
            p = np.asarray(g.weights, dtype=np.float64)
            p = p / p.sum()
        cats.append(rng.choice(len(g.categories), size=n_subj, p=p))
    labels = _skewed_labels(rng, lo, hi, n_subj * per)
    noise = rng.normal(size=(n_subj * per, d))

    apparent = labels.copy()
    for g, c in zip(cfg.group_defs, cats):
        apparent += np.repeat(c, per) * g.aging
    feats = age_basis(apparent, hi - lo) @ A.T
    feats += np.repeat(latent @ B.T, per, axis=0)
    for g, direction, c in zip(cfg.group_defs, directions, cats):
        feats += np.repeat(c * g.shift, per)[:, None] * direction[None, :]
    feats += cfg.noise_sigma * noise

    width_s = len(str(n_subj - 1))
    width_k = len(str(n_subj * per - 1))
    samples = []
    for j in range(n_subj):
        groups = {g.name: g.categories[c[j]] for g, c in zip(cfg.group_defs, cats)}
        for k in range(per):
            i = j * per + k
            samples.append(Sample(f"s{i:0{width_k}d}", f"subj{j:0{width_s}d}", float(labels[i]),
                                  feats[i].copy(), groups))
    return Dataset(samples, d, lo, hi)
