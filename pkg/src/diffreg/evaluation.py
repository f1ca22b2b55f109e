"""MAE, error histograms, and age/group bias tables."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path

import numpy as np

from .dataset import Dataset
from .errors import EvaluationError, InputError

BIAS_COLUMNS = ["table", "range", "cell", "n_samples", "n_train", "mae", "std", "std_signed", "mean_error"]
HISTOGRAM_COLUMNS = ["bin_left", "bin_right", "count"]
PREDICTION_COLUMNS = ["sample_id", "label", "initial", "estimate", "error", "fallback"]


def mean_absolute_error(predictions, labels) -> float:
    p = np.asarray(predictions, dtype=np.float64).ravel()
    a = np.asarray(labels, dtype=np.float64).ravel()
    if p.size == 0 or p.size != a.size:
        raise EvaluationError("need equal, nonzero numbers of predictions and labels")
    return float(np.mean(np.abs(p - a)))


@dataclass
class EvalReport:
    sample_ids: list[str]
    labels: np.ndarray
    initial: np.ndarray
    estimate: np.ndarray
    groups: list[dict]
    fallback: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))

    def __post_init__(self):
        n = len(self.sample_ids)
        if n == 0:
            raise EvaluationError("empty report")
        if self.fallback.size == 0:
            self.fallback = np.zeros(n, dtype=bool)
        if not (len(self.labels) == len(self.initial) == len(self.estimate) == len(self.groups) == n):
            raise EvaluationError("report columns have different lengths")

    @property
    def errors(self) -> np.ndarray:
        return self.estimate - self.labels

    @property
    def mae(self) -> float:
        return mean_absolute_error(self.estimate, self.labels)

    @property
    def initial_mae(self) -> float:
        return mean_absolute_error(self.initial, self.labels)

    def records(self) -> list[dict]:
        return [{"sample_id": sid, "label": float(a), "initial": float(i), "estimate": float(y),
                 "error": float(y - a), "fallback": bool(f), "groups": dict(g)}
                for sid, a, i, y, f, g in zip(self.sample_ids, self.labels, self.initial, self.estimate,
                                              self.fallback, self.groups)]


def build_report(ds: Dataset, estimate, initial=None, fallback=None) -> EvalReport:
    estimate = np.asarray(estimate, dtype=np.float64)
    initial = estimate.copy() if initial is None else np.asarray(initial, dtype=np.float64)
    fb = np.zeros(len(ds), dtype=bool) if fallback is None else np.asarray(fallback, dtype=bool)
    return EvalReport([s.sample_id for s in ds.samples], ds.labels.copy(), initial, estimate,
                      [dict(s.groups) for s in ds.samples], fb)


def evaluate_model(model, ds: Dataset) -> EvalReport:
    """Run ``model`` on ``ds``; pipelines also report their baseline values."""
    if hasattr(model, "predict_details"):
        y, preds = model.predict_details(ds.features)
        return build_report(ds, y, [p.initial for p in preds], [p.fallback for p in preds])
    return build_report(ds, np.atleast_1d(model.predict(ds.features)))


# ---------------------------------------------------------------------------
# histograms
# ---------------------------------------------------------------------------

@dataclass
class Histogram:
    edges: np.ndarray
    counts: np.ndarray

    def rows(self) -> list[dict]:
        return [{"bin_left": float(lo), "bin_right": float(hi), "count": int(c)}
                for lo, hi, c in zip(self.edges[:-1], self.edges[1:], self.counts)]


def fixed_width_histogram(values, bin_width: float) -> Histogram:
    """Half-open bins ``[k*w, (k+1)*w)`` spanning the observed range."""
    if not bin_width > 0:
        raise InputError("bin_width must be positive")
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise EvaluationError("no values to histogram")
    first = int(np.floor(v.min() / bin_width))
    last = int(np.floor(v.max() / bin_width))
    edges = np.arange(first, last + 2) * bin_width
    idx = np.floor(v / bin_width).astype(np.int64) - first
    return Histogram(edges, np.bincount(idx, minlength=last - first + 1))


def error_histograms(report: EvalReport, bin_width: float = 1.0) -> dict[str, Histogram]:
    e = report.errors
    return {"signed": fixed_width_histogram(e, bin_width), "absolute": fixed_width_histogram(np.abs(e), bin_width)}


# ---------------------------------------------------------------------------
# bias tables
# ---------------------------------------------------------------------------

def default_age_bins(label_min: int, label_max: int, width: int = 5) -> list[int]:
    start = label_min - label_min % width
    return list(range(start, label_max + width + 1, width))[: (label_max - start) // width + 2]


def age_bin_index(labels, edges) -> np.ndarray:
    """Bin of each label; labels outside the edges fall into the end bins."""
    edges = np.asarray(edges, dtype=np.float64)
    if edges.size < 2 or np.any(np.diff(edges) <= 0):
        raise InputError("age bin edges must be increasing with at least two entries")
    idx = np.searchsorted(edges, np.asarray(labels, dtype=np.float64), side="right") - 1
    return np.clip(idx, 0, edges.size - 2)


def _bin_label(lo, hi) -> str:
    return f"{int(lo)}-{int(hi) - 1}"


def _stats(err: np.ndarray) -> dict:
    a = np.abs(err)
    return {"n_samples": int(err.size), "mae": float(a.mean()), "std": float(a.std()),
            "std_signed": float(err.std()), "mean_error": float(err.mean())}


def _empty_stats() -> dict:
    nan = float("nan")
    return {"n_samples": 0, "mae": nan, "std": nan, "std_signed": nan, "mean_error": nan}


@dataclass
class BiasReport:
    rows: list[dict]

    def table(self, name: str) -> list[dict]:
        return [r for r in self.rows if r["table"] == name]

    def cell(self, table: str, cell: str) -> dict:
        for r in self.rows:
            if r["table"] == table and r["cell"] == cell:
                return r
        raise KeyError((table, cell))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, BIAS_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in self.rows:
            w.writerow({k: ("" if r.get(k) is None else r.get(k)) for k in BIAS_COLUMNS})
        return buf.getvalue()


def group_bias_report(report: EvalReport, axes=(), age_bins=None, train: Dataset | None = None,
                      bin_width: int = 5) -> BiasReport:
    """Per-age-bin, per-group and per-group-pair error tables.

    Age rows follow the layout (range, #samples, MAE, STD); ``std`` is the
    spread of the absolute error and ``std_signed`` that of the signed error.
    ``n_train`` counts training samples per age bin when ``train`` is given.
    """
    known = sorted({k for g in report.groups for k in g})
    unknown = [a for a in axes if a not in known]
    if unknown:
        raise InputError(f"unknown group name(s) {unknown}; known: {known}")
    err = report.errors
    if age_bins is None:
        lo = int(np.floor(report.labels.min())) if train is None else train.label_min
        hi = int(np.ceil(report.labels.max())) if train is None else train.label_max
        age_bins = default_age_bins(lo, hi, bin_width)
    edges = list(age_bins)
    bins = age_bin_index(report.labels, edges)
    train_bins = None if train is None else np.bincount(age_bin_index(train.labels, edges),
                                                        minlength=len(edges) - 1)
    rows = []
    for b in range(len(edges) - 1):
        sel = bins == b
        label = _bin_label(edges[b], edges[b + 1])
        stats = _stats(err[sel]) if sel.any() else _empty_stats()
        rows.append({"table": "age", "range": label, "cell": label,
                     "n_train": None if train_bins is None else int(train_bins[b]), **stats})
    for axis in axes:
        vals = np.array([g.get(axis, "") for g in report.groups])
        for cat in sorted(set(vals)):
            sel = vals == cat
            rows.append({"table": axis, "range": "", "cell": cat, "n_train": None, **_stats(err[sel])})
    for ax1, ax2 in combinations(axes, 2):
        v1 = np.array([g.get(ax1, "") for g in report.groups])
        v2 = np.array([g.get(ax2, "") for g in report.groups])
        for c1 in sorted(set(v1)):
            for c2 in sorted(set(v2)):
                sel = (v1 == c1) & (v2 == c2)
                if sel.any():
                    rows.append({"table": f"{ax1}x{ax2}", "range": "", "cell": f"{c1}|{c2}", "n_train": None,
                                 **_stats(err[sel])})
    return BiasReport(rows)


# ---------------------------------------------------------------------------
# file output
# ---------------------------------------------------------------------------

def write_predictions(report: EvalReport, path) -> None:
    names = sorted({k for g in report.groups for k in g})
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PREDICTION_COLUMNS + [f"group:{n}" for n in names])
        for r in report.records():
            w.writerow([r["sample_id"], repr(r["label"]), repr(r["initial"]), repr(r["estimate"]),
                        repr(r["error"]), int(r["fallback"])] + [r["groups"].get(n, "") for n in names])


def read_predictions(path) -> EvalReport:
    try:
        with open(path, encoding="utf-8", newline="") as fh:
            rows = list(csv.reader(fh))
    except FileNotFoundError:
        raise EvaluationError(f"no such file: {path}") from None
    if not rows or rows[0][:len(PREDICTION_COLUMNS)] != PREDICTION_COLUMNS:
        raise EvaluationError(f"{path}: not a predictions file (header {PREDICTION_COLUMNS})")
    names = [c[len("group:"):] for c in rows[0][len(PREDICTION_COLUMNS):]]
    ids, labels, init, est, fb, groups = [], [], [], [], [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != len(rows[0]):
            raise EvaluationError(f"{path}: row {lineno} has {len(row)} columns")
        try:
            ids.append(row[0])
            labels.append(float(row[1]))
            init.append(float(row[2]))
            est.append(float(row[3]))
            fb.append(bool(int(row[5])))
        except ValueError as exc:
            raise EvaluationError(f"{path}: row {lineno}: {exc}") from None
        groups.append(dict(zip(names, row[len(PREDICTION_COLUMNS):])))
    return EvalReport(ids, np.array(labels), np.array(init), np.array(est), groups, np.array(fb, dtype=bool))


def write_histogram(h: Histogram, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.DictWriter(fh, HISTOGRAM_COLUMNS, lineterminator="\n")
        w.writeheader()
        w.writerows(h.rows())


def write_bias(report: BiasReport, path) -> None:
    Path(path).write_text(report.to_csv(), encoding="utf-8")
