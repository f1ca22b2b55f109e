"""Baseline error distribution: Gaussian KDE over residuals with a clipped
support, sampled by smoothed bootstrap."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import _kernels
from .errors import CheckpointError, ConfigError, FitError

MAX_REJECTIONS = 1000
ERROR_MODEL_FORMAT = "diffreg-error-model-v1"


def silverman_bandwidth(x) -> float:
    """0.9 * min(std, IQR/1.34) * n^(-1/5), or 1.0 when that is zero."""
    x = np.asarray(x, dtype=np.float64)
    n = x.size
    std = float(np.std(x, ddof=1)) if n > 1 else 0.0
    q75, q25 = np.percentile(x, [75, 25])
    spread = min(std, (q75 - q25) / 1.34)
    h = 0.9 * spread * n ** (-0.2)
    return float(h) if h > 0 else 1.0


@dataclass(frozen=True)
class ErrorModel:
    residuals: np.ndarray
    bandwidth: float
    clip_bound: float = 20.0

    kind = "kde"

    def __post_init__(self):
        if not self.bandwidth > 0:
            raise ConfigError("bandwidth must be positive")
        if np.asarray(self.residuals).size == 0:
            raise ConfigError("error model needs at least one residual")

    def density(self, e):
        return kde_density(self, e)

    def sample(self, rng: np.random.Generator) -> float:
        return sample_error(self, rng)

    def to_dict(self) -> dict:
        return {"kind": "kde", "residuals": [float(r) for r in self.residuals],
                "bandwidth": float(self.bandwidth), "clip_bound": float(self.clip_bound)}


@dataclass(frozen=True)
class UniformErrorModel:
    """Discrete uniform offsets on ``{low, ..., high}``, an ablation alternative to the KDE."""

    low: int = -3
    high: int = 3

    kind = "uniform"

    @property
    def clip_bound(self) -> float:
        return float(max(abs(self.low), abs(self.high)))

    def sample(self, rng: np.random.Generator) -> float:
        return float(rng.integers(self.low, self.high + 1))

    def to_dict(self) -> dict:
        return {"kind": "uniform", "low": self.low, "high": self.high}


@dataclass(frozen=True)
class PointErrorModel:
    """Always returns ``value``; useful for switching augmentation off."""

    value: float = 0.0

    kind = "point"

    @property
    def clip_bound(self) -> float:
        return abs(self.value)

    def sample(self, rng: np.random.Generator) -> float:
        return float(self.value)

    def to_dict(self) -> dict:
        return {"kind": "point", "value": float(self.value)}


def error_model_from_dict(doc: dict):
    kind = doc.get("kind")
    if kind == "kde":
        return ErrorModel(np.asarray(doc["residuals"], dtype=np.float64), float(doc["bandwidth"]),
                          float(doc["clip_bound"]))
    if kind == "uniform":
        return UniformErrorModel(int(doc["low"]), int(doc["high"]))
    if kind == "point":
        return PointErrorModel(float(doc["value"]))
    raise ConfigError(f"unknown error model kind {kind!r}")


def save_error_model(m, path) -> None:
    doc = {"format": ERROR_MODEL_FORMAT, **m.to_dict()}
    Path(path).write_text(json.dumps(doc, sort_keys=True, separators=(",", ":")) + "\n", encoding="utf-8")


def load_error_model(path):
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise CheckpointError(f"no such file: {path}") from None
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: malformed error model ({exc.msg})") from None
    if not isinstance(doc, dict) or doc.get("format") != ERROR_MODEL_FORMAT:
        raise CheckpointError(f"field format: {path} is not a {ERROR_MODEL_FORMAT} file")
    try:
        return error_model_from_dict(doc)
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: {exc}") from None


def fit_error_kde(residuals, clip_bound: float = 20.0) -> ErrorModel:
    if not clip_bound > 0:
        raise FitError("clip_bound must be positive")
    r = np.asarray(residuals, dtype=np.float64).ravel()
    if r.size == 0:
        raise FitError("no residuals to fit")
    if not np.all(np.isfinite(r)):
        raise FitError("residuals must be finite")
    r = r[np.abs(r) <= clip_bound]
    if r.size == 0:
        raise FitError(f"every residual lies outside [-{clip_bound}, {clip_bound}]")
    r.setflags(write=False)
    return ErrorModel(r, silverman_bandwidth(r), float(clip_bound))


def kde_density(m: ErrorModel, e):
    """f(e) = 1/(n h) sum_i phi((e - e_i)/h)."""
    out = _kernels.kde_density(np.asarray(e, dtype=np.float64), m.residuals, m.bandwidth)
    return float(out) if np.ndim(out) == 0 else out


def sample_error(m: ErrorModel, rng: np.random.Generator) -> float:
    """One smoothed-bootstrap draw, resampled until it lands in [-B, B]."""
    b = m.clip_bound
    x = 0.0
    for _ in range(MAX_REJECTIONS):
        x = m.residuals[rng.integers(m.residuals.size)] + m.bandwidth * rng.standard_normal()
        if -b <= x <= b:
            return float(x)
    return float(min(max(x, -b), b))


def sample_errors(m: ErrorModel, rng: np.random.Generator, size: int) -> np.ndarray:
    """Vectorised equivalent of ``size`` calls to :func:`sample_error`
    (same distribution, different stream)."""
    b = m.clip_bound
    out = np.empty(size)
    todo = np.arange(size)
    for _ in range(MAX_REJECTIONS):
        if todo.size == 0:
            return out
        x = m.residuals[rng.integers(m.residuals.size, size=todo.size)] + m.bandwidth * rng.standard_normal(todo.size)
        ok = np.abs(x) <= b
        out[todo[ok]] = x[ok]
        todo = todo[~ok]
    out[todo] = np.clip(x[~ok], -b, b)
    return out
