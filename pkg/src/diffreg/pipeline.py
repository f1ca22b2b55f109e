"""Composed predictor (baseline -> retrieval -> differential refinement),
iterative refinement, and checkpoint persistence."""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .baseline import BaselinePredictor, RidgeModel, _as_batch, compute_residuals
from .dar import DarConfig, DarParams, PairBatch, forward, param_shapes
from .dataset import Dataset, Sample
from .error_model import UniformErrorModel, error_model_from_dict, fit_error_kde
from .errors import CheckpointError, ConfigError, RetrievalError
from .losses import segment_softmax
from .retrieval import ReferenceIndex, RetrievalConfig, build_reference_index, retrieve_rows
from .training import TrainConfig, TrainResult, feature_seed, train_dar

CHECKPOINT_FORMAT = "diffreg-checkpoint-v1"
BASELINE_FORMAT = "diffreg-baseline-v1"


@dataclass
class Prediction:
    estimate: float  # refined value
    initial: float  # baseline value
    differentials: list[float]
    ref_weights: list[float]
    references: list[str]
    fallback: bool = False
    warning: str = ""


@dataclass
class Pipeline:
    """Baseline plus its fitted refinement; itself a baseline for the next round."""

    baseline: BaselinePredictor
    err: object
    index: ReferenceIndex
    dar: DarParams
    retrieval: RetrievalConfig
    iteration: int = 1
    train_log: list = field(default_factory=list, repr=False, compare=False)

    kind = "pipeline"

    def __post_init__(self):
        cfg = self.dar.config
        if (cfg.label_min, cfg.label_max) != (self.index.label_min, self.index.label_max):
            raise ConfigError("label bounds of the index and the network disagree")
        if cfg.feature_dim != self.index.feature_dim or self.baseline.feature_dim != cfg.feature_dim:
            raise ConfigError("feature dimensions of the pipeline components disagree")

    @property
    def feature_dim(self) -> int:
        return self.dar.config.feature_dim

    def predict(self, features):
        x, single = _as_batch(features, self.feature_dim)
        y = self.predict_details(x)[0]
        return float(y[0]) if single else y

    def explain(self, features) -> Prediction:
        x, _ = _as_batch(features, self.feature_dim)
        return self.predict_details(x)[1][0]

    def predict_details(self, X) -> tuple[np.ndarray, list[Prediction]]:
        X, _ = _as_batch(X, self.feature_dim)
        a_hat = np.atleast_1d(np.asarray(self.baseline.predict(X), dtype=np.float64))
        rows_per_query: list[np.ndarray | None] = []
        ages = []
        notes = []
        for x, est in zip(X, a_hat):
            t = self.index.clamp_age(est)
            rng = np.random.default_rng(feature_seed(x))
            try:
                hit = retrieve_rows(self.index, x, t, self.retrieval, rng)
                rows_per_query.append(hit.rows)
                notes.append("")
            except RetrievalError as exc:
                rows_per_query.append(None)
                notes.append(f"retrieval failed: {exc}")
            ages.append(t)

        live = [i for i, r in enumerate(rows_per_query) if r is not None and r.size]
        y = a_hat.copy()
        preds = [Prediction(float(a_hat[i]), float(a_hat[i]), [], [], [], True, notes[i] or "no references")
                 for i in range(len(X))]
        if live:
            q_of, a_f, a_age, rows = [], [], [], []
            for i in live:
                r = rows_per_query[i]
                q_of.append(np.full(r.size, i))
                rows.append(r)
            q_of = np.concatenate(q_of)
            rows = np.concatenate(rows)
            a_f = X[q_of]
            a_age = np.asarray(ages, dtype=np.int64)[q_of]
            batch = PairBatch(a_f, a_age, self.index.features[rows], self.index.ages[rows])
            out = forward(self.dar, batch)
            w_r = segment_softmax(out.ref_logit, q_of, len(X))
            y[live] = a_hat[live] + np.bincount(q_of, weights=w_r * out.differential, minlength=len(X))[live]
            for i in live:
                sel = q_of == i
                preds[i] = Prediction(float(y[i]), float(a_hat[i]), out.differential[sel].tolist(),
                                      w_r[sel].tolist(), [self.index.samples[r].sample_id for r in rows[sel]])
        for p in preds:
            if p.fallback:
                warnings.warn(f"falling back to the baseline estimate ({p.warning})", RuntimeWarning, stacklevel=3)
        return y, preds


def predict(p: Pipeline, features) -> Prediction:
    return p.explain(features)


# ---------------------------------------------------------------------------
# iterative refinement
# ---------------------------------------------------------------------------

def iteration_seed(seed: int, iteration: int) -> int:
    return int(np.random.SeedSequence([seed, iteration]).generate_state(1)[0])


def fit_error_distribution(bar: BaselinePredictor, dist: Dataset, clip_bound: float = 20.0, kind: str = "kde"):
    if kind == "uniform":
        return UniformErrorModel(-3, 3)
    if kind != "kde":
        raise ConfigError(f"unknown error distribution {kind!r}")
    return fit_error_kde(compute_residuals(bar, dist), clip_bound)


def refine_iteration(train: Dataset, dist: Dataset, bar_n: BaselinePredictor, dar_cfg: DarConfig,
                     train_cfg: TrainConfig = TrainConfig(), retrieval_cfg: RetrievalConfig = RetrievalConfig(),
                     seed: int = 0, clip_bound: float = 20.0, error_dist: str = "kde", warm_start: bool = True,
                     index: ReferenceIndex | None = None, monitor: Dataset | None = None,
                     on_epoch=None) -> Pipeline:
    """One refinement round: residuals of ``bar_n`` on ``dist`` -> error model
    -> differential regressor trained on ``train`` -> composed pipeline.

    When ``bar_n`` is itself a pipeline with the same network config and
    ``warm_start`` is set, training starts from its parameters.
    """
    err = fit_error_distribution(bar_n, dist, clip_bound, error_dist)
    n = getattr(bar_n, "iteration", 0) + 1
    idx = index or build_reference_index(train, "train")
    init = None
    if warm_start and isinstance(bar_n, Pipeline) and bar_n.dar.config == dar_cfg:
        init = bar_n.dar
    result: TrainResult = train_dar(train, bar_n, err, dar_cfg, train_cfg, retrieval_cfg,
                                    iteration_seed(seed, n), init=init, index=idx, monitor=monitor,
                                    on_epoch=on_epoch)
    return Pipeline(bar_n, err, idx, result.params, retrieval_cfg, n, result.log)


def refine(train: Dataset, dist: Dataset, bar0: BaselinePredictor, dar_cfg: DarConfig, iterations: int = 2,
           **kwargs) -> list[Pipeline]:
    """Apply :func:`refine_iteration` ``iterations`` times; returns every stage."""
    if iterations < 1:
        raise ConfigError("iterations must be at least 1")
    stages = []
    current = bar0
    idx = kwargs.pop("index", None) or build_reference_index(train, "train")
    for _ in range(iterations):
        current = refine_iteration(train, dist, current, dar_cfg, index=idx, **kwargs)
        stages.append(current)
    return stages


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

def _array_doc(a) -> dict:
    a = np.asarray(a, dtype=np.float64)
    return {"shape": list(a.shape), "data": [float(v) for v in a.ravel()]}


def _array_from(doc, name, shape=None) -> np.ndarray:
    try:
        data = np.asarray(doc["data"], dtype=np.float64)
        declared = tuple(int(s) for s in doc["shape"])
    except (KeyError, TypeError, ValueError):
        raise CheckpointError(f"field {name}: malformed array") from None
    if shape is not None and declared != tuple(shape):
        raise CheckpointError(f"field {name}: shape {list(declared)} does not match expected {list(shape)}")
    if data.size != int(np.prod(declared)):
        raise CheckpointError(f"field {name}: {data.size} values for shape {list(declared)}")
    return data.reshape(declared)


def baseline_to_dict(m: BaselinePredictor) -> dict:
    if isinstance(m, Pipeline):
        return {"kind": "pipeline", "pipeline": pipeline_to_dict(m)}
    if isinstance(m, RidgeModel):
        return m.to_dict()
    raise ConfigError(f"cannot serialise baseline of type {type(m).__name__}")


def baseline_from_dict(doc: dict) -> BaselinePredictor:
    kind = doc.get("kind")
    if kind == "ridge":
        try:
            return RidgeModel.from_dict(doc)
        except (KeyError, TypeError, ValueError) as exc:
            raise CheckpointError(f"field baseline: {exc}") from None
    if kind == "pipeline":
        return pipeline_from_dict(doc["pipeline"])
    raise CheckpointError(f"field baseline.kind: unknown kind {kind!r}")


def pipeline_to_dict(p: Pipeline) -> dict:
    idx = p.index
    return {
        "iteration": p.iteration,
        "label_bounds": [idx.label_min, idx.label_max],
        "retrieval": {"P": p.retrieval.P, "R": p.retrieval.R, "max_widen": p.retrieval.max_widen,
                      "exclude_subject": p.retrieval.exclude_subject, "method": p.retrieval.method},
        "dar_config": p.dar.config.to_dict(),
        "dar_params": {name: _array_doc(a) for name, a in p.dar.arrays.items()},
        "input_shift": _array_doc(p.dar.shift),
        "input_scale": _array_doc(p.dar.scale),
        "error_model": p.err.to_dict(),
        "baseline": baseline_to_dict(p.baseline),
        "index": {
            "source": idx.source,
            "sample_ids": [s.sample_id for s in idx.samples],
            "subject_ids": [s.subject_id for s in idx.samples],
            "labels": [float(v) for v in idx.labels],
            "features": _array_doc(idx.features),
        },
    }


def _field(doc, name):
    try:
        return doc[name]
    except (KeyError, TypeError):
        raise CheckpointError(f"field {name}: missing") from None


def pipeline_from_dict(doc: dict) -> Pipeline:
    cfg_doc = _field(doc, "dar_config")
    try:
        cfg = DarConfig.from_dict(cfg_doc)
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"field dar_config: {exc}") from None
    lo, hi = _field(doc, "label_bounds")
    if (lo, hi) != (cfg.label_min, cfg.label_max):
        raise CheckpointError("field label_bounds: disagrees with dar_config")
    shapes = param_shapes(cfg)
    pdoc = _field(doc, "dar_params")
    if set(pdoc) != set(shapes):
        raise CheckpointError(f"field dar_params: expected parameters {sorted(shapes)}")
    arrays = {name: _array_from(pdoc[name], f"dar_params.{name}", shape) for name, shape in shapes.items()}
    d = cfg.feature_dim
    params = DarParams(cfg, arrays, _array_from(_field(doc, "input_shift"), "input_shift", (d,)),
                       _array_from(_field(doc, "input_scale"), "input_scale", (d,)))
    try:
        retrieval = RetrievalConfig(**_field(doc, "retrieval"))
        err = error_model_from_dict(_field(doc, "error_model"))
    except (TypeError, ValueError, KeyError) as exc:
        raise CheckpointError(f"field retrieval/error_model: {exc}") from None
    idoc = _field(doc, "index")
    ids, subj, labels = _field(idoc, "sample_ids"), _field(idoc, "subject_ids"), _field(idoc, "labels")
    feats = _array_from(_field(idoc, "features"), "index.features", (len(ids), d))
    if not (len(ids) == len(subj) == len(labels)):
        raise CheckpointError("field index: ragged sample lists")
    samples = [Sample(i, s, float(a), f) for i, s, a, f in zip(ids, subj, labels, feats)]
    idx = build_reference_index(Dataset(samples, d, lo, hi), idoc.get("source", ""))
    baseline = baseline_from_dict(_field(doc, "baseline"))
    return Pipeline(baseline, err, idx, params, retrieval, int(_field(doc, "iteration")))


def dumps_model(m) -> str:
    if isinstance(m, Pipeline):
        doc = {"format": CHECKPOINT_FORMAT, **pipeline_to_dict(m)}
    else:
        doc = {"format": BASELINE_FORMAT, **baseline_to_dict(m)}
    return json.dumps(doc, sort_keys=True, separators=(",", ":")) + "\n"


def loads_model(text: str):
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"truncated or malformed checkpoint ({exc.msg} at char {exc.pos})") from None
    if not isinstance(doc, dict):
        raise CheckpointError("field format: checkpoint is not an object")
    fmt = doc.get("format")
    if fmt == CHECKPOINT_FORMAT:
        return pipeline_from_dict(doc)
    if fmt == BASELINE_FORMAT:
        return baseline_from_dict(doc)
    raise CheckpointError(f"field format: unsupported version {fmt!r}")


def save_checkpoint(p: Pipeline, path) -> None:
    Path(path).write_text(dumps_model(p), encoding="utf-8")


def load_checkpoint(path):
    """Load a pipeline checkpoint (or a standalone baseline file)."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except FileNotFoundError:
        raise CheckpointError(f"no such file: {path}") from None
    return loads_model(text)


save_model = save_checkpoint
load_model = load_checkpoint
