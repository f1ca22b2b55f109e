"""Batch construction with label augmentation, Adam with cosine annealing,
and the training loop."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .baseline import BaselinePredictor
from .dar import DarConfig, DarParams, PairBatch, init_params, loss_and_gradients, total_loss
from .dataset import Dataset, Sample
from .errors import ConfigError, NumericError
from .losses import LossConfig, PairTargets, class_index
from .retrieval import ReferenceIndex, RetrievalConfig, build_reference_index, retrieve_rows

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 150
    batch_size: int = 32
    lr: float = 3e-4
    loss: LossConfig = LossConfig()

    def __post_init__(self):
        if self.epochs <= 0 or self.batch_size <= 0:
            raise ConfigError("epochs and batch_size must be positive")
        if not self.lr >= 0:
            raise ConfigError("learning rate must be nonnegative")

    def to_dict(self) -> dict:
        return {"epochs": self.epochs, "batch_size": self.batch_size, "lr": self.lr,
                "inner_absolute": self.loss.inner_absolute}


@dataclass
class TrainingBatch:
    """Oriented pairs for a set of queries.

    Pairs come in twins: for reference ``r`` of query ``q`` the forward pair
    (q, r) with target ``a_q - a_r`` is immediately followed by the reverse
    pair (r, q) with the negated target.
    """

    pairs: PairBatch
    targets: PairTargets
    query_ids: list[str]
    ref_ids: list[str]  # per pair, the reference sample involved
    epsilons: np.ndarray  # (Q,) sampled augmentation offsets
    retrieval_ages: np.ndarray  # (Q,)

    @property
    def orientation(self) -> np.ndarray:
        return np.where(self.targets.forward, "forward", "reverse")


def _clamp(x, lo, hi):
    return min(max(x, lo), hi)


def _oriented_pairs(idx: ReferenceIndex, queries: Sequence[Sample], estimates, epsilons, retrieval_cfg,
                    C: int, rngs) -> TrainingBatch:
    a_f, a_age, b_f, b_age, delta, fwd, qid, ref_ids = [], [], [], [], [], [], [], []
    ages = np.empty(len(queries), dtype=np.int64)
    for qi, (q, est, rng) in enumerate(zip(queries, estimates, rngs)):
        t = idx.clamp_age(est)
        hit = retrieve_rows(idx, q.features, t, retrieval_cfg, rng, excluded_subject=q.subject_id)
        ages[qi] = t
        for row in hit.rows:
            ref = idx.samples[row]
            ar = int(idx.ages[row])
            dl = q.label - ref.label
            a_f += [q.features, ref.features]
            b_f += [ref.features, q.features]
            a_age += [t, ar]
            b_age += [ar, t]
            delta += [dl, -dl]
            fwd += [True, False]
            qid += [qi, qi]
            ref_ids += [ref.sample_id, ref.sample_id]
    delta_arr = np.asarray(delta, dtype=np.float64)
    pairs = PairBatch(np.asarray(a_f), np.asarray(a_age, dtype=np.int64),
                      np.asarray(b_f), np.asarray(b_age, dtype=np.int64))
    targets = PairTargets(delta_arr, class_index(delta_arr, C), np.asarray(fwd, dtype=bool),
                          np.asarray(qid, dtype=np.int64), np.array([q.label for q in queries], dtype=np.float64),
                          np.asarray(estimates, dtype=np.float64))
    return TrainingBatch(pairs, targets, [q.sample_id for q in queries], ref_ids,
                         np.asarray(epsilons, dtype=np.float64), ages)


def build_training_batch(idx: ReferenceIndex, queries: Sequence[Sample], err, retrieval_cfg: RetrievalConfig,
                         C: int, rngs: Sequence[np.random.Generator]) -> TrainingBatch:
    """Augment each query label with a draw from ``err``, retrieve references
    at the augmented age, and emit both orientations of every pair.

    The augmented estimate ``clamp(a + eps)`` is both the retrieval age (after
    rounding) and the value the query's refinement is added to.
    """
    eps = [err.sample(rng) for rng in rngs]
    est = [_clamp(q.label + e, idx.label_min, idx.label_max) for q, e in zip(queries, eps)]
    return _oriented_pairs(idx, queries, est, eps, retrieval_cfg, C, rngs)


def cosine_lr(base: float, step: int, total: int) -> float:
    if total <= 0:
        return base
    return base * 0.5 * (1.0 + math.cos(math.pi * min(step, total) / total))


class Adam:
    """Adaptive-moment optimizer over a dict of named arrays (updated in place)."""

    def __init__(self, params: dict[str, np.ndarray], betas=ADAM_BETAS, eps: float = ADAM_EPS):
        self.betas = betas
        self.eps = eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float) -> None:
        for k, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient for {k}")
        b1, b2 = self.betas
        self.t += 1
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for k, p in params.items():
            g = grads[k]
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            if lr:
                p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def optimizer_step(params: DarParams, grads: dict[str, np.ndarray], state: Adam, step: int, total_steps: int,
                   base_lr: float) -> float:
    """Apply one update with the cosine-annealed step size; returns that size."""
    lr = cosine_lr(base_lr, step, total_steps)
    state.step(params.arrays, grads, lr)
    return lr


def query_rng(seed: int, epoch: int, query: int) -> np.random.Generator:
    return np.random.default_rng([seed, 0, epoch, query])


def feature_normalisation(ds: Dataset):
    shift = ds.features.mean(axis=0)
    scale = ds.features.std(axis=0)
    scale[scale < 1e-12] = 1.0
    return shift, scale


# ---------------------------------------------------------------------------
# test-protocol monitoring
# ---------------------------------------------------------------------------

def feature_seed(features) -> int:
    """Stable seed from the bytes of a feature vector."""
    raw = np.ascontiguousarray(features, dtype="<f8").tobytes()
    return int.from_bytes(hashlib.blake2b(raw, digest_size=8).digest(), "little")


def monitor_batch(idx: ReferenceIndex, ds: Dataset, estimates, retrieval_cfg: RetrievalConfig, C: int):
    """Oriented pairs built the way prediction retrieves them: at the rounded
    estimate, without augmentation, with feature-hash seeded sampling."""
    estimates = np.asarray(estimates, dtype=np.float64)
    rngs = [np.random.default_rng(feature_seed(s.features)) for s in ds.samples]
    return _oriented_pairs(idx, ds.samples, estimates, estimates - ds.labels, retrieval_cfg, C, rngs)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    params: DarParams
    log: list[dict] = field(default_factory=list)


def train_dar(train: Dataset, bar: BaselinePredictor | None, err, dar_cfg: DarConfig,
              train_cfg: TrainConfig = TrainConfig(), retrieval_cfg: RetrievalConfig = RetrievalConfig(),
              seed: int = 0, init: DarParams | None = None, index: ReferenceIndex | None = None,
              monitor: Dataset | None = None,
              on_epoch: Callable[[dict], None] | None = None) -> TrainResult:
    """Fit the differential regressor on ``train``.

    ``err`` supplies the augmentation offsets. When ``monitor`` is given, each
    epoch also records the loss and MAE on it under the test protocol, using
    ``bar`` for the initial estimates. ``init`` warm-starts from existing
    parameters (its normalisation is kept).
    """
    if len(train) == 0:
        raise ConfigError("empty training set")
    if dar_cfg.feature_dim != train.feature_dim:
        raise ConfigError("DarConfig.feature_dim does not match the training data")
    idx = index or build_reference_index(train, "train")
    if init is not None:
        if init.config != dar_cfg:
            raise ConfigError("warm-start parameters were built for a different config")
        params = init.copy()
    else:
        shift, scale = feature_normalisation(train)
        params = init_params(dar_cfg, np.random.default_rng([seed, 2]), shift, scale)
    opt = Adam(params.arrays)
    queries = list(idx.samples)
    n = len(queries)
    steps_per_epoch = math.ceil(n / train_cfg.batch_size)
    total_steps = train_cfg.epochs * steps_per_epoch

    mon = None
    if monitor is not None and len(monitor) and bar is not None:
        est = np.atleast_1d(bar.predict(monitor.features))
        mon = monitor_batch(idx, monitor, est, retrieval_cfg, dar_cfg.C)

    log = []
    step = 0
    for epoch in range(train_cfg.epochs):
        order = np.random.default_rng([seed, 3, epoch]).permutation(n)
        sums = dict.fromkeys(("mse_a", "ce", "mean", "var", "mse_d", "total"), 0.0)
        lr = 0.0
        for start in range(0, n, train_cfg.batch_size):
            chunk = order[start:start + train_cfg.batch_size]
            batch = build_training_batch(idx, [queries[i] for i in chunk], err, retrieval_cfg, dar_cfg.C,
                                         [query_rng(seed, epoch, int(i)) for i in chunk])
            loss, grads, _ = loss_and_gradients(params, batch.pairs, batch.targets, train_cfg.loss, train=True,
                                                rng=np.random.default_rng([seed, 1, epoch, step]))
            lr = optimizer_step(params, grads, opt, step, total_steps, train_cfg.lr)
            step += 1
            for k, v in loss.as_dict().items():
                sums[k] += v * len(chunk)
        record = {"epoch": epoch + 1, "loss": sums["total"] / n}
        record.update({k: v / n for k, v in sums.items() if k != "total"})
        record["lr"] = lr
        if mon is not None:
            record["monitor_loss"] = total_loss(params, mon.pairs, mon.targets, train_cfg.loss)
        log.append(record)
        if on_epoch is not None:
            on_epoch(record)
    return TrainResult(params, log)


def write_log(log: list[dict], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in log:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
