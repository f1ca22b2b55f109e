"""Seeded synthetic benchmark harness.

Runs the ridge baseline and successive refinement rounds on generated data and
reports test MAE, plus the ablations used for comparison (error distribution,
retrieval method, reference count, head design, iteration count).
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from .baseline import compute_residuals, fit_ridge_baseline
from .dar import DarConfig
from .dataset import Dataset, GroupDef, SynthConfig, generate_synthetic, subject_exclusive_split
from .evaluation import mean_absolute_error
from .pipeline import Pipeline, fit_error_distribution, refine_iteration
from .retrieval import RetrievalConfig, build_reference_index
from .training import TrainConfig, train_dar


@dataclass(frozen=True)
class BenchmarkConfig:
    synth: SynthConfig = SynthConfig(num_subjects=500, samples_per_subject=4, feature_dim=32, noise_sigma=0.6)
    train_frac: float = 0.78
    dist_frac: float = 0.02
    ridge_lambda: float = 1.0
    hidden: tuple[int, ...] = (128, 64)
    embed_dim: int = 16
    C: int = 20
    dropout: float = 0.2
    second_order: bool = True
    epochs: int = 20
    lr: float = 1e-3
    batch_size: int = 32
    retrieval: RetrievalConfig = RetrievalConfig()
    iterations: int = 2
    error_dist: str = "kde"
    clip_bound: float = 20.0

    def dar_config(self, ds: Dataset) -> DarConfig:
        return DarConfig(ds.feature_dim, ds.label_min, ds.label_max, self.embed_dim, self.hidden, self.C,
                         self.dropout, self.second_order)

    def train_config(self, epochs: int | None = None) -> TrainConfig:
        return TrainConfig(epochs=epochs or self.epochs, batch_size=self.batch_size, lr=self.lr)


@dataclass
class BenchmarkResult:
    seed: int
    bar_mae: float
    iteration_mae: list[float]
    seconds: list[float]
    stages: list[Pipeline] = field(default_factory=list, repr=False)
    test: Dataset | None = field(default=None, repr=False)


def benchmark_data(cfg: BenchmarkConfig, seed: int):
    ds = generate_synthetic(replace(cfg.synth, seed=seed))
    return subject_exclusive_split(ds, cfg.train_frac, cfg.dist_frac, seed)


def run_benchmark(cfg: BenchmarkConfig = BenchmarkConfig(), seed: int = 0, keep_stages: bool = False,
                  on_epoch=None) -> BenchmarkResult:
    train, dist, test = benchmark_data(cfg, seed)
    bar = fit_ridge_baseline(train, cfg.ridge_lambda)
    bar_mae = mean_absolute_error(bar.predict(test.features), test.labels)
    maes, seconds = [], []
    current = bar
    idx = build_reference_index(train, "train")
    stages = []
    for _ in range(cfg.iterations):
        t0 = time.perf_counter()
        current = refine_iteration(train, dist, current, cfg.dar_config(train), cfg.train_config(),
                                   cfg.retrieval, seed=seed, clip_bound=cfg.clip_bound,
                                   error_dist=cfg.error_dist, index=idx, on_epoch=on_epoch)
        seconds.append(time.perf_counter() - t0)
        maes.append(mean_absolute_error(current.predict(test.features), test.labels))
        stages.append(current)
    return BenchmarkResult(seed, bar_mae, maes, seconds, stages if keep_stages else [],
                           test if keep_stages else None)


@dataclass
class ConvergenceResult:
    seed: int
    uniform_curve: list[float]
    kde_curve: list[float]
    target: float
    kde_epochs_to_target: float  # inf when never reached


def run_error_dist_convergence(cfg: BenchmarkConfig = BenchmarkConfig(), seed: int = 0,
                               reference_epoch: int = 50) -> ConvergenceResult:
    """Epochs the KDE-augmented run needs to match the uniform run's
    held-out loss at ``reference_epoch``.

    Both variants use the same ``reference_epoch``-long cosine schedule; the
    loss is measured on the test partition under the prediction protocol
    (retrieval at the baseline estimate, no augmentation).
    """
    train, dist, test = benchmark_data(cfg, seed)
    bar = fit_ridge_baseline(train, cfg.ridge_lambda)
    idx = build_reference_index(train, "train")
    dar_cfg = cfg.dar_config(train)
    tcfg = cfg.train_config(reference_epoch)
    curves = {}
    target = None
    for kind in ("uniform", "kde"):
        err = fit_error_distribution(bar, dist, cfg.clip_bound, kind)
        curve: list[float] = []

        class _Reached(Exception):
            pass

        def watch(rec, curve=curve):
            curve.append(rec["monitor_loss"])
            if target is not None and rec["monitor_loss"] <= target:
                raise _Reached

        try:
            train_dar(train, bar, err, dar_cfg, tcfg, cfg.retrieval, seed, index=idx, monitor=test,
                      on_epoch=watch)
        except _Reached:
            pass
        curves[kind] = curve
        if kind == "uniform":
            target = curve[reference_epoch - 1]
    kde = curves["kde"]
    reached = next((i + 1 for i, v in enumerate(kde) if v <= target), float("inf"))
    return ConvergenceResult(seed, curves["uniform"], kde, float(target), reached)


def imbalanced_config(cfg: BenchmarkConfig = BenchmarkConfig(), aging: float = 4.0, shift: float = 0.0,
                      weights=(0.8, 0.2)) -> BenchmarkConfig:
    """Benchmark variant with one two-category attribute in the given proportions.

    The minority looks ``aging`` label units older than it is. A constant
    feature offset alone is absorbed by the learners and yields no gap.
    """
    group = GroupDef("group", ("majority", "minority"), shift, tuple(weights), aging)
    return replace(cfg, synth=replace(cfg.synth, group_defs=(group,)))


def residual_mae(model, ds: Dataset) -> float:
    return float(np.abs(compute_residuals(model, ds)).mean())
