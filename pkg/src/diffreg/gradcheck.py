"""Finite-difference verification of the hand-written backward pass."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dar import DarConfig, PairBatch, forward, init_params, loss_and_gradients
from .losses import LossConfig, PairTargets, class_index, compute_losses

TOLERANCE = 1e-4
STEP = 1e-4
DENOM_FLOOR = 1e-6


@dataclass
class GradCheckReport:
    max_rel_err: float
    per_param: dict[str, float]
    checked: int
    skipped_kinks: int
    untouched_rows_zero: bool
    failures: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return self.max_rel_err < TOLERANCE and self.untouched_rows_zero


def tiny_config(hidden=(32, 16), feature_dim=16, embed_dim=4, C=4) -> DarConfig:
    return DarConfig(feature_dim=feature_dim, label_min=20, label_max=40, embed_dim=embed_dim,
                     hidden=tuple(hidden), C=C, dropout=0.0)


def random_problem(cfg: DarConfig, rng: np.random.Generator, queries: int = 3, R: int = 2):
    """Random oriented-pair batch with both orientations for every reference."""
    d = cfg.feature_dim
    span = cfg.label_max - cfg.label_min
    # ages drawn from the lower half so some embedding rows stay untouched
    lo, hi = cfg.label_min + 2, cfg.label_min + span // 2
    a_f, a_age, b_f, b_age, delta, fwd, qid = [], [], [], [], [], [], []
    a_true = rng.integers(lo, hi + 1, size=queries).astype(float)
    a_hat = a_true + rng.normal(0.0, 1.5, size=queries)
    for q in range(queries):
        xq = rng.normal(size=d)
        t = int(np.clip(np.rint(a_hat[q]), cfg.label_min, cfg.label_max))
        for _ in range(R):
            xr = rng.normal(size=d)
            ar = float(rng.integers(lo, hi + 1))
            dl = a_true[q] - ar
            for forward_pair in (True, False):
                if forward_pair:
                    a_f.append(xq), a_age.append(t), b_f.append(xr), b_age.append(int(ar)), delta.append(dl)
                else:
                    a_f.append(xr), a_age.append(int(ar)), b_f.append(xq), b_age.append(t), delta.append(-dl)
                fwd.append(forward_pair)
                qid.append(q)
    batch = PairBatch(np.array(a_f), np.array(a_age), np.array(b_f), np.array(b_age))
    delta = np.array(delta)
    targets = PairTargets(delta, class_index(delta, cfg.C), np.array(fwd), np.array(qid), a_true, a_hat)
    return batch, targets


def _loss_and_pattern(params, batch, targets, loss_cfg):
    out = forward(params, batch)
    loss, _ = compute_losses(out.logits, out.class_probs, out.second_order, out.differential,
                             out.ref_logit, targets, params.config.C, loss_cfg, need_grad=False)
    pattern = np.concatenate([(z > 0).ravel() for _, z, _ in out.cache["layers"]])
    return loss.total, pattern


def gradient_check(cfg: DarConfig | None = None, seed: int = 0, R: int = 2, queries: int = 3,
                   loss_cfg: LossConfig = LossConfig(), step: float = STEP) -> GradCheckReport:
    """Compare analytic gradients with central differences on every parameter.

    Relative error is ``|g - n| / max(|g|, |n|, 1e-6)``. Entries whose
    perturbation flips a LeakyReLU pre-activation are not differentiable
    across the stencil; they are counted in ``skipped_kinks`` and excluded.
    """
    cfg = cfg or tiny_config()
    if cfg.dropout:
        raise ValueError("gradient check needs dropout disabled")
    rng = np.random.default_rng(seed)
    params = init_params(cfg, rng, shift=rng.normal(0, 0.1, cfg.feature_dim),
                         scale=rng.uniform(0.5, 2.0, cfg.feature_dim))
    batch, targets = random_problem(cfg, rng, queries, R)
    _, grads, out = loss_and_gradients(params, batch, targets, loss_cfg)

    used = set(out.cache["a_idx"]) | set(out.cache["b_idx"])
    untouched = [i for i in range(cfg.num_ages) if i not in used]
    untouched_zero = bool(np.all(grads["embedding"][untouched] == 0.0))

    per_param: dict[str, float] = {}
    worst = 0.0
    checked = skipped = 0
    failures = []
    probe = params.copy()
    for name, arr in probe.arrays.items():
        g = grads[name]
        err_here = 0.0
        for idx in np.ndindex(arr.shape):
            orig = arr[idx]
            arr[idx] = orig + step
            fp, pat_p = _loss_and_pattern(probe, batch, targets, loss_cfg)
            arr[idx] = orig - step
            fm, pat_m = _loss_and_pattern(probe, batch, targets, loss_cfg)
            arr[idx] = orig
            if not np.array_equal(pat_p, pat_m):
                skipped += 1
                continue
            num = (fp - fm) / (2 * step)
            rel = abs(g[idx] - num) / max(abs(g[idx]), abs(num), DENOM_FLOOR)
            checked += 1
            if rel >= TOLERANCE:
                failures.append((name, idx, float(g[idx]), float(num)))
            err_here = max(err_here, rel)
        per_param[name] = err_here
        worst = max(worst, err_here)
    return GradCheckReport(worst, per_param, checked, skipped, untouched_zero, failures)
