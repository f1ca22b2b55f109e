"""Multi-task objective over oriented pairs and their query aggregates.

For a query with true label ``a`` and oriented pairs ``j`` (forward and
reverse, ``n_j`` of them):

    total_q = (1 + inner) * (y_hat - a)^2
              + (1 / n_j) * sum_j [CE_j + M_j + V_j + (d_j - delta_j)^2]

with ``CE = -log w_k``, ``M = (mean - delta)^2 / 2`` and ``V`` the variance of
the class distribution over the integer centres. ``inner`` keeps the duplicated
absolute term of the published objective; set it to False to drop the copy.
The batch loss is the mean of ``total_q`` over queries.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class LossConfig:
    inner_absolute: bool = True
    prob_floor: float = PROB_FLOOR


@dataclass
class PairTargets:
    """Targets and bookkeeping for a batch of oriented pairs.

    ``query`` maps each pair to its owning query; ``forward`` marks the pairs
    that take part in the query's aggregate estimate.
    """

    delta: np.ndarray  # (N,) target differential, a-side label minus b-side label
    cls: np.ndarray  # (N,) class index in [0, 2C]
    forward: np.ndarray  # (N,) bool
    query: np.ndarray  # (N,) int
    a_true: np.ndarray  # (Q,)
    a_hat: np.ndarray  # (Q,) initial estimate the refinement is added to

    @property
    def num_queries(self) -> int:
        return int(self.a_true.shape[0])


@dataclass
class LossBreakdown:
    mse_a: float
    ce: float
    mean: float
    var: float
    mse_d: float
    total: float

    def as_dict(self) -> dict:
        return {"mse_a": self.mse_a, "ce": self.ce, "mean": self.mean, "var": self.var,
                "mse_d": self.mse_d, "total": self.total}


@dataclass
class HeadGradients:
    logits: np.ndarray
    second_order: np.ndarray
    ref_logit: np.ndarray


def class_index(delta, C: int):
    """clamp(round(delta), -C, C) + C, rounding halves away from zero."""
    delta = np.asarray(delta, dtype=np.float64)
    r = np.sign(delta) * np.floor(np.abs(delta) + 0.5)
    return (np.clip(r, -C, C) + C).astype(np.int64)


def pair_terms(w, d_r, delta, cls, centers, floor=PROB_FLOOR, logp=None):
    """Per-pair CE, mean, variance and differential-MSE terms."""
    if logp is None:
        logp = np.log(np.maximum(w, floor))
    rows = np.arange(w.shape[0])
    ce = np.minimum(-logp[rows, cls], -np.log(floor))
    m = w @ centers
    lm = 0.5 * (m - delta) ** 2
    lv = np.einsum("nk,nk->n", w, (centers[None, :] - m[:, None]) ** 2)
    lmse = (d_r - delta) ** 2
    return ce, m, lm, lv, lmse


def segment_softmax(x, seg, nseg):
    top = np.full(nseg, -np.inf)
    np.maximum.at(top, seg, x)
    e = np.exp(x - top[seg])
    s = np.bincount(seg, weights=e, minlength=nseg)
    return e / s[seg]


def compute_losses(logits, w, second_order, d_r, ref_logit, t: PairTargets, C: int,
                   cfg: LossConfig = LossConfig(), need_grad: bool = True):
    """Loss breakdown and, optionally, gradients w.r.t. the head outputs."""
    centers = np.arange(-C, C + 1, dtype=np.float64)
    Q = t.num_queries
    shifted = logits - logits.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    ce, m, lm, lv, lmse = pair_terms(w, d_r, t.delta, t.cls, centers, cfg.prob_floor, logp)

    fw = np.flatnonzero(t.forward)
    qf = t.query[fw]
    w_r = segment_softmax(ref_logit[fw], qf, Q)
    y_hat = t.a_hat + np.bincount(qf, weights=w_r * d_r[fw], minlength=Q)
    err_a = y_hat - t.a_true
    mse_a = err_a ** 2

    n_pairs = np.bincount(t.query, minlength=Q).astype(np.float64)
    pair_sum = np.bincount(t.query, weights=ce + lm + lv + lmse, minlength=Q)
    alpha = 2.0 if cfg.inner_absolute else 1.0
    total_q = alpha * mse_a + pair_sum / n_pairs
    breakdown = LossBreakdown(
        mse_a=float(mse_a.mean()), ce=float(ce.mean()), mean=float(lm.mean()), var=float(lv.mean()),
        mse_d=float(lmse.mean()), total=float(total_q.mean()),
    )
    if not need_grad:
        return breakdown, None

    coef = 1.0 / (Q * n_pairs[t.query])
    g_dr = coef * 2.0 * (d_r - t.delta)
    g_abs = alpha / Q * 2.0 * err_a  # dL/dy_hat per query
    g_dr[fw] += g_abs[qf] * w_r
    d_bar = (y_hat - t.a_hat)[qf]
    g_rl = np.zeros_like(ref_logit)
    g_rl[fw] = g_abs[qf] * w_r * (d_r[fw] - d_bar)

    v = centers[None, :] + second_order
    g_w = g_dr[:, None] * v + coef[:, None] * ((m - t.delta)[:, None] * centers[None, :]
                                               + centers[None, :] ** 2 - 2.0 * m[:, None] * centers[None, :])
    g_logits = w * (g_w - np.einsum("nk,nk->n", w, g_w)[:, None])
    live = -logp[np.arange(len(ce)), t.cls] < -np.log(cfg.prob_floor)
    ce_grad = w.copy()
    ce_grad[np.arange(len(ce)), t.cls] -= 1.0
    g_logits += (coef * live)[:, None] * ce_grad
    g_dc = g_dr[:, None] * w
    return breakdown, HeadGradients(g_logits, g_dc, g_rl)
