"""Differential regressor: pairwise network, aggregation, and hand-written
reverse mode.

Each (a-side, b-side) pair is encoded as

    concat(norm(x_a), E[age_a], norm(x_b), E[age_b])

and passed through an MLP (affine -> LeakyReLU -> dropout per layer). Three
heads read the last hidden vector: ``2C+1`` class logits, ``2C+1``
second-order corrections ``d_c``, and one reference-weight logit. The pair
differential is ``sum_c w_c (c + d_c)`` with ``w = softmax(logits)``; a query's
refined estimate is ``a_hat + sum_r softmax(ref_logits)_r d_r``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import AggregationError, ConfigError, InputError, NumericError
from .losses import LossConfig, PairTargets, compute_losses

LEAKY_SLOPE = 0.01
FULL_SCALE_HIDDEN = (2048, 1024, 512)


@dataclass(frozen=True)
class DarConfig:
    feature_dim: int
    label_min: int
    label_max: int
    embed_dim: int = 16
    hidden: tuple[int, ...] = FULL_SCALE_HIDDEN
    C: int = 20
    dropout: float = 0.2
    second_order: bool = True  # False: plain difference classifier, d_c = 0

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.feature_dim <= 0 or self.embed_dim <= 0:
            raise ConfigError("feature_dim and embed_dim must be positive")
        if not self.hidden or min(self.hidden) <= 0:
            raise ConfigError("hidden dims must be a nonempty list of positive sizes")
        if self.C < 1:
            raise ConfigError("C must be at least 1")
        if not 0 <= self.dropout < 1:
            raise ConfigError("dropout must lie in [0, 1)")
        if self.label_min > self.label_max:
            raise ConfigError("empty label range")

    @property
    def num_classes(self) -> int:
        return 2 * self.C + 1

    @property
    def num_ages(self) -> int:
        return self.label_max - self.label_min + 1

    @property
    def input_dim(self) -> int:
        return 2 * (self.feature_dim + self.embed_dim)

    def to_dict(self) -> dict:
        return {"feature_dim": self.feature_dim, "label_min": self.label_min, "label_max": self.label_max,
                "embed_dim": self.embed_dim, "hidden": list(self.hidden), "C": self.C,
                "dropout": self.dropout, "second_order": self.second_order}

    @classmethod
    def from_dict(cls, doc: dict) -> "DarConfig":
        return cls(int(doc["feature_dim"]), int(doc["label_min"]), int(doc["label_max"]),
                   int(doc["embed_dim"]), tuple(doc["hidden"]), int(doc["C"]), float(doc["dropout"]),
                   bool(doc["second_order"]))


def param_shapes(cfg: DarConfig) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {"embedding": (cfg.num_ages, cfg.embed_dim)}
    fan_in = cfg.input_dim
    for i, h in enumerate(cfg.hidden):
        shapes[f"backbone.{i}.weight"] = (fan_in, h)
        shapes[f"backbone.{i}.bias"] = (h,)
        fan_in = h
    K = cfg.num_classes
    shapes["heads.weight"] = (fan_in, K)
    shapes["heads.bias"] = (K,)
    shapes["class_head.weight"] = (fan_in, K)
    shapes["class_head.bias"] = (K,)
    shapes["ref_head.weight"] = (fan_in, 1)
    shapes["ref_head.bias"] = (1,)
    return shapes


@dataclass
class DarParams:
    """Learnable arrays plus fixed input normalisation (``shift``, ``scale``)."""

    config: DarConfig
    arrays: dict[str, np.ndarray]
    shift: np.ndarray
    scale: np.ndarray

    def __post_init__(self):
        expected = param_shapes(self.config)
        if list(self.arrays) != list(expected):
            raise ConfigError(f"parameter names {list(self.arrays)} do not match the config")
        for name, shape in expected.items():
            if self.arrays[name].shape != shape:
                raise ConfigError(f"parameter {name} has shape {self.arrays[name].shape}, expected {shape}")
        d = self.config.feature_dim
        if self.shift.shape != (d,) or self.scale.shape != (d,):
            raise ConfigError("normalisation vectors must match feature_dim")

    def __getitem__(self, name):
        return self.arrays[name]

    def copy(self) -> "DarParams":
        return DarParams(self.config, {k: v.copy() for k, v in self.arrays.items()},
                         self.shift.copy(), self.scale.copy())

    def zeros_like(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.arrays.items()}

    @property
    def num_layers(self) -> int:
        return len(self.config.hidden)


def init_params(cfg: DarConfig, rng: np.random.Generator, shift=None, scale=None) -> DarParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights and biases; N(0, 1)
    embedding rows."""
    arrays = {}
    for name, shape in param_shapes(cfg).items():
        if name == "embedding":
            arrays[name] = rng.standard_normal(shape)
            continue
        layer = name.rsplit(".", 1)[0]
        fan_in = param_shapes(cfg)[f"{layer}.weight"][0]
        bound = 1.0 / np.sqrt(fan_in)
        arrays[name] = rng.uniform(-bound, bound, size=shape)
    d = cfg.feature_dim
    shift = np.zeros(d) if shift is None else np.asarray(shift, dtype=np.float64).copy()
    scale = np.ones(d) if scale is None else np.asarray(scale, dtype=np.float64).copy()
    return DarParams(cfg, arrays, shift, scale)


def embed_label(params: DarParams, a) -> np.ndarray:
    """Embedding row(s) for integer label(s), clamped to the label range."""
    cfg = params.config
    idx = np.clip(np.asarray(a, dtype=np.int64) - cfg.label_min, 0, cfg.num_ages - 1)
    return params["embedding"][idx].copy()


@dataclass
class PairBatch:
    a_features: np.ndarray  # (N, d)
    a_age: np.ndarray  # (N,) integer ages fed to the embedding
    b_features: np.ndarray
    b_age: np.ndarray

    def __len__(self):
        return int(self.a_age.shape[0])


@dataclass
class PairOutput:
    """Batched pair outputs. Row ``n`` belongs to pair ``n`` of the input."""

    class_probs: np.ndarray  # (N, 2C+1)
    second_order: np.ndarray  # (N, 2C+1)
    differential: np.ndarray  # (N,)
    ref_logit: np.ndarray  # (N,)
    logits: np.ndarray
    cache: dict = field(default_factory=dict, repr=False)


@dataclass
class QueryOutput:
    differentials: np.ndarray
    ref_weights: np.ndarray
    estimate: float


def _check_finite(name, x):
    if not np.all(np.isfinite(x)):
        raise NumericError(f"non-finite values in {name}")


def forward(params: DarParams, batch: PairBatch, train: bool = False,
            rng: np.random.Generator | None = None) -> PairOutput:
    cfg = params.config
    d = cfg.feature_dim
    a_f = np.asarray(batch.a_features, dtype=np.float64)
    b_f = np.asarray(batch.b_features, dtype=np.float64)
    if a_f.ndim != 2 or a_f.shape[1] != d or b_f.shape != a_f.shape:
        raise InputError(f"pair features must have shape (N, {d})")
    a_idx = np.clip(np.asarray(batch.a_age, dtype=np.int64) - cfg.label_min, 0, cfg.num_ages - 1)
    b_idx = np.clip(np.asarray(batch.b_age, dtype=np.int64) - cfg.label_min, 0, cfg.num_ages - 1)
    T = params["embedding"]
    x = np.hstack([(a_f - params.shift) / params.scale, T[a_idx],
                   (b_f - params.shift) / params.scale, T[b_idx]])
    use_dropout = train and cfg.dropout > 0
    if use_dropout and rng is None:
        raise ConfigError("train-mode forward with dropout needs an rng")
    layers = []
    h = x
    for i in range(params.num_layers):
        z = h @ params[f"backbone.{i}.weight"] + params[f"backbone.{i}.bias"]
        act = np.where(z > 0, z, LEAKY_SLOPE * z)
        mask = None
        if use_dropout:
            mask = (rng.random(act.shape) >= cfg.dropout) / (1.0 - cfg.dropout)
            act = act * mask
        layers.append((h, z, mask))
        h = act
    logits = h @ params["class_head.weight"] + params["class_head.bias"]
    _check_finite("class_head logits", logits)
    w = np.exp(logits - logits.max(axis=1, keepdims=True))
    w /= w.sum(axis=1, keepdims=True)
    if cfg.second_order:
        dc = h @ params["heads.weight"] + params["heads.bias"]
        _check_finite("heads output", dc)
    else:
        dc = np.zeros_like(logits)
    rl = (h @ params["ref_head.weight"] + params["ref_head.bias"])[:, 0]
    _check_finite("ref_head logit", rl)
    centers = np.arange(-cfg.C, cfg.C + 1, dtype=np.float64)
    dr = np.einsum("nk,nk->n", w, centers[None, :] + dc)
    cache = {"a_idx": a_idx, "b_idx": b_idx, "layers": layers, "h": h}
    return PairOutput(w, dc, dr, rl, logits, cache)


def dae_pair_forward(params: DarParams, query_features, query_age_in: int, ref_features, ref_age: int,
                     train: bool = False, rng: np.random.Generator | None = None) -> PairOutput:
    """Single-pair convenience wrapper around :func:`forward`."""
    batch = PairBatch(np.atleast_2d(query_features), np.array([query_age_in]),
                      np.atleast_2d(ref_features), np.array([ref_age]))
    return forward(params, batch, train, rng)


def aggregate_refinement(a_hat: float, d_r, ref_logits) -> QueryOutput:
    d_r = np.asarray(d_r, dtype=np.float64).ravel()
    ref_logits = np.asarray(ref_logits, dtype=np.float64).ravel()
    if d_r.size == 0 or d_r.size != ref_logits.size:
        raise AggregationError("need equal, nonzero numbers of differentials and logits")
    e = np.exp(ref_logits - ref_logits.max())
    w_r = e / e.sum()
    return QueryOutput(d_r, w_r, float(a_hat + w_r @ d_r))


def backward(params: DarParams, out: PairOutput, g_logits, g_dc, g_rl) -> dict[str, np.ndarray]:
    """Gradients of a scalar loss given its gradients w.r.t. the head outputs."""
    cfg = params.config
    grads = params.zeros_like()
    h = out.cache["h"]
    grads["class_head.weight"] = h.T @ g_logits
    grads["class_head.bias"] = g_logits.sum(axis=0)
    g_h = g_logits @ params["class_head.weight"].T
    if cfg.second_order:
        grads["heads.weight"] = h.T @ g_dc
        grads["heads.bias"] = g_dc.sum(axis=0)
        g_h += g_dc @ params["heads.weight"].T
    grads["ref_head.weight"] = h.T @ g_rl[:, None]
    grads["ref_head.bias"] = np.array([g_rl.sum()])
    g_h += g_rl[:, None] @ params["ref_head.weight"].T
    for i in reversed(range(params.num_layers)):
        h_in, z, mask = out.cache["layers"][i]
        if mask is not None:
            g_h = g_h * mask
        g_z = g_h * np.where(z > 0, 1.0, LEAKY_SLOPE)
        grads[f"backbone.{i}.weight"] = h_in.T @ g_z
        grads[f"backbone.{i}.bias"] = g_z.sum(axis=0)
        g_h = g_z @ params[f"backbone.{i}.weight"].T
    d, m = cfg.feature_dim, cfg.embed_dim
    gT = grads["embedding"]
    np.add.at(gT, out.cache["a_idx"], g_h[:, d:d + m])
    np.add.at(gT, out.cache["b_idx"], g_h[:, 2 * d + m:])
    for name, g in grads.items():
        _check_finite(f"gradient of {name}", g)
    return grads


def loss_and_gradients(params: DarParams, batch: PairBatch, targets: PairTargets,
                       loss_cfg: LossConfig = LossConfig(), train: bool = False,
                       rng: np.random.Generator | None = None):
    out = forward(params, batch, train, rng)
    loss, g = compute_losses(out.logits, out.class_probs, out.second_order, out.differential,
                             out.ref_logit, targets, params.config.C, loss_cfg)
    grads = backward(params, out, g.logits, g.second_order, g.ref_logit)
    return loss, grads, out


def backward_gradients(params: DarParams, batch: PairBatch, targets: PairTargets,
                       loss_cfg: LossConfig = LossConfig(), train: bool = False,
                       rng: np.random.Generator | None = None) -> dict[str, np.ndarray]:
    return loss_and_gradients(params, batch, targets, loss_cfg, train, rng)[1]


def total_loss(params: DarParams, batch: PairBatch, targets: PairTargets,
               loss_cfg: LossConfig = LossConfig(), train: bool = False,
               rng: np.random.Generator | None = None) -> float:
    out = forward(params, batch, train, rng)
    loss, _ = compute_losses(out.logits, out.class_probs, out.second_order, out.differential,
                             out.ref_logit, targets, params.config.C, loss_cfg, need_grad=False)
    return loss.total
