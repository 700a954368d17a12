"""Shared-extractor network with a source head and a target head.

    features = relu(x @ w_hidden + b_hidden)
    h_s      = softmax(features @ w_source + b_source)
    h_t      = softmax(features @ w_target + b_target)

The training objective is

    lambda_t * CE_target + lambda_s * CE_source + lambda_ot * OT(h_s(x_t), h_t(x_t))

where the OT term is evaluated on target samples only.  Gradients are written
out by hand; the OT term contributes the tangent dual potentials of each
per-sample scaling problem, pushed through the softmax Jacobians.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace
from typing import List, Optional

import numpy as np

from .errors import DimensionMismatch, JtlnError, NonFiniteLoss, NumericalUnderflow, SchemaError
from .ot import CostMatrix, Histogram, SinkhornConfig, batch_entropic_value, sinkhorn_batch, tangent_potentials

CE_FLOOR = 1e-300

# independent PRNG streams derived from TrainConfig.seed
STREAM_INIT = 0
STREAM_TARGET_ORDER = 1
STREAM_SOURCE_ORDER = 2
STREAM_REINIT = 3


def stream(seed: int, purpose: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, purpose])))


@dataclass
class ModelParams:
    w_hidden: np.ndarray
    b_hidden: np.ndarray
    w_source: np.ndarray
    b_source: np.ndarray
    w_target: np.ndarray
    b_target: np.ndarray

    @property
    def names(self) -> List[str]:
        return [f.name for f in fields(self)]

    def arrays(self) -> List[np.ndarray]:
        return [getattr(self, n) for n in self.names]

    def copy(self) -> "ModelParams":
        return ModelParams(*(a.copy() for a in self.arrays()))

    def zeros_like(self) -> "ModelParams":
        return ModelParams(*(np.zeros_like(a) for a in self.arrays()))

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.arrays())

    @property
    def input_dim(self) -> int:
        return self.w_hidden.shape[0]

    @property
    def source_labels(self) -> int:
        return self.w_source.shape[1]

    @property
    def target_labels(self) -> int:
        return self.w_target.shape[1]


def _uniform_layer(rng: np.random.Generator, fan_in: int, fan_out: int):
    bound = 1.0 / math.sqrt(fan_in)
    w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
    b = rng.uniform(-bound, bound, size=fan_out)
    return w, b


def init_params(input_dim: int, hidden_dim: int, source_labels: int, target_labels: int,
                rng: np.random.Generator) -> ModelParams:
    """Uniform init on ``[-1/sqrt(fan_in), 1/sqrt(fan_in)]`` for every layer."""
    wh, bh = _uniform_layer(rng, input_dim, hidden_dim)
    ws, bs = _uniform_layer(rng, hidden_dim, source_labels)
    wt, bt = _uniform_layer(rng, hidden_dim, target_labels)
    return ModelParams(wh, bh, ws, bs, wt, bt)


def reinit_target_head(params: ModelParams, rng: np.random.Generator) -> ModelParams:
    out = params.copy()
    out.w_target, out.b_target = _uniform_layer(rng, params.w_hidden.shape[1], params.target_labels)
    return out


@dataclass(frozen=True)
class LabeledSet:
    """Feature rows with 0-based integer labels in ``range(label_count)``."""

    features: np.ndarray
    labels: np.ndarray
    label_count: int

    def __post_init__(self):
        x = np.array(self.features, dtype=np.float64)
        y = np.array(self.labels, dtype=np.int64)
        if x.ndim != 2 or y.ndim != 1 or x.shape[0] != y.shape[0]:
            raise DimensionMismatch("features must be (n, d) and labels (n,)")
        if x.shape[0] < 1:
            raise SchemaError("a labeled set needs at least one sample")
        if self.label_count < 1 or np.any(y < 0) or np.any(y >= self.label_count):
            raise SchemaError(f"labels must lie in [0, {self.label_count})")
        x.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y)

    def __len__(self) -> int:
        return self.labels.size

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    def subset(self, idx) -> "LabeledSet":
        return LabeledSet(self.features[idx], self.labels[idx], self.label_count)


@dataclass(frozen=True)
class TrainConfig:
    lambda_s: float = 1.0
    lambda_ot: float = 0.0
    sinkhorn: SinkhornConfig = SinkhornConfig(lam=100.0)
    learning_rate: float = 0.05
    batch_size: int = 16
    epochs: int = 200
    seed: int = 0
    hidden_dim: int = 32
    lambda_t: float = 1.0

    def __post_init__(self):
        if self.lambda_s < 0 or self.lambda_ot < 0 or self.lambda_t < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be nonnegative")
        if self.batch_size < 1 or self.epochs < 1 or self.hidden_dim < 1:
            raise ValueError("batch_size, epochs and hidden_dim must be positive")


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def forward(params: ModelParams, x):
    """Return ``(features, h_s, h_t)`` for one input vector or a batch of rows."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != params.input_dim:
        raise DimensionMismatch(f"input has length {x.shape[-1]}, expected {params.input_dim}")
    feats = np.maximum(x @ params.w_hidden + params.b_hidden, 0.0)
    h_s = softmax(feats @ params.w_source + params.b_source)
    h_t = softmax(feats @ params.w_target + params.b_target)
    return feats, h_s, h_t


def cross_entropy(pred, label: int) -> float:
    """``-log pred[label]`` (``label`` is a 0-based index)."""
    p = pred.weights if isinstance(pred, Histogram) else np.asarray(pred, dtype=np.float64)
    return float(-math.log(max(float(p[label]), CE_FLOOR)))


def _ce_terms(probs: np.ndarray, labels: np.ndarray):
    picked = probs[np.arange(labels.size), labels]
    return -np.log(np.maximum(picked, CE_FLOOR))


@dataclass
class ObjectiveTerms:
    """Batch means of each term.

    ``ot`` is the entropic OT value (transport cost plus the scaled
    ``sum g log g`` term), which is the quantity the gradients differentiate;
    ``ot_transport`` is the transport cost ``<g, C>`` of the regularized plan.
    """

    target_ce: float
    source_ce: float
    ot: float
    ot_transport: float


def _ot_batch(h_s: np.ndarray, h_t: np.ndarray, cost: CostMatrix, config: SinkhornConfig):
    try:
        return sinkhorn_batch(h_s, h_t, cost, config)
    except NumericalUnderflow as exc:
        idx = getattr(exc, "indices", [])
        err = NumericalUnderflow(f"OT loss failed on target sample(s) {idx}: {exc}")
        err.indices = idx
        raise err from exc


def _check_shapes(params: ModelParams, target: LabeledSet, source: LabeledSet, cost: CostMatrix):
    if cost.shape != (params.source_labels, params.target_labels):
        raise DimensionMismatch(
            f"cost shape {cost.shape} does not match heads "
            f"({params.source_labels}, {params.target_labels})"
        )
    if target.label_count != params.target_labels or source.label_count != params.source_labels:
        raise DimensionMismatch("label counts do not match head sizes")


def objective_and_gradient(params: ModelParams, target_batch: LabeledSet, source_batch: LabeledSet,
                           cost: CostMatrix, config: TrainConfig, need_grad: bool = True,
                           skip_unweighted_ot: bool = False):
    """Objective value, its terms and (optionally) the analytic gradient.

    With ``skip_unweighted_ot`` the scaling problems are not solved when
    ``lambda_ot == 0``; the OT terms are then reported as NaN.
    """
    _check_shapes(params, target_batch, source_batch, cost)
    xt, yt = target_batch.features, target_batch.labels
    xs, ys = source_batch.features, source_batch.labels
    nt, ns = yt.size, ys.size

    pre_t = xt @ params.w_hidden + params.b_hidden
    ft = np.maximum(pre_t, 0.0)
    ps_t = softmax(ft @ params.w_source + params.b_source)
    pt_t = softmax(ft @ params.w_target + params.b_target)
    pre_s = xs @ params.w_hidden + params.b_hidden
    fs = np.maximum(pre_s, 0.0)
    ps_s = softmax(fs @ params.w_source + params.b_source)

    target_ce = float(_ce_terms(pt_t, yt).mean())
    source_ce = float(_ce_terms(ps_s, ys).mean())

    solve_ot = not (skip_unweighted_ot and config.lambda_ot == 0)
    if solve_ot:
        batch = _ot_batch(ps_t, pt_t, cost, config.sinkhorn)
        ot_entropic = float(batch_entropic_value(batch, config.sinkhorn.lam).mean())
        ot_transport = float(batch.loss.mean())
    else:
        batch = None
        ot_entropic = ot_transport = float("nan")

    value = config.lambda_t * target_ce + config.lambda_s * source_ce
    if config.lambda_ot != 0:
        value += config.lambda_ot * ot_entropic
    terms = ObjectiveTerms(target_ce, source_ce, ot_entropic, ot_transport)
    if not need_grad:
        return value, terms, None

    # logits gradients
    onehot_t = np.zeros_like(pt_t)
    onehot_t[np.arange(nt), yt] = 1.0
    d_zt = config.lambda_t * (pt_t - onehot_t) / nt
    d_zs_t = np.zeros_like(ps_t)
    if config.lambda_ot != 0:
        alpha = tangent_potentials(batch.u, config.sinkhorn.lam)
        beta = tangent_potentials(batch.v, config.sinkhorn.lam)
        w = config.lambda_ot / nt
        d_zs_t += w * ps_t * (alpha - np.sum(alpha * ps_t, axis=1, keepdims=True))
        d_zt += w * pt_t * (beta - np.sum(beta * pt_t, axis=1, keepdims=True))
    onehot_s = np.zeros_like(ps_s)
    onehot_s[np.arange(ns), ys] = 1.0
    d_zs_s = config.lambda_s * (ps_s - onehot_s) / ns

    grad = params.zeros_like()
    grad.w_source = ft.T @ d_zs_t + fs.T @ d_zs_s
    grad.b_source = d_zs_t.sum(axis=0) + d_zs_s.sum(axis=0)
    grad.w_target = ft.T @ d_zt
    grad.b_target = d_zt.sum(axis=0)

    d_pre_t = (d_zs_t @ params.w_source.T + d_zt @ params.w_target.T) * (pre_t > 0)
    d_pre_s = (d_zs_s @ params.w_source.T) * (pre_s > 0)
    grad.w_hidden = xt.T @ d_pre_t + xs.T @ d_pre_s
    grad.b_hidden = d_pre_t.sum(axis=0) + d_pre_s.sum(axis=0)
    return value, terms, grad


def jtln_objective(params: ModelParams, target_batch: LabeledSet, source_batch: LabeledSet,
                   cost: CostMatrix, config: TrainConfig):
    """Return ``(value, terms)`` of the joint objective on the given batches."""
    value, terms, _ = objective_and_gradient(params, target_batch, source_batch, cost, config,
                                             need_grad=False)
    return value, terms


def backward(params: ModelParams, target_batch: LabeledSet, source_batch: LabeledSet,
             cost: CostMatrix, config: TrainConfig) -> ModelParams:
    """Analytic gradient of ``jtln_objective`` with respect to every parameter."""
    return objective_and_gradient(params, target_batch, source_batch, cost, config)[2]


def sgd_step(params: ModelParams, grad: ModelParams, learning_rate: float) -> ModelParams:
    return ModelParams(*(p - learning_rate * g for p, g in zip(params.arrays(), grad.arrays())))


def accuracy(params: ModelParams, data: LabeledSet) -> float:
    _, _, h_t = forward(params, data.features)
    return float(np.mean(np.argmax(h_t, axis=1) == data.labels))


@dataclass
class EpochRecord:
    epoch: int
    target_ce: float
    source_ce: float
    ot_loss: float
    ot_transport: float
    objective: float
    test_accuracy: float

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass
class TrainReport:
    records: List[EpochRecord]
    params: ModelParams
    initial_params: ModelParams = field(repr=False)

    @property
    def final_accuracy(self) -> float:
        return self.records[-1].test_accuracy


def _evaluate(params, target_train, source, cost, config, target_test, epoch) -> EpochRecord:
    value, terms, _ = objective_and_gradient(params, target_train, source, cost, config, need_grad=False)
    return EpochRecord(
        epoch=epoch,
        target_ce=terms.target_ce,
        source_ce=terms.source_ce,
        ot_loss=terms.ot,
        ot_transport=terms.ot_transport,
        objective=value,
        test_accuracy=accuracy(params, target_test),
    )


class _SourceCycler:
    """Endless shuffled pass over the source set, reshuffled on every wrap."""

    def __init__(self, n: int, rng: np.random.Generator):
        self.n = n
        self.rng = rng
        self.order = rng.permutation(n)
        self.pos = 0

    def take(self, k: int) -> np.ndarray:
        out = []
        while k > 0:
            if self.pos == self.n:
                self.order = self.rng.permutation(self.n)
                self.pos = 0
            step = min(k, self.n - self.pos)
            out.append(self.order[self.pos:self.pos + step])
            self.pos += step
            k -= step
        return np.concatenate(out)


def train(target_train: LabeledSet, source: LabeledSet, cost: CostMatrix, config: TrainConfig,
          target_test: LabeledSet, init: Optional[ModelParams] = None) -> TrainReport:
    """Seeded mini-batch SGD on the joint objective.

    One epoch is a shuffled pass over the target training set in batches of
    ``batch_size``; every step pairs the target batch with the next
    ``batch_size`` source samples from an independently shuffled cycle.
    Metrics are recorded on the full sets at the end of each epoch.
    """
    if init is None:
        params = init_params(target_train.feature_dim, config.hidden_dim,
                             source.label_count, target_train.label_count,
                             stream(config.seed, STREAM_INIT))
    else:
        params = init.copy()
    initial = params.copy()
    _check_shapes(params, target_train, source, cost)
    target_rng = stream(config.seed, STREAM_TARGET_ORDER)
    source_iter = _SourceCycler(len(source), stream(config.seed, STREAM_SOURCE_ORDER))

    records = []
    for epoch in range(1, config.epochs + 1):
        order = target_rng.permutation(len(target_train))
        for start in range(0, order.size, config.batch_size):
            tb = target_train.subset(order[start:start + config.batch_size])
            sb = source.subset(source_iter.take(config.batch_size))
            value, _, grad = objective_and_gradient(params, tb, sb, cost, config,
                                                    skip_unweighted_ot=True)
            if not math.isfinite(value) or not grad.all_finite():
                raise NonFiniteLoss(f"objective became non-finite at epoch {epoch}")
            params = sgd_step(params, grad, config.learning_rate)
        rec = _evaluate(params, target_train, source, cost, config, target_test, epoch)
        if not math.isfinite(rec.objective):
            raise NonFiniteLoss(f"objective became non-finite at epoch {epoch}")
        records.append(rec)
    return TrainReport(records, params, initial)


def train_consecutive(target_train: LabeledSet, source: LabeledSet, cost: CostMatrix,
                      config: TrainConfig, target_test: LabeledSet) -> TrainReport:
    """Two-phase baseline: source-only training, then target-only training.

    Phase one fits the extractor and source head on source cross-entropy;
    phase two draws a fresh target head and fits target cross-entropy with the
    extractor still trainable.  Both phases run ``config.epochs`` epochs and
    the returned report concatenates their records.
    """
    phase1 = train(target_train, source, cost,
                   replace(config, lambda_t=0.0, lambda_s=1.0, lambda_ot=0.0), target_test)
    start = reinit_target_head(phase1.params, stream(config.seed, STREAM_REINIT))
    phase2 = train(target_train, source, cost,
                   replace(config, lambda_t=1.0, lambda_s=0.0, lambda_ot=0.0), target_test, init=start)
    records = phase1.records + [replace(r, epoch=r.epoch + config.epochs) for r in phase2.records]
    return TrainReport(records, phase2.params, phase1.initial_params)


__all__ = [
    "EpochRecord",
    "JtlnError",
    "LabeledSet",
    "ModelParams",
    "ObjectiveTerms",
    "TrainConfig",
    "TrainReport",
    "accuracy",
    "backward",
    "cross_entropy",
    "forward",
    "init_params",
    "jtln_objective",
    "objective_and_gradient",
    "reinit_target_head",
    "sgd_step",
    "softmax",
    "train",
    "train_consecutive",
]
