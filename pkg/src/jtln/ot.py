"""Entropy-regularized discrete optimal transport between label histograms.

The solver follows plain-domain matrix scaling: with ``K = exp(-lam * C - 1)``
it alternates ``v <- nu / (K^T u)`` and ``u <- mu / (K v)`` until ``u`` stops
moving, then reports the transport cost ``<diag(u) K diag(v), C>_F`` of the
regularized plan.  The scaling vectors give the dual potentials
``alpha = log(u) / lam`` and ``beta = log(v) / lam``, which (shifted to sum to
zero) are the gradients of the loss with respect to the two histograms.

An exact transportation-simplex solver for tiny instances is included as a
reference for tests.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from numba import njit

from .errors import (
    DimensionMismatch,
    InstanceTooLarge,
    InvalidConfig,
    InvalidHistogram,
    InvalidSolution,
    NumericalUnderflow,
)

UNDERFLOW_FLOOR = 1e-300
EXACT_MAX_CELLS = 64


def _frozen_array(values, ndim: int, name: str) -> np.ndarray:
    arr = np.array(values, dtype=np.float64)
    if arr.ndim != ndim:
        raise DimensionMismatch(f"{name} must be {ndim}-dimensional, got shape {arr.shape}")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Histogram:
    """A point of the probability simplex over a label set."""

    weights: np.ndarray
    label_ids: Optional[tuple] = None

    def __post_init__(self):
        w = _frozen_array(self.weights, 1, "histogram weights")
        if w.size < 1:
            raise InvalidHistogram("histogram must have at least one bin")
        if not np.all(np.isfinite(w)) or np.any(w < 0):
            raise InvalidHistogram("histogram weights must be finite and nonnegative")
        if abs(w.sum() - 1.0) > 1e-9:
            raise InvalidHistogram(f"histogram weights sum to {w.sum()!r}, expected 1")
        object.__setattr__(self, "weights", w)
        if self.label_ids is not None:
            ids = tuple(self.label_ids)
            if len(ids) != w.size:
                raise DimensionMismatch("label_ids length differs from weights length")
            object.__setattr__(self, "label_ids", ids)

    def __len__(self) -> int:
        return self.weights.size

    @classmethod
    def uniform(cls, n: int) -> "Histogram":
        return cls(np.full(n, 1.0 / n))

    @classmethod
    def normalized(cls, values, label_ids=None) -> "Histogram":
        """Build a histogram from nonnegative masses by dividing by their total."""
        arr = np.asarray(values, dtype=np.float64)
        total = arr.sum()
        if not np.isfinite(total) or total <= 0:
            raise InvalidHistogram("masses must have a positive finite total")
        return cls(arr / total, label_ids)


@dataclass(frozen=True)
class CostMatrix:
    """Nonnegative ``L_s x L_t`` transfer costs between source and target labels.

    ``normalized`` and ``scale`` record whether the entries were divided by
    ``scale`` (their original maximum) to land in ``[0, 1]``.
    """

    entries: np.ndarray
    row_labels: Optional[tuple] = None
    col_labels: Optional[tuple] = None
    normalized: bool = False
    scale: float = 1.0

    def __post_init__(self):
        c = _frozen_array(self.entries, 2, "cost matrix")
        if c.shape[0] < 1 or c.shape[1] < 1:
            raise DimensionMismatch("cost matrix must be non-empty")
        if not np.all(np.isfinite(c)) or np.any(c < 0):
            raise InvalidHistogram("cost entries must be finite and nonnegative")
        object.__setattr__(self, "entries", c)
        rows = tuple(self.row_labels) if self.row_labels is not None else tuple(range(c.shape[0]))
        cols = tuple(self.col_labels) if self.col_labels is not None else tuple(range(c.shape[1]))
        if len(rows) != c.shape[0] or len(cols) != c.shape[1]:
            raise DimensionMismatch("label lists do not match cost matrix dimensions")
        object.__setattr__(self, "row_labels", rows)
        object.__setattr__(self, "col_labels", cols)

    @property
    def shape(self) -> tuple:
        return self.entries.shape


@dataclass(frozen=True)
class TransportPlan:
    coupling: np.ndarray
    row_marginal: Histogram
    col_marginal: Histogram

    def __post_init__(self):
        g = _frozen_array(self.coupling, 2, "coupling")
        if np.any(g < 0):
            raise InvalidSolution("coupling has negative entries")
        if g.shape != (len(self.row_marginal), len(self.col_marginal)):
            raise DimensionMismatch("coupling shape does not match its marginals")
        object.__setattr__(self, "coupling", g)

    def marginal_residual(self) -> float:
        """Sup-norm violation of both marginal constraints."""
        r = np.abs(self.coupling.sum(axis=1) - self.row_marginal.weights).max()
        c = np.abs(self.coupling.sum(axis=0) - self.col_marginal.weights).max()
        return float(max(r, c))


@dataclass(frozen=True)
class SinkhornConfig:
    """Scaling parameters.

    ``lam`` is the sharpness of the entropic term (larger is closer to exact
    OT); convergence is declared when ``max|u_new - u_old| < convergence_tol``.
    """

    lam: float = 100.0
    max_iterations: int = 1000
    convergence_tol: float = 1e-9
    clamp_epsilon: float = 1e-12

    def __post_init__(self):
        if not self.lam > 0:
            raise InvalidConfig("lam must be positive")
        if not self.convergence_tol > 0:
            raise InvalidConfig("convergence_tol must be positive")
        if not self.clamp_epsilon > 0:
            raise InvalidConfig("clamp_epsilon must be positive")
        if int(self.max_iterations) < 1:
            raise InvalidConfig("max_iterations must be at least 1")


@dataclass(frozen=True)
class OtSolution:
    loss: float
    plan: TransportPlan
    u: np.ndarray
    v: np.ndarray
    iterations_used: int
    converged: bool


@dataclass(frozen=True)
class GradientPair:
    d_mu: np.ndarray
    d_nu: np.ndarray


@dataclass
class BatchSolution:
    """Scaling results for ``B`` histogram pairs sharing one cost matrix.

    Row ``b`` of every array corresponds to pair ``b``.
    """

    loss: np.ndarray
    couplings: np.ndarray
    u: np.ndarray
    v: np.ndarray
    iterations_used: np.ndarray
    converged: np.ndarray
    mu: np.ndarray = field(repr=False)
    nu: np.ndarray = field(repr=False)


def _as_histogram(h) -> Histogram:
    return h if isinstance(h, Histogram) else Histogram(h)


def _as_cost(c) -> CostMatrix:
    return c if isinstance(c, CostMatrix) else CostMatrix(c)


def clamp_marginals(weights: np.ndarray, eps: float) -> np.ndarray:
    """Floor entries at ``eps`` and renormalize each row onto the simplex."""
    w = np.asarray(weights, dtype=np.float64)
    low = np.any(w < eps, axis=-1, keepdims=True)
    if np.any(low):
        floored = np.maximum(w, eps)
        w = np.where(low, floored / floored.sum(axis=-1, keepdims=True), w)
    return w


def gibbs_kernel(cost: np.ndarray, lam: float) -> np.ndarray:
    return np.exp(-lam * cost - 1.0)


@njit(cache=True)
def _scaling_rows(mu, nu, K, tol, max_iterations, u_out, v_out, iterations, converged, failed_at):
    """Alternating scaling for each row pair independently.

    ``failed_at[b]`` is set to ``+it`` (``K^T u``) or ``-it`` (``K v``) when a
    denominator drops below the underflow floor at iteration ``it``.
    """
    n, ls = mu.shape
    lt = nu.shape[1]
    for b in range(n):
        u = np.full(ls, 1.0 / ls)
        v = np.full(lt, 1.0 / lt)
        for it in range(1, max_iterations + 1):
            for j in range(lt):
                s = 0.0
                for i in range(ls):
                    s += K[i, j] * u[i]
                if s < UNDERFLOW_FLOOR:
                    failed_at[b] = it
                    break
                v[j] = nu[b, j] / s
            if failed_at[b] != 0:
                break
            delta = 0.0
            for i in range(ls):
                s = 0.0
                for j in range(lt):
                    s += K[i, j] * v[j]
                if s < UNDERFLOW_FLOOR:
                    failed_at[b] = -it
                    break
                un = mu[b, i] / s
                d = abs(un - u[i])
                if d > delta:
                    delta = d
                u[i] = un
            if failed_at[b] != 0:
                break
            iterations[b] = it
            if delta < tol:
                converged[b] = True
                break
        u_out[b, :] = u
        v_out[b, :] = v


def sinkhorn_batch(mu, nu, cost, config: SinkhornConfig = SinkhornConfig()) -> BatchSolution:
    """Run the scaling iterations on ``B`` histogram pairs at once.

    ``mu`` is ``(B, L_s)`` and ``nu`` is ``(B, L_t)``.  Each pair stops
    independently, so every row matches what a one-pair solve performs.
    """
    C = cost.entries if isinstance(cost, CostMatrix) else np.asarray(cost, dtype=np.float64)
    mu = np.atleast_2d(np.asarray(mu, dtype=np.float64))
    nu = np.atleast_2d(np.asarray(nu, dtype=np.float64))
    if mu.shape[0] != nu.shape[0]:
        raise DimensionMismatch(f"batch sizes differ: {mu.shape[0]} vs {nu.shape[0]}")
    ls, lt = C.shape
    if mu.shape[1] != ls or nu.shape[1] != lt:
        raise DimensionMismatch(
            f"histogram lengths ({mu.shape[1]}, {nu.shape[1]}) do not match cost shape {C.shape}"
        )
    mu = clamp_marginals(mu, config.clamp_epsilon)
    nu = clamp_marginals(nu, config.clamp_epsilon)
    K = gibbs_kernel(C, config.lam)

    n = mu.shape[0]
    u = np.empty((n, ls))
    v = np.empty((n, lt))
    iterations = np.zeros(n, dtype=np.int64)
    converged = np.zeros(n, dtype=bool)
    failed_at = np.zeros(n, dtype=np.int64)
    _scaling_rows(np.ascontiguousarray(mu), np.ascontiguousarray(nu), np.ascontiguousarray(K),
                  float(config.convergence_tol), int(config.max_iterations),
                  u, v, iterations, converged, failed_at)
    bad = np.flatnonzero(failed_at)
    if bad.size:
        b = int(bad[0])
        which = "K^T u" if failed_at[b] > 0 else "K v"
        err = NumericalUnderflow(
            f"{which} fell below {UNDERFLOW_FLOOR:g} at iteration {abs(int(failed_at[b]))} "
            f"for pair {b}; reduce lambda or rescale the cost matrix"
        )
        err.indices = bad.tolist()
        raise err

    if not (np.all(np.isfinite(u)) and np.all(np.isfinite(v))):
        raise NumericalUnderflow("scaling vectors overflowed; reduce lambda or rescale the cost matrix")
    couplings = u[:, :, None] * K[None, :, :] * v[:, None, :]
    loss = np.einsum("bij,ij->b", couplings, C)
    return BatchSolution(
        loss=loss,
        couplings=couplings,
        u=u,
        v=v,
        iterations_used=iterations,
        converged=converged,
        mu=mu,
        nu=nu,
    )


def sinkhorn_solve(mu, nu, cost, config: SinkhornConfig = SinkhornConfig()) -> OtSolution:
    """Approximate OT loss between two histograms by entropic matrix scaling.

    Raises ``DimensionMismatch`` on shape disagreement and
    ``NumericalUnderflow`` when ``K^T u`` or ``K v`` drops below 1e-300.
    Hitting ``max_iterations`` is reported through ``converged=False``.
    """
    mu = _as_histogram(mu)
    nu = _as_histogram(nu)
    cost = _as_cost(cost)
    batch = sinkhorn_batch(mu.weights[None, :], nu.weights[None, :], cost, config)
    plan = TransportPlan(
        batch.couplings[0],
        Histogram(batch.mu[0], mu.label_ids),
        Histogram(batch.nu[0], nu.label_ids),
    )
    u = batch.u[0].copy()
    v = batch.v[0].copy()
    u.setflags(write=False)
    v.setflags(write=False)
    return OtSolution(
        loss=float(batch.loss[0]),
        plan=plan,
        u=u,
        v=v,
        iterations_used=int(batch.iterations_used[0]),
        converged=bool(batch.converged[0]),
    )


def tangent_potentials(scaling: np.ndarray, lam: float) -> np.ndarray:
    """``log(s) / lam`` shifted so the entries along the last axis sum to zero."""
    logs = np.log(scaling) / lam
    return logs - logs.mean(axis=-1, keepdims=True)


def ot_loss_gradients(solution: OtSolution, config: SinkhornConfig = SinkhornConfig()) -> GradientPair:
    """Gradients of the OT loss with respect to both histograms.

    These are the dual potentials read off the scaling vectors, projected onto
    the tangent space of each simplex.
    """
    u = np.asarray(solution.u, dtype=np.float64)
    v = np.asarray(solution.v, dtype=np.float64)
    if not (np.all(np.isfinite(u)) and np.all(np.isfinite(v))):
        raise InvalidSolution("scaling vectors must be finite")
    if np.any(u <= 0) or np.any(v <= 0):
        raise InvalidSolution("scaling vectors must be strictly positive")
    return GradientPair(tangent_potentials(u, config.lam), tangent_potentials(v, config.lam))


def plan_entropy(plan) -> float:
    """``sum(g * log g)`` over the coupling, with ``0 log 0 = 0``.

    Note the sign: this is the negative Shannon entropy, so it is <= 0 for a
    probability coupling.
    """
    g = plan.coupling if isinstance(plan, TransportPlan) else np.asarray(plan, dtype=np.float64)
    pos = g[g > 0]
    return float(np.sum(pos * np.log(pos)))


def entropic_value(solution: OtSolution, config: SinkhornConfig = SinkhornConfig()) -> float:
    """Value of the regularized objective ``<g, C> + plan_entropy(g) / lam`` at the solution.

    This is the function whose exact gradient is ``ot_loss_gradients``; the
    reported ``solution.loss`` drops the entropic term.
    """
    return solution.loss + plan_entropy(solution.plan) / config.lam


def batch_entropic_value(batch: BatchSolution, lam: float) -> np.ndarray:
    g = batch.couplings
    with np.errstate(divide="ignore", invalid="ignore"):
        glogg = np.where(g > 0, g * np.log(np.where(g > 0, g, 1.0)), 0.0)
    return batch.loss + glogg.sum(axis=(1, 2)) / lam


def _northwest_corner(a: np.ndarray, b: np.ndarray):
    m, n = a.size, b.size
    s, d = a.copy(), b.copy()
    x = np.zeros((m, n))
    basic = np.zeros((m, n), dtype=bool)
    i = j = 0
    while True:
        q = min(s[i], d[j])
        x[i, j] = q
        basic[i, j] = True
        s[i] -= q
        d[j] -= q
        if i == m - 1 and j == n - 1:
            break
        if i == m - 1:
            j += 1
        elif j == n - 1 or s[i] <= d[j]:
            i += 1
        else:
            j += 1
    return x, basic


def _potentials(C: np.ndarray, basic: np.ndarray):
    m, n = C.shape
    u = np.full(m, np.nan)
    v = np.full(n, np.nan)
    u[0] = 0.0
    rows, cols = np.nonzero(basic)
    pending = True
    while pending:
        pending = False
        for i, j in zip(rows, cols):
            if np.isnan(u[i]) and not np.isnan(v[j]):
                u[i] = C[i, j] - v[j]
            elif np.isnan(v[j]) and not np.isnan(u[i]):
                v[j] = C[i, j] - u[i]
            elif np.isnan(u[i]) and np.isnan(v[j]):
                pending = True
    return u, v


def _tree_path(basic: np.ndarray, row: int, col: int):
    """Cells on the unique basis-tree path from row node ``row`` to column node ``col``."""
    m, n = basic.shape
    # nodes: rows 0..m-1, columns m..m+n-1
    parent = {("r", row): None}
    frontier = [("r", row)]
    while frontier:
        nxt = []
        for kind, k in frontier:
            if kind == "r":
                neigh = [("c", j) for j in np.flatnonzero(basic[k, :])]
            else:
                neigh = [("r", i) for i in np.flatnonzero(basic[:, k])]
            for node in neigh:
                if node not in parent:
                    parent[node] = (kind, k)
                    nxt.append(node)
        frontier = nxt
    path = []
    node = ("c", col)
    while parent[node] is not None:
        prev = parent[node]
        cell = (node[1], prev[1]) if node[0] == "r" else (prev[1], node[1])
        path.append(cell)
        node = prev
    # path runs from col back to row
    return path


def _transportation_simplex(a: np.ndarray, b: np.ndarray, C: np.ndarray, max_pivots: int = 10_000):
    x, basic = _northwest_corner(a, b)
    rtol = 1e-12 * max(1.0, float(C.max()))
    pivots = 0
    while pivots < max_pivots:
        u, v = _potentials(C, basic)
        reduced = C - u[:, None] - v[None, :]
        candidates = np.argwhere(~basic & (reduced < -rtol))
        if candidates.size == 0:
            break
        # Bland: lowest-index improving cell enters
        ei, ej = (int(t) for t in candidates[0])
        path = _tree_path(basic, ei, ej)
        minus = path[0::2]
        plus = path[1::2]
        theta = min(x[c] for c in minus)
        leaving = min(c for c in minus if x[c] <= theta)
        for c in minus:
            x[c] -= theta
        for c in plus:
            x[c] += theta
        x[ei, ej] += theta
        x[leaving] = 0.0
        basic[leaving] = False
        basic[ei, ej] = True
        pivots += 1
    return np.maximum(x, 0.0), pivots


def exact_ot_solve(mu, nu, cost) -> OtSolution:
    """Exact Kantorovich optimum by the transportation simplex method.

    Intended as a reference for small instances (``L_s * L_t <= 64``).  The
    ``u``/``v`` fields are all-ones placeholders.
    """
    mu = _as_histogram(mu)
    nu = _as_histogram(nu)
    cost = _as_cost(cost)
    C = cost.entries
    if C.shape != (len(mu), len(nu)):
        raise DimensionMismatch(f"histogram lengths ({len(mu)}, {len(nu)}) do not match cost shape {C.shape}")
    if C.size > EXACT_MAX_CELLS:
        raise InstanceTooLarge(f"exact solver limited to {EXACT_MAX_CELLS} cells, got {C.size}")
    a = mu.weights / mu.weights.sum()
    b = nu.weights / nu.weights.sum()
    x, pivots = _transportation_simplex(a, b, C)
    plan = TransportPlan(x, mu, nu)
    return OtSolution(
        loss=float(np.sum(x * C)),
        plan=plan,
        u=np.ones(len(mu)),
        v=np.ones(len(nu)),
        iterations_used=pivots,
        converged=True,
    )


def frobenius(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.sum(np.asarray(a) * np.asarray(b)))


__all__: Sequence[str] = [
    "BatchSolution",
    "CostMatrix",
    "GradientPair",
    "Histogram",
    "OtSolution",
    "SinkhornConfig",
    "TransportPlan",
    "batch_entropic_value",
    "clamp_marginals",
    "entropic_value",
    "exact_ot_solve",
    "frobenius",
    "gibbs_kernel",
    "ot_loss_gradients",
    "plan_entropy",
    "sinkhorn_batch",
    "sinkhorn_solve",
    "tangent_potentials",
]
