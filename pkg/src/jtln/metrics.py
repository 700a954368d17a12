"""Category-relatedness cost metrics.

Each source category and each target category is treated as an empirical
distribution of feature vectors; the cost between two categories is a
distance between those distributions, either multi-kernel MMD (linear-time or
quadratic-time unbiased estimate of the squared discrepancy) or an entropic
OT transport cost under squared Euclidean ground cost.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Mapping, Optional, Sequence, Union

import numpy as np

from .errors import DimensionMismatch, InvalidConfig, JtlnError, MetricError, TooFewSamples
from .ot import CostMatrix, SinkhornConfig, sinkhorn_solve

BANDWIDTH_FACTORS = (0.25, 0.5, 1.0, 2.0, 4.0)


@dataclass(frozen=True)
class EmpiricalMeasure:
    """Weighted point cloud ``sum_i w_i delta(x_i)``; uniform weights by default."""

    points: np.ndarray
    weights: Optional[np.ndarray] = None

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64)
        if pts.ndim == 1:
            pts = pts[None, :]
        if pts.ndim != 2 or pts.shape[0] < 1:
            raise DimensionMismatch("points must be an (n, d) array with n >= 1")
        if not np.all(np.isfinite(pts)):
            raise ValueError("points must be finite")
        n = pts.shape[0]
        if self.weights is None:
            w = np.full(n, 1.0 / n)
        else:
            w = np.array(self.weights, dtype=np.float64)
            if w.shape != (n,):
                raise DimensionMismatch("weights must have one entry per point")
            if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
                raise ValueError("weights must be a probability vector")
        pts.setflags(write=False)
        w.setflags(write=False)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "weights", w)

    @property
    def size(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    @property
    def is_uniform(self) -> bool:
        return bool(np.allclose(self.weights, 1.0 / self.size, rtol=0, atol=1e-12))


@dataclass(frozen=True)
class KernelSpec:
    """Convex combination of Gaussian kernels ``exp(-|x-y|^2 / (2 sigma^2))``."""

    bandwidths: tuple
    coefficients: Optional[tuple] = None

    def __post_init__(self):
        bw = tuple(float(b) for b in self.bandwidths)
        if len(bw) < 1 or any(not b > 0 for b in bw):
            raise InvalidConfig("need at least one positive bandwidth")
        if self.coefficients is None:
            coef = tuple(1.0 / len(bw) for _ in bw)
        else:
            coef = tuple(float(c) for c in self.coefficients)
        if len(coef) != len(bw):
            raise InvalidConfig("one coefficient per bandwidth required")
        if any(c < 0 for c in coef) or abs(sum(coef) - 1.0) > 1e-9:
            raise InvalidConfig("kernel coefficients must lie on the simplex")
        object.__setattr__(self, "bandwidths", bw)
        object.__setattr__(self, "coefficients", coef)

    def __call__(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        """Kernel matrix between the rows of ``x`` and the rows of ``y``."""
        return self.from_sq_dists(sq_dists(x, y))

    def pointwise(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        """Kernel values ``k(x_i, y_i)`` for paired rows."""
        d2 = np.sum((x - y) ** 2, axis=-1)
        return self.from_sq_dists(d2)

    def from_sq_dists(self, d2: np.ndarray) -> np.ndarray:
        out = np.zeros_like(d2, dtype=np.float64)
        for beta, sigma in zip(self.coefficients, self.bandwidths):
            out += beta * np.exp(-d2 / (2.0 * sigma * sigma))
        return out


def sq_dists(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Pairwise squared Euclidean distances, computed by direct differencing."""
    diff = x[:, None, :] - y[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def median_heuristic_kernel(a: EmpiricalMeasure, b: EmpiricalMeasure,
                            factors: Sequence[float] = BANDWIDTH_FACTORS) -> KernelSpec:
    """Gaussian family at ``factors`` times the median pairwise distance of the pooled sample."""
    pooled = np.vstack([a.points, b.points])
    d2 = sq_dists(pooled, pooled)
    iu = np.triu_indices(pooled.shape[0], k=1)
    med = float(np.median(np.sqrt(d2[iu]))) if iu[0].size else 0.0
    if not med > 0:
        med = 1.0
    return KernelSpec(tuple(f * med for f in factors))


def _check_pair(a: EmpiricalMeasure, b: EmpiricalMeasure, min_points: int):
    if a.dim != b.dim:
        raise DimensionMismatch(f"feature dimensions differ: {a.dim} vs {b.dim}")
    if a.size < min_points or b.size < min_points:
        raise TooFewSamples(
            f"need at least {min_points} points per sample, got {a.size} and {b.size}"
        )


def mk_mmd_linear(a: EmpiricalMeasure, b: EmpiricalMeasure,
                  kernel: Optional[KernelSpec] = None, seed: Optional[int] = 0) -> float:
    """Linear-time unbiased estimate of the squared MK-MMD.

    Both samples are shuffled with ``seed`` (``None`` keeps the given order),
    truncated to the largest common even count ``n`` and consumed as quad-tuples
    ``(s1, s2, t1, t2)``.  The estimate is the mean of
    ``k(s1,s2) + k(t1,t2) - k(s1,t2) - k(s2,t1)`` and can be negative.
    """
    _check_pair(a, b, 4)
    if not (a.is_uniform and b.is_uniform):
        raise ValueError("linear MMD estimator requires uniformly weighted samples")
    kernel = kernel or median_heuristic_kernel(a, b)
    xs, xt = a.points, b.points
    if seed is not None:
        rng = np.random.default_rng(seed)
        xs = xs[rng.permutation(xs.shape[0])]
        xt = xt[rng.permutation(xt.shape[0])]
    n = 2 * (min(xs.shape[0], xt.shape[0]) // 2)
    s1, s2 = xs[0:n:2], xs[1:n:2]
    t1, t2 = xt[0:n:2], xt[1:n:2]
    g = (kernel.pointwise(s1, s2) + kernel.pointwise(t1, t2)
         - kernel.pointwise(s1, t2) - kernel.pointwise(s2, t1))
    return float(2.0 / n * g.sum())


def mk_mmd_squared(a: EmpiricalMeasure, b: EmpiricalMeasure,
                   kernel: Optional[KernelSpec] = None) -> float:
    """Quadratic-time unbiased estimate of the squared MK-MMD.

    Within-sample kernel means exclude the diagonal; the cross term averages
    over all pairs.
    """
    _check_pair(a, b, 2)
    kernel = kernel or median_heuristic_kernel(a, b)
    m, n = a.size, b.size
    kss = kernel(a.points, a.points)
    ktt = kernel(b.points, b.points)
    kst = kernel(a.points, b.points)
    within_s = (kss.sum() - np.trace(kss)) / (m * (m - 1))
    within_t = (ktt.sum() - np.trace(ktt)) / (n * (n - 1))
    return float(within_s + within_t - 2.0 * kst.mean())


def ot_distance(a: EmpiricalMeasure, b: EmpiricalMeasure,
                config: SinkhornConfig = SinkhornConfig(lam=200.0)) -> float:
    """Entropic OT transport cost between two weighted point clouds.

    The squared-Euclidean ground cost is divided by its maximum before scaling
    and the result multiplied back, so the value is in the original units.
    """
    if a.dim != b.dim:
        raise DimensionMismatch(f"feature dimensions differ: {a.dim} vs {b.dim}")
    C = sq_dists(a.points, b.points)
    scale = float(C.max())
    if scale == 0.0:
        return 0.0
    sol = sinkhorn_solve(a.weights, b.weights, C / scale, config)
    return sol.loss * scale


@dataclass(frozen=True)
class CategoryBank:
    """Per-category feature samples; ``categories`` maps label id to measure."""

    categories: Mapping
    feature_dim: int

    def __post_init__(self):
        if self.feature_dim < 1:
            raise DimensionMismatch("feature_dim must be positive")
        cats = dict(self.categories)
        for label, measure in cats.items():
            if not isinstance(measure, EmpiricalMeasure):
                measure = EmpiricalMeasure(measure)
                cats[label] = measure
            if measure.dim != self.feature_dim:
                raise DimensionMismatch(
                    f"category {label!r} has dimension {measure.dim}, expected {self.feature_dim}"
                )
        object.__setattr__(self, "categories", cats)

    @property
    def labels(self) -> tuple:
        return tuple(self.categories)

    @classmethod
    def from_labeled(cls, features: np.ndarray, labels: np.ndarray,
                     label_count: Optional[int] = None) -> "CategoryBank":
        """Group rows of ``features`` by label; every label in ``range(label_count)`` must occur."""
        features = np.asarray(features, dtype=np.float64)
        labels = np.asarray(labels)
        count = int(label_count) if label_count is not None else int(labels.max()) + 1
        cats = {}
        for k in range(count):
            rows = features[labels == k]
            if rows.shape[0] == 0:
                raise TooFewSamples(f"category {k} has no samples")
            cats[k] = EmpiricalMeasure(rows)
        return cls(cats, features.shape[1])


class CostMethod(str, enum.Enum):
    MK_MMD_LINEAR = "mk-mmd-linear"
    MK_MMD_SQUARED = "mk-mmd-squared"
    OT_DISTANCE = "ot"


@dataclass(frozen=True)
class MmdParams:
    """``kernel=None`` picks the median-heuristic family per category pair.

    ``repeats`` averages the linear estimator over that many shuffles.
    """

    kernel: Optional[KernelSpec] = None
    seed: int = 0
    repeats: int = 1


def pair_seeds(seed: int, i: int, j: int, repeats: int) -> list:
    ss = np.random.SeedSequence([seed, i, j])
    return [int(s) for s in ss.generate_state(repeats, dtype=np.uint32)]


def category_distance(a: EmpiricalMeasure, b: EmpiricalMeasure, method: CostMethod,
                      params=None, pair_index: tuple = (0, 0)) -> float:
    method = CostMethod(method)
    if method is CostMethod.OT_DISTANCE:
        return ot_distance(a, b, params if params is not None else SinkhornConfig(lam=200.0))
    params = params if params is not None else MmdParams()
    if method is CostMethod.MK_MMD_SQUARED:
        return mk_mmd_squared(a, b, params.kernel)
    kernel = params.kernel or median_heuristic_kernel(a, b)
    seeds = pair_seeds(params.seed, pair_index[0], pair_index[1], max(1, params.repeats))
    return float(np.mean([mk_mmd_linear(a, b, kernel, s) for s in seeds]))


def build_cost_matrix(source: CategoryBank, target: CategoryBank,
                      method: Union[CostMethod, str],
                      params: Union[MmdParams, SinkhornConfig, None] = None) -> CostMatrix:
    """Cost matrix whose entry ``(i, j)`` is the distance between source category i and target category j.

    Negative MMD estimates are clamped to zero and the matrix is divided by
    its maximum (skipped when every entry is zero).  A failure on any pair is
    re-raised as ``MetricError`` naming that pair.
    """
    if source.feature_dim != target.feature_dim:
        raise DimensionMismatch(
            f"feature dimensions differ: {source.feature_dim} vs {target.feature_dim}"
        )
    method = CostMethod(method)
    rows, cols = source.labels, target.labels
    entries = np.zeros((len(rows), len(cols)))
    for i, sl in enumerate(rows):
        for j, tl in enumerate(cols):
            try:
                d = category_distance(source.categories[sl], target.categories[tl],
                                      method, params, (i, j))
            except JtlnError as exc:
                raise MetricError(sl, tl, exc) from exc
            entries[i, j] = max(d, 0.0)
    scale = float(entries.max())
    if scale > 0:
        return CostMatrix(entries / scale, rows, cols, normalized=True, scale=scale)
    return CostMatrix(entries, rows, cols, normalized=False, scale=1.0)
