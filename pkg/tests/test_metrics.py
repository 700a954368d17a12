import numpy as np
import pytest

from jtln.errors import DimensionMismatch, InvalidConfig, MetricError, TooFewSamples
from jtln.metrics import (
    CategoryBank,
    CostMethod,
    EmpiricalMeasure,
    KernelSpec,
    MmdParams,
    build_cost_matrix,
    median_heuristic_kernel,
    mk_mmd_linear,
    mk_mmd_squared,
    ot_distance,
)
from jtln.ot import SinkhornConfig, exact_ot_solve


def gaussian_kernel_loop(x, y, sigma):
    return float(np.exp(-np.sum((x - y) ** 2) / (2 * sigma * sigma)))


def mmd_u_statistic(xs, xt, sigma):
    """Quadratic-time unbiased squared MMD by explicit double loops."""
    m, n = len(xs), len(xt)
    ss = sum(gaussian_kernel_loop(xs[i], xs[j], sigma) for i in range(m) for j in range(m) if i != j)
    tt = sum(gaussian_kernel_loop(xt[i], xt[j], sigma) for i in range(n) for j in range(n) if i != j)
    st = sum(gaussian_kernel_loop(xs[i], xt[j], sigma) for i in range(m) for j in range(n))
    return ss / (m * (m - 1)) + tt / (n * (n - 1)) - 2 * st / (m * n)


def separated_clouds(seed, n=200, d=4, gap=10.0):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(n, d)) + gap
    b = rng.normal(size=(n, d)) - gap
    return EmpiricalMeasure(a), EmpiricalMeasure(b)


def linear_mean_and_se(a, b, kernel, shuffles=100):
    vals = np.array([mk_mmd_linear(a, b, kernel, seed=s) for s in range(shuffles)])
    return vals.mean(), vals.std(ddof=1) / np.sqrt(shuffles)


# ----------------------------------------------------------------- types


def test_measure_validation():
    m = EmpiricalMeasure(np.zeros((3, 2)))
    np.testing.assert_allclose(m.weights, 1 / 3)
    assert m.is_uniform
    with pytest.raises(ValueError):
        EmpiricalMeasure([[np.nan, 0.0]])
    with pytest.raises(DimensionMismatch):
        EmpiricalMeasure(np.zeros((2, 2)), weights=[1.0])
    with pytest.raises(ValueError):
        EmpiricalMeasure(np.zeros((2, 2)), weights=[0.7, 0.7])


def test_kernel_spec_validation():
    np.testing.assert_allclose(KernelSpec((1.0, 2.0)).coefficients, [0.5, 0.5])
    with pytest.raises(InvalidConfig):
        KernelSpec(())
    with pytest.raises(InvalidConfig):
        KernelSpec((1.0, -1.0))
    with pytest.raises(InvalidConfig):
        KernelSpec((1.0,), (0.5,))


def test_median_heuristic_bandwidths():
    a = EmpiricalMeasure([[0.0], [1.0]])
    b = EmpiricalMeasure([[3.0], [4.0]])
    # pooled pairwise distances 1,3,4,2,3,1 -> median 2.5
    k = median_heuristic_kernel(a, b)
    np.testing.assert_allclose(k.bandwidths, [0.625, 1.25, 2.5, 5.0, 10.0])


# ----------------------------------------------------------------- linear estimator


def test_linear_identical_ordering_is_exactly_zero():
    pts = np.random.default_rng(1).normal(size=(10, 3))
    a = EmpiricalMeasure(pts)
    assert mk_mmd_linear(a, a, KernelSpec((1.0,)), seed=None) == 0.0


def test_linear_matches_explicit_quad_tuples():
    rng = np.random.default_rng(2)
    xs, xt = rng.normal(size=(7, 2)), rng.normal(size=(6, 2)) + 1
    k = lambda x, y: gaussian_kernel_loop(x, y, 1.5)
    n = 6
    terms = [k(xs[2 * i], xs[2 * i + 1]) + k(xt[2 * i], xt[2 * i + 1])
             - k(xs[2 * i], xt[2 * i + 1]) - k(xs[2 * i + 1], xt[2 * i]) for i in range(n // 2)]
    expected = 2 / n * sum(terms)
    got = mk_mmd_linear(EmpiricalMeasure(xs), EmpiricalMeasure(xt), KernelSpec((1.5,)), seed=None)
    assert got == pytest.approx(expected, abs=1e-14)


def test_linear_errors():
    small = EmpiricalMeasure(np.zeros((3, 2)))
    ok = EmpiricalMeasure(np.zeros((8, 2)))
    with pytest.raises(TooFewSamples):
        mk_mmd_linear(small, ok)
    with pytest.raises(DimensionMismatch):
        mk_mmd_linear(ok, EmpiricalMeasure(np.zeros((8, 3))))


def test_linear_agrees_with_quadratic_on_separated_clouds():
    a, b = separated_clouds(3)
    kernel = KernelSpec((1.0,))
    mean, se = linear_mean_and_se(a, b, kernel)
    quad = mk_mmd_squared(a, b, kernel)
    assert abs(mean - quad) <= 2 * se


def test_linear_same_distribution_halves_near_zero():
    pts = np.random.default_rng(4).normal(size=(400, 4))
    a, b = EmpiricalMeasure(pts[:200]), EmpiricalMeasure(pts[200:])
    mean, se = linear_mean_and_se(a, b, KernelSpec((1.0,)))
    assert abs(mean) <= 2 * se


def test_linear_symmetric_in_distribution():
    rng = np.random.default_rng(5)
    a = EmpiricalMeasure(rng.normal(size=(60, 2)))
    b = EmpiricalMeasure(rng.normal(size=(60, 2)) + 1.0)
    k = KernelSpec((1.0,))
    ab = np.array([mk_mmd_linear(a, b, k, seed=s) for s in range(100)])
    ba = np.array([mk_mmd_linear(b, a, k, seed=s + 1000) for s in range(100)])
    se = np.sqrt(ab.var(ddof=1) / 100 + ba.var(ddof=1) / 100)
    assert abs(ab.mean() - ba.mean()) <= 2 * se


# ----------------------------------------------------------------- quadratic estimator


def test_quadratic_matches_loop_oracle():
    rng = np.random.default_rng(6)
    xs, xt = rng.normal(size=(12, 3)), rng.normal(size=(9, 3)) + 0.5
    got = mk_mmd_squared(EmpiricalMeasure(xs), EmpiricalMeasure(xt), KernelSpec((1.3,)))
    assert got == pytest.approx(mmd_u_statistic(xs, xt, 1.3), abs=1e-13)


def test_quadratic_repeated_point_is_zero():
    a = EmpiricalMeasure(np.tile([1.0, 2.0], (5, 1)))
    assert abs(mk_mmd_squared(a, a, KernelSpec((1.0,)))) <= 1e-12


def test_quadratic_separated_clouds_closed_form():
    # cross terms vanish at separation 20; each within-sample mean tends to
    # E exp(-|z|^2/2) with z ~ N(0, 2 I_4), i.e. 3^-2
    a, b = separated_clouds(7)
    val = mk_mmd_squared(a, b, KernelSpec((1.0,)))
    assert 0.0 < val <= 2.0
    assert val == pytest.approx(2 / 9, abs=0.02)


def test_duplicate_bandwidths_equal_single():
    a, b = separated_clouds(8, n=30, gap=0.5)
    single = mk_mmd_squared(a, b, KernelSpec((0.7,)))
    double = mk_mmd_squared(a, b, KernelSpec((0.7, 0.7), (0.5, 0.5)))
    assert double == pytest.approx(single, abs=1e-12)


# ----------------------------------------------------------------- ot distance


def test_ot_distance_self_is_small():
    pts = np.random.default_rng(9).normal(size=(6, 2))
    a = EmpiricalMeasure(pts)
    bound = 0.01 * ((pts[:, None] - pts[None]) ** 2).sum(-1).max()
    assert 0.0 <= ot_distance(a, a) <= bound


def test_ot_distance_single_points():
    x, y = np.array([1.0, 2.0]), np.array([-1.0, 0.5])
    assert ot_distance(EmpiricalMeasure(x), EmpiricalMeasure(y)) == pytest.approx(np.sum((x - y) ** 2), abs=1e-9)


def test_ot_distance_matches_exact_three_points():
    rng = np.random.default_rng(10)
    for _ in range(5):
        xs, xt = rng.normal(size=(3, 2)), rng.normal(size=(3, 2))
        C = ((xs[:, None] - xt[None]) ** 2).sum(-1)
        exact = exact_ot_solve(np.full(3, 1 / 3), np.full(3, 1 / 3), C).loss
        got = ot_distance(EmpiricalMeasure(xs), EmpiricalMeasure(xt))
        assert got == pytest.approx(exact, rel=1e-2)


def test_ot_distance_symmetric():
    rng = np.random.default_rng(11)
    a = EmpiricalMeasure(rng.normal(size=(5, 3)), rng.dirichlet(np.ones(5)))
    b = EmpiricalMeasure(rng.normal(size=(4, 3)), rng.dirichlet(np.ones(4)))
    cfg = SinkhornConfig(lam=200, max_iterations=100_000, convergence_tol=1e-13)
    assert ot_distance(a, b, cfg) == pytest.approx(ot_distance(b, a, cfg), abs=1e-9)


# ----------------------------------------------------------------- monotonicity


def one_dim_pair(rng, gap, n=40):
    return EmpiricalMeasure(rng.normal(size=(n, 1))), EmpiricalMeasure(rng.normal(size=(n, 1)) + gap)


@pytest.mark.parametrize("method", ["mmd", "ot"])
def test_distance_increases_with_gap(method):
    means = []
    for gap in (1.0, 2.0, 4.0):
        vals = []
        for seed in range(10):
            a, b = one_dim_pair(np.random.default_rng(seed), gap)
            if method == "mmd":
                vals.append(mk_mmd_linear(a, b, KernelSpec((1.0,)), seed=seed))
            else:
                vals.append(ot_distance(a, b))
        means.append(np.mean(vals))
    assert means[0] < means[1] < means[2]


# ----------------------------------------------------------------- cost matrix


def gaussian_bank(rng, means, n=20):
    return CategoryBank({k: rng.normal(size=(n, len(m))) + m for k, m in enumerate(means)}, len(means[0]))


def test_identical_category_is_row_minimum():
    rng = np.random.default_rng(12)
    shared = rng.normal(size=(10, 2))
    source = CategoryBank({0: shared, 1: shared + 5.0}, 2)
    target = CategoryBank({0: shared + 3.0, 1: shared.copy()}, 2)
    cost = build_cost_matrix(source, target, CostMethod.OT_DISTANCE)
    assert cost.entries[0].argmin() == 1
    assert cost.entries[0, 1] <= 0.01
    assert cost.normalized and cost.entries.max() == 1.0


@pytest.mark.parametrize("method", list(CostMethod))
def test_smallest_entry_pairs_closest_means(method):
    rng = np.random.default_rng(13)
    src_means = [np.array([0.0, 0.0]), np.array([20.0, 0.0])]
    tgt_means = [np.array([0.0, 30.0]), np.array([19.0, 1.0])]
    source, target = gaussian_bank(rng, src_means), gaussian_bank(rng, tgt_means)
    d = np.array([[np.sum((s - t) ** 2) for t in tgt_means] for s in src_means])
    cost = build_cost_matrix(source, target, method, MmdParams(repeats=5) if method != CostMethod.OT_DISTANCE else None)
    assert np.unravel_index(cost.entries.argmin(), cost.entries.shape) == np.unravel_index(d.argmin(), d.shape)
    assert cost.entries.min() >= 0.0 and cost.entries.max() <= 1.0


def test_all_identical_categories_skip_normalization():
    pts = np.ones((6, 2))
    bank = CategoryBank({0: pts, 1: pts}, 2)
    cost = build_cost_matrix(bank, bank, CostMethod.OT_DISTANCE)
    assert not cost.normalized and cost.scale == 1.0
    assert np.all(cost.entries == 0.0)


def test_metric_error_names_the_pair():
    source = CategoryBank({"a": np.zeros((8, 2)), "b": np.zeros((2, 2))}, 2)
    target = CategoryBank({"x": np.ones((8, 2))}, 2)
    with pytest.raises(MetricError) as info:
        build_cost_matrix(source, target, CostMethod.MK_MMD_LINEAR)
    assert "'b'" in str(info.value) and "'x'" in str(info.value)


def test_cost_matrix_is_deterministic():
    rng = np.random.default_rng(14)
    means = [np.array([0.0, 0.0]), np.array([3.0, 0.0]), np.array([0.0, 3.0])]
    source, target = gaussian_bank(rng, means), gaussian_bank(rng, means[:2])
    p = MmdParams(seed=3, repeats=4)
    c1 = build_cost_matrix(source, target, CostMethod.MK_MMD_LINEAR, p)
    c2 = build_cost_matrix(source, target, CostMethod.MK_MMD_LINEAR, p)
    assert np.array_equal(c1.entries, c2.entries)


def test_bank_from_labeled_requires_every_label():
    with pytest.raises(TooFewSamples):
        CategoryBank.from_labeled(np.zeros((3, 2)), np.array([0, 0, 2]), 3)
