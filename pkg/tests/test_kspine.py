"""Tests for k-spine sampling and many-to-few moment estimation.

Oracles: the spine transition density q_s comes from the spectral
kernel (independently validated in the semigroup tests); first and
second factorial moments of the particle count come from the mode
expansion and from direct forward simulation.
"""

import math

import numpy as np
import pytest
from scipy import integrate, stats

from pushedfront.bbm_sim import SimConfig, evaluate_polynomial, extract_mmm, \
    simulate_ensemble
from pushedfront.kspine import (SpineError, ess_report, many_to_few_estimate,
                                sample_kspine, spine_weight, _transition,
                                umatrix_from_times)
from pushedfront.semigroup import expected_mass, factorial_moment2, \
    heat_kernel, spine_kernel
from pushedfront.spectral import Potential, solve_spectrum

STEP10 = Potential.step(10.0)


@pytest.fixture(scope="module")
def sd():
    return solve_spectrum(STEP10, 10.0)


@pytest.fixture(scope="module")
def sd5():
    return solve_spectrum(STEP10, 5.0)


def chi2_against_density(draws, xs, density, n_bins=50, min_expected=5.0):
    """Chi-square p-value of draws against a tabulated density.

    Bins are equal-width over the density's support and merged from the
    right until every expected count reaches min_expected."""
    total = np.trapezoid(density, xs)
    edges = np.linspace(xs[0], xs[-1], n_bins + 1)
    cdf = integrate.cumulative_trapezoid(density, xs, initial=0.0) / total
    probs = np.diff(np.interp(edges, xs, cdf))
    counts, _ = np.histogram(draws, bins=edges)
    # sweep once, merging any deficient bin into its neighbor
    m_counts, m_probs = [], []
    acc_c, acc_p = 0.0, 0.0
    n = len(draws)
    for c, p in zip(counts, probs):
        acc_c += c
        acc_p += p
        if acc_p * n >= min_expected:
            m_counts.append(acc_c)
            m_probs.append(acc_p)
            acc_c, acc_p = 0.0, 0.0
    if acc_p > 0 and m_counts:
        m_counts[-1] += acc_c
        m_probs[-1] += acc_p
    m_counts = np.asarray(m_counts, float)
    m_probs = np.asarray(m_probs, float)
    m_probs /= m_probs.sum()
    expected = n * m_probs
    stat = float(((m_counts - expected) ** 2 / expected).sum())
    return stats.chi2.sf(stat, len(m_counts) - 1)


# ---------------------------------------------------------------------------
# tree shape


class TestTreeShape:
    def test_umatrix_is_interval_max(self):
        rng = np.random.default_rng(201)
        for _ in range(50):
            k = int(rng.integers(2, 8))
            us = rng.uniform(0.0, 3.0, size=k - 1)
            u = umatrix_from_times(us, k)
            assert np.allclose(u, u.T) and np.all(np.diag(u) == 0.0)
            for i in range(k):
                for j in range(i + 1, k):
                    assert u[i, j] == max(us[i:j])

    def test_planar_ultrametric_identity(self, sd):
        # planar ultrametricity is an equality, not just an inequality:
        # U_{i,j} = U_{i,l} v U_{l,j} for i < l < j
        rng = np.random.default_rng(202)
        for _ in range(40):
            tree = sample_kspine(sd, 6, 1.5, 1.2, rng)
            u = tree.umatrix
            for i in range(6):
                for l in range(i + 1, 6):
                    for j in range(l + 1, 6):
                        assert u[i, j] == max(u[i, l], u[l, j])

    def test_node_and_leaf_fields(self, sd):
        rng = np.random.default_rng(203)
        t = 2.0
        tree = sample_kspine(sd, 5, t, 1.0, rng)
        assert tree.branch_times.shape == (4,)
        assert tree.node_times.shape == (4,)
        assert tree.node_marks.shape == (4,)
        assert tree.leaf_marks.shape == (5,)
        assert np.all((tree.node_times > 0.0) & (tree.node_times < t))
        assert np.all((tree.node_marks > 0.0) & (tree.node_marks < sd.L))
        assert np.all((tree.leaf_marks > 0.0) & (tree.leaf_marks < sd.L))
        # the root split happens at depth max(U): first recorded node
        assert tree.node_times[0] == t - tree.branch_times.max()
        # recorded branch depths are exactly the U draws
        assert sorted(t - tree.node_times) == sorted(tree.branch_times)

    def test_branch_times_uniform_iid(self, sd):
        rng = np.random.default_rng(204)
        t = 1.7
        us = np.array([sample_kspine(sd, 3, t, 1.2, rng).branch_times
                       for _ in range(4000)])
        res = stats.kstest(us.ravel() / t, "uniform")
        assert res.pvalue > 0.01, res
        r = np.corrcoef(us[:, 0], us[:, 1])[0, 1]
        assert abs(r) < 3.0 / math.sqrt(len(us))

    def test_root_depth_density(self, sd):
        # tau = max(U1, U2) for k = 3 has CDF (s/t)^2
        rng = np.random.default_rng(205)
        t = 1.5
        taus = np.array([t - sample_kspine(sd, 3, t, 1.2, rng).node_times[0]
                         for _ in range(5000)])
        res = stats.kstest(taus, lambda s: (np.asarray(s) / t) ** 2)
        assert res.pvalue > 0.01, res

    def test_validation(self, sd):
        rng = np.random.default_rng(206)
        with pytest.raises(ValueError):
            sample_kspine(sd, 0, 1.0, 1.0, rng)
        with pytest.raises(ValueError):
            sample_kspine(sd, 2, -1.0, 1.0, rng)
        with pytest.raises(ValueError):
            sample_kspine(sd, 2, 1.0, sd.L + 1.0, rng)
        with pytest.raises(ValueError):
            sample_kspine(sd, 2, 1.0, 1.0, rng, accelerate_N=0.5)


# ---------------------------------------------------------------------------
# spine marks


class TestSpineMarks:
    def test_endpoint_matches_kernel(self, sd):
        # k = 1: the single leaf mark is a draw from q_t(x0, .)
        rng = np.random.default_rng(207)
        t = 1.2
        x0 = 1.5
        draws = np.array([sample_kspine(sd, 1, t, x0, rng).leaf_marks[0]
                          for _ in range(100_000)])
        dens = spine_kernel(sd, t, x0)
        p = chi2_against_density(draws, sd.grid, dens, n_bins=50)
        assert p > 0.01, p

    def test_short_duration_seam(self, sd):
        # Euler-Maruyama just below t_min against the exact kernel just
        # above: a gross drift or scaling error would separate the laws
        rng = np.random.default_rng(208)
        x0 = 1.5
        n = 4000
        lo = np.array([_transition(sd, 0.999 * sd.t_min, x0, rng, 1.0)
                       for _ in range(n)])
        hi = np.array([_transition(sd, 1.001 * sd.t_min, x0, rng, 1.0)
                       for _ in range(n)])
        res = stats.ks_2samp(lo, hi)
        assert res.pvalue > 0.01, res

    def test_zero_duration_is_identity(self, sd):
        rng = np.random.default_rng(209)
        assert _transition(sd, 0.0, 1.3, rng, 1.0) == 1.3

    def test_quadrature_consistency(self, sd):
        # MC mean of f(zeta_t) against the kernel integral of f: ties
        # the sampler to the subcritical one-spine semigroup
        rng = np.random.default_rng(210)
        t = 0.8
        x0 = 2.0
        f = lambda y: np.exp(-y)
        draws = np.array([sample_kspine(sd, 1, t, x0, rng).leaf_marks[0]
                          for _ in range(20_000)])
        vals = f(draws)
        dens = spine_kernel(sd, t, x0)
        oracle = float(integrate.simpson(dens * f(sd.grid), x=sd.grid))
        se = vals.std(ddof=1) / math.sqrt(len(vals))
        assert abs(vals.mean() - oracle) < 3.0 * se

    def test_accelerated_branch_marks_mix(self, sd):
        # with the kernel run at speed N the branch-point mark forgets
        # x0 and lands in the stationary profile of the spine
        rng = np.random.default_rng(211)
        n_trees = 3000
        marks = np.array([
            sample_kspine(sd, 2, 1.0, 1.5, rng, accelerate_N=4000.0)
            .node_marks[0] for _ in range(n_trees)])
        dens = sd.pi_inf_density(sd.grid)
        p = chi2_against_density(marks, sd.grid, dens, n_bins=30)
        assert p > 0.01, p


# ---------------------------------------------------------------------------
# weights and moments


class TestWeights:
    def test_weight_factorization(self, sd5):
        # the weight is the product of r h over branch points divided
        # by h at the leaves, reconstructible from the tree fields; a
        # flat potential would make every r factor 1/2 (the harmonic
        # pair itself needs the pushed-regime constants, so the h ratio
        # is checked on the step spectrum)
        xs = np.linspace(0.0, 6.0, 50)
        assert np.all(Potential.zero().r(xs) == 0.5)
        r10 = STEP10.r(xs)
        assert np.all(r10[xs <= 1.0] == 5.5)
        assert np.all(r10[xs > 1.0] == 0.5)

        rng = np.random.default_rng(212)
        tree = sample_kspine(sd5, 4, 1.0, 2.0, rng)
        w = spine_weight(tree, sd5)
        manual = 1.0
        for tb, xb in zip(tree.node_times, tree.node_marks):
            manual *= float(STEP10.r(xb)) * sd5.h(tb, xb)
        for xl in tree.leaf_marks:
            manual /= sd5.h(tree.depth, xl)
        assert w == pytest.approx(manual, rel=1e-12)

    def test_many_to_one_weight_identity(self, sd5):
        # h(0,x0) E[f(zeta)/h(t, zeta)] = int p_t(x0, y) f(y) dy
        rng = np.random.default_rng(213)
        t = 1.5
        x0 = 1.8
        f = lambda y: 1.0 / (1.0 + y)
        n = 20_000
        vals = np.empty(n)
        for i in range(n):
            tree = sample_kspine(sd5, 1, t, x0, rng)
            vals[i] = sd5.h(0.0, x0) * spine_weight(tree, sd5) \
                * f(tree.leaf_marks[0])
        row = heat_kernel(sd5, t, x0)
        oracle = float(integrate.simpson(row * f(sd5.grid), x=sd5.grid))
        se = vals.std(ddof=1) / math.sqrt(n)
        assert abs(vals.mean() - oracle) < 3.0 * se


class TestManyToFew:
    def test_k1_mass(self, sd5):
        t = 2.0
        x0 = 1.5
        est, se = many_to_few_estimate(sd5, 1, t, x0, replicas=4000, seed=31)
        oracle = expected_mass(sd5, t, x0)
        assert abs(est - oracle) < 3.0 * se, (est, oracle, se)

    def test_k2_factorial_moment(self, sd5):
        t = 2.0
        x0 = 1.5
        est, se = many_to_few_estimate(sd5, 2, t, x0, replicas=8000, seed=32)
        oracle = factorial_moment2(sd5, t, x0)
        assert abs(est - oracle) < 3.0 * se, (est, oracle, se)

    def test_k2_weighted_vs_direct_sim(self, sd5):
        # spine estimate of E[sum_{v1 != v2} psi(d) phi(x1) phi(x2)]
        # against the forward particle system
        t = 2.0
        x0 = 1.5
        s_cut = 1.0
        psi = lambda d: float(d <= s_cut)
        phi = lambda y: math.exp(-y)
        est, se = many_to_few_estimate(
            sd5, 2, t, x0, psi_fns=psi, phi_fns=[phi, phi],
            replicas=8000, seed=33)

        cfg = SimConfig(potential=STEP10, mu=sd5.mu, horizon=t, x0=x0,
                        seed=77, cutoff=5.0)
        stats_ = simulate_ensemble(cfg, 30_000, keep="survivors")
        psi_m = lambda dmat: (np.asarray(dmat) <= s_cut).astype(float)
        phi_v = lambda ys: np.exp(-np.asarray(ys))
        per_rep = np.zeros(30_000)
        for forest in stats_.forests:
            sample = extract_mmm(forest)
            val, _ = evaluate_polynomial(sample, psi=psi_m,
                                         phis=(phi_v, phi_v), distinct=True)
            per_rep[forest.replica] = val
        direct = float(per_rep.mean())
        direct_se = float(per_rep.std(ddof=1) / math.sqrt(len(per_rep)))
        gap = abs(est - direct)
        assert gap < 3.0 * math.hypot(se, direct_se), \
            (est, se, direct, direct_se)

    def test_exchangeable_pairs(self, sd5):
        # the estimator's relabeled pair times: U_{s1,s2} and U_{s2,s3}
        # must share one law
        rng = np.random.default_rng(214)
        t = 1.5
        a = np.empty(6000)
        b = np.empty(6000)
        for i in range(6000):
            tree = sample_kspine(sd5, 3, t, 1.5, rng)
            sigma = rng.permutation(3)
            a[i] = tree.umatrix[sigma[0], sigma[1]]
            tree = sample_kspine(sd5, 3, t, 1.5, rng)
            sigma = rng.permutation(3)
            b[i] = tree.umatrix[sigma[1], sigma[2]]
        res = stats.ks_2samp(a, b)
        assert res.pvalue > 0.01, res

    def test_validation(self, sd5):
        with pytest.raises(ValueError):
            many_to_few_estimate(sd5, 2, 1.0, 1.5, replicas=50)
        with pytest.raises(ValueError):
            many_to_few_estimate(sd5, 2, 1.0, 1.5, replicas=100,
                                 phi_fns=[None])
        with pytest.raises(ValueError):
            many_to_few_estimate(sd5, 3, 1.0, 1.5, replicas=100,
                                 psi_fns=[None] * 2)


class TestEssReport:
    def test_flat_weights(self):
        ess, share = ess_report(np.ones(1000))
        assert ess == pytest.approx(1000.0)
        assert share == pytest.approx(0.01)

    def test_degenerate_weights(self):
        w = np.zeros(500)
        w[3] = 7.0
        ess, share = ess_report(w)
        assert ess == pytest.approx(1.0)
        assert share == pytest.approx(1.0)

    def test_empty_or_zero(self):
        assert ess_report(np.zeros(10)) == (0.0, 0.0)
