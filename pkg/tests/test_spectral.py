"""Spectral solver tests.

Oracle policy: every closed-form comparison value is either computed by an
independent in-test oracle (transcendental root-finding on the matching
equation, explicit Laplacian formulas) or frozen from one after checking
agreement; nothing is copied from solver output.
"""

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.integrate import quad
from scipy.optimize import brentq

from pushedfront.spectral import (
    FULLY_PUSHED,
    PULLED,
    SEMIPUSHED,
    Potential,
    SpectralError,
    classify_regime,
    eigenfunction,
    eigenvalue,
    eigenvalues_batch,
    limit_top_eigenvalue,
    negative_spectrum_residual,
    prufer_integrate,
    regime_thresholds,
    solve_spectrum,
    verify_negative_spectrum_example,
)

STEP10 = Potential.step(10.0)


def oracle_lambda_inf_step(b: float) -> float:
    """Largest root of q*cot(q) = -sqrt(2*lam), q = sqrt(b - 2*lam), on (0, b/2).

    Independent oracle for the infinite-domain top eigenvalue of the step
    potential: inside, u = sin(q x)/q; outside, u must decay like
    e^{-sqrt(2 lam) x}, and matching log-derivatives at x = 1 gives the
    equation above.
    """
    def f(lam):
        q = math.sqrt(b - 2.0 * lam)
        return q * math.cos(q) / math.sin(q) + math.sqrt(2.0 * lam)

    grid = np.linspace(1e-9, b / 2.0 - 1e-9, 20001)
    vals = np.array([f(g) for g in grid])
    for i in range(len(grid) - 1, 0, -1):
        a, c = vals[i - 1], vals[i]
        if np.isfinite(a) and np.isfinite(c) and a * c < 0:
            # reject tan-pole sign flips: f jumps from -inf to +inf there
            if abs(a) < 50 and abs(c) < 50:
                return brentq(f, grid[i - 1], grid[i], xtol=1e-15)
    return 0.0


# frozen from oracle_lambda_inf_step(10.0); verified below
LAMBDA1_INF_STEP10 = 2.312097043164889
MU_STEP10 = 2.3715383375205596
BETA_STEP10 = 2.1503939374751266
ALPHA_STEP10 = 20.447871499647643


class TestOracles:
    def test_frozen_constants_match_oracle(self):
        li = oracle_lambda_inf_step(10.0)
        assert abs(li - LAMBDA1_INF_STEP10) < 1e-12
        assert abs(math.sqrt(1 + 2 * li) - MU_STEP10) < 1e-12
        assert abs(math.sqrt(2 * li) - BETA_STEP10) < 1e-12

    def test_limit_top_eigenvalue_step10(self):
        li = limit_top_eigenvalue(STEP10)
        assert abs(li - LAMBDA1_INF_STEP10) < 1e-10

    def test_classify_step10(self):
        regime, mu, beta, alpha = classify_regime(LAMBDA1_INF_STEP10)
        assert regime == FULLY_PUSHED
        assert abs(mu - MU_STEP10) < 1e-12
        assert abs(beta - BETA_STEP10) < 1e-12
        assert abs(alpha - ALPHA_STEP10) < 1e-9
        assert mu < 3 * beta  # fully pushed iff mu < 3 beta


class TestLaplacian:
    def test_eigenvalues_exact(self):
        # W = 0, L = 10: lambda_k = -k^2 pi^2 / 200, machine accuracy
        lams = eigenvalues_batch(Potential.zero(), 10.0, 5)
        exact = -np.arange(1, 6) ** 2 * math.pi ** 2 / 200.0
        assert np.max(np.abs(lams - exact)) < 1e-12

    def test_eigenfunction_shape_and_norm(self):
        # u_k = sin(k pi x / L) * L/(k pi) so that u'(0) = 1
        L, k = 6.0, 3
        ef = eigenfunction(Potential.zero(), L, k)
        scale = L / (k * math.pi)
        exact = np.sin(k * math.pi * ef.grid / L) * scale
        assert np.max(np.abs(ef.values - exact)) < 1e-10
        assert abs(ef.norm_sq - scale ** 2 * L / 2.0) < 1e-8
        assert ef.n_zeros == k - 1


class TestStepSpectrum:
    def test_finite_L_increases_to_limit(self):
        Ls = [4.0, 4.5, 5.0, 5.5, 6.0, 6.5, 7.0]
        lams = [eigenvalue(STEP10, L, 1) for L in Ls]
        assert all(b > a for a, b in zip(lams, lams[1:]))
        assert all(l < LAMBDA1_INF_STEP10 for l in lams)

    def test_gap_log_slope_is_minus_2beta(self):
        Ls = np.array([4.0, 4.5, 5.0, 5.5, 6.0, 6.5, 7.0])
        gaps = np.array([LAMBDA1_INF_STEP10 - eigenvalue(STEP10, L, 1) for L in Ls])
        slope = np.polyfit(Ls, np.log(gaps), 1)[0]
        assert abs(slope / (-2.0 * BETA_STEP10) - 1.0) < 0.02

    def test_gap_prefactor(self):
        # lambda1_inf - lambda_1(L) ~ (beta e^{2 beta} / ||v1_inf||^2) e^{-2 beta L}
        sd = solve_spectrum(STEP10, 8.0)
        C = BETA_STEP10 * math.exp(2 * BETA_STEP10) / sd.norm_v1_inf_sq
        L = 5.5
        gap = LAMBDA1_INF_STEP10 - eigenvalue(STEP10, L, 1)
        assert abs(gap * math.exp(2 * BETA_STEP10 * L) / C - 1.0) < 0.05

    def test_comparison_bounds(self):
        # -k^2 pi^2 / (2 L^2) <= lambda_k <= sup(W)/2
        L = 12.0
        lams = eigenvalues_batch(STEP10, L, 40)
        lower = -np.arange(1, 41) ** 2 * math.pi ** 2 / (2 * L ** 2)
        assert np.all(lams >= lower - 1e-9)
        assert np.all(lams <= 10.0 / 2.0 + 1e-9)

    def test_weyl_count_grows_linearly(self):
        A = 30.0
        n5 = int(np.sum(eigenvalues_batch(STEP10, 5.0, 30) < -A))
        n10 = int(np.sum(eigenvalues_batch(STEP10, 10.0, 60) < -A))
        assert n5 > 3
        assert abs(n10 / n5 - 2.0) < 0.3

    def test_single_bound_state(self):
        sd = solve_spectrum(STEP10, 15.0)
        assert sd.K == 1
        assert sd.eigenvalues[0] > 0 > sd.eigenvalues[1]

    def test_v1_closed_form_outside_support(self):
        # on [1, L]: v1(x) = sinh(sqrt(2 lam1)(L - x)) / sinh(sqrt(2 lam1)(L - 1))
        L = 8.0
        sd = solve_spectrum(STEP10, L)
        kp = math.sqrt(2.0 * sd.lambda1)
        xs = np.linspace(1.0, L, 41)
        exact = np.sinh(kp * (L - xs)) / math.sinh(kp * (L - 1.0))
        got = sd.v1(xs)
        assert np.max(np.abs(got - exact)) < 1e-9

    def test_v1_envelope(self):
        # v1 comparable to (1 ^ x ^ (L-x)) e^{-beta x} up to bounded constants
        L = 12.0
        sd = solve_spectrum(STEP10, L)
        xs = np.linspace(0.05, L - 0.05, 200)
        env = np.minimum(1.0, np.minimum(xs, L - xs)) * np.exp(-sd.beta * (xs - 1.0))
        ratio = sd.v1(xs) / env
        assert ratio.min() > 0.1 and ratio.max() < 10.0

    def test_eigenfunction_zero_counts(self):
        for k in (1, 2, 3, 5, 8):
            ef = eigenfunction(STEP10, 9.0, k)
            assert ef.n_zeros == k - 1


class TestPruferTrace:
    def test_trace_invariants(self):
        tr = prufer_integrate(STEP10, -3.0, 10.0)
        assert np.all(np.diff(tr.crossings()) >= 0)
        assert np.all(tr.theta >= 0.0)
        assert np.all(np.isfinite(tr.logrho))
        assert tr.theta[0] == 0.0

    def test_trace_hits_k_pi_at_negative_eigenvalues(self):
        L = 12.0
        lams = eigenvalues_batch(STEP10, L, 5)
        for k in (2, 3, 4, 5):
            tr = prufer_integrate(STEP10, lams[k - 1], L)
            assert abs(tr.theta[-1] - k * math.pi) < 1e-8

    def test_trace_top_eigenvalue_small_L(self):
        # conditioning ~ e^{2 beta (L-1)} limits the attainable residual
        L = 5.0
        lam1 = eigenvalue(STEP10, L, 1)
        tr = prufer_integrate(STEP10, lam1, L)
        assert abs(tr.theta[-1] - math.pi) < 1e-6

    def test_phase_monotone_in_lambda(self):
        lams = np.linspace(-6.0, 6.0, 120)
        from pushedfront.spectral import _phase_end
        th, _ = _phase_end(STEP10, lams, 7.0)
        assert np.all(np.diff(th) < 0.0)

    def test_rho_positive_and_log_integrated(self):
        tr = prufer_integrate(STEP10, -80.0, 6.0)
        assert np.all(np.isfinite(tr.logrho))
        assert np.all(tr.rho > 0.0)


class TestInfiniteDomain:
    def test_v1_inf_tail_and_derivative_matching(self):
        sd = solve_spectrum(STEP10, 10.0)
        xs = np.array([1.0, 2.0, 3.5])
        assert np.allclose(sd.v1_inf(xs), np.exp(-sd.beta * (xs - 1.0)), atol=1e-12)
        # derivative continuity at the match point; the left value comes from
        # a linear tabulation at dx = 1e-3, so allow O(v'' dx) slack
        h = 1e-6
        num = (sd.v1_inf(1.0 + h) - sd.v1_inf(1.0 - h)) / (2 * h)
        assert abs(num + sd.beta) < 5e-3

    def test_h_tilde_inf_is_probability_density(self):
        sd = solve_spectrum(STEP10, 10.0)
        val, err = quad(lambda x: float(sd.h_tilde_inf(x)), 0.0, 60.0, limit=200)
        assert abs(val - 1.0) < 1e-6

    def test_h_inf_h_tilde_inf_pairing(self):
        sd = solve_spectrum(STEP10, 10.0)
        val, err = quad(lambda x: float(sd.h_inf(x) * sd.h_tilde_inf(x)), 0.0, 60.0,
                        limit=200)
        assert abs(val - 1.0) < 1e-6

    def test_pi_inf_integrates_to_one(self):
        sd = solve_spectrum(STEP10, 10.0)
        val, err = quad(lambda x: float(sd.pi_inf_density(x)), 0.0, 60.0, limit=200)
        assert abs(val - 1.0) < 1e-6

    def test_sigma2_against_independent_quadrature(self):
        # adaptive quadrature of the evaluator itself; limited by the linear
        # v1_inf tabulation, hence the looser tolerance
        sd = solve_spectrum(STEP10, 10.0)
        def integrand(x):
            r = 0.5 * (1.0 + (10.0 if x <= 1.0 else 0.0))
            return 2.0 * r * float(sd.h_inf(x)) ** 2 * float(sd.h_tilde_inf(x))
        v1, _ = quad(integrand, 0.0, 1.0, limit=200)
        v2, _ = quad(integrand, 1.0, 80.0, limit=200)
        assert abs((v1 + v2) / sd.Sigma2 - 1.0) < 1e-5

    def test_constants_against_closed_forms(self):
        # For the step potential, v1_inf(x) = sin(q x)/sin(q) on [0, 1] with
        # q = sqrt(b - 2 lam_inf), so tilde_c, ||v1_inf||^2 and Sigma^2 all
        # reduce to elementary integrals of e^{c x} sin(q x).
        sd = solve_spectrum(STEP10, 10.0)
        li, mu, beta = LAMBDA1_INF_STEP10, MU_STEP10, BETA_STEP10
        q = math.sqrt(10.0 - 2.0 * li)

        def I(c, k):
            # int_0^1 e^{c x} sin(k x) dx
            return (math.exp(c) * (c * math.sin(k) - k * math.cos(k)) + k) / (c * c + k * k)

        norm_inf = (0.5 - math.sin(2 * q) / (4 * q)) / math.sin(q) ** 2 + 1 / (2 * beta)
        tilde_c = 1.0 / (I(-mu, q) / math.sin(q) + math.exp(-mu) / (mu + beta))
        inner = (11.0 / 2.0) / math.sin(q) ** 3 * (3 * I(mu, q) - I(mu, 3 * q)) / 4.0
        tail = 0.5 * math.exp(mu) / (3 * beta - mu)
        sigma2 = 2.0 * (inner + tail) / (tilde_c * norm_inf ** 2)

        assert abs(sd.norm_v1_inf_sq / norm_inf - 1.0) < 1e-7
        assert abs(sd.tilde_c / tilde_c - 1.0) < 1e-7
        assert abs(sd.Sigma2 / sigma2 - 1.0) < 1e-7

    def test_h_times_h_tilde_is_time_independent(self):
        sd = solve_spectrum(STEP10, 10.0)
        xs = np.array([0.5, 1.5, 3.0])
        a = sd.h(0.0, xs) * sd.h_tilde(0.0, xs)
        b = sd.h(7.0, xs) * sd.h_tilde(7.0, xs)
        assert np.allclose(a, b, rtol=1e-12)
        assert np.allclose(a, sd.pi_density(xs), rtol=1e-12)

    def test_h_converges_to_h_inf(self):
        sd = solve_spectrum(STEP10, 20.0)
        xs = np.linspace(0.2, 8.0, 30)
        assert np.max(np.abs(sd.h(0.0, xs) / sd.h_inf(xs) - 1.0)) < 1e-4

    def test_L_of_N(self):
        sd = solve_spectrum(STEP10, 10.0)
        L = sd.L_of_N(1000.0)
        raw = math.log(1000.0) / (sd.mu - sd.beta)
        assert 0.0 <= L - raw < 1e-2 + 1e-12
        assert abs(raw - 31.236401543801186) < 1e-6


class TestRegimes:
    def test_pulled_zero_potential(self):
        assert limit_top_eigenvalue(Potential.zero()) == 0.0
        regime, mu, beta, alpha = classify_regime(0.0)
        assert regime == PULLED
        assert (mu, beta, alpha) == (1.0, 0.0, 1.0)

    def test_pulled_weak_step(self):
        # binding threshold for a unit-width step is height pi^2/4
        assert limit_top_eigenvalue(Potential.step(0.5)) == 0.0

    def test_classification_boundary(self):
        assert classify_regime(1.0 / 16.0 + 1e-6)[0] == FULLY_PUSHED
        assert classify_regime(1.0 / 16.0 - 1e-6)[0] == SEMIPUSHED
        assert classify_regime(1.0 / 16.0)[0] == SEMIPUSHED

    def test_semipushed_example(self):
        eps1, eps2 = regime_thresholds(Potential.step(1.0))
        b_mid = 0.5 * (eps1 + eps2)
        li = limit_top_eigenvalue(Potential.step(b_mid))
        assert 0.0 < li < 1.0 / 16.0
        assert classify_regime(li)[0] == SEMIPUSHED

    def test_thresholds_against_closed_forms(self):
        # For W = eps * 1_[0,1]: binding at eps = pi^2/4 (cos(sqrt(eps)) = 0);
        # fully pushed once the largest root of q cot q = -sqrt(2 lam),
        # q = sqrt(eps - 2 lam), crosses lam = 1/16.
        eps1, eps2 = regime_thresholds(Potential.step(1.0))
        assert abs(eps1 - math.pi ** 2 / 4.0) < 1e-9

        def lam_at(b):
            return oracle_lambda_inf_step(b)

        eps2_oracle = brentq(lambda b: lam_at(b) - 1.0 / 16.0, eps1 + 1e-6, 10.0,
                             xtol=1e-10)
        assert abs(eps2 - eps2_oracle) < 1e-8

    def test_negative_lam_inf_rejected(self):
        with pytest.raises(ValueError):
            classify_regime(-0.1)


class TestNegativeSpectrumResidual:
    def test_residuals_small(self):
        rep = verify_negative_spectrum_example(12.0)
        assert rep["n_negative"] > 20
        assert rep["max_residual_away_from_poles"] < 1e-6

    def test_positive_lambda_rejected(self):
        with pytest.raises(ValueError):
            negative_spectrum_residual(0.5, 12.0)
        with pytest.raises(ValueError):
            negative_spectrum_residual(0.0, 12.0)


class TestTablePotentials:
    def test_table_matches_step(self):
        # a constant table must reproduce the exact step solution (RK4 path)
        tab = Potential.table([0.0, 1.0], [10.0, 10.0])
        lam_tab = eigenvalue(tab, 8.0, 1)
        lam_step = eigenvalue(STEP10, 8.0, 1)
        assert abs(lam_tab - lam_step) < 1e-8

    def test_smooth_bump(self):
        pot = Potential.from_callable(lambda x: 12.0 * np.sin(math.pi * x) ** 2, n=801)
        lams = eigenvalues_batch(pot, 6.0, 4)
        assert np.all(np.diff(lams) < 0)
        assert lams[0] <= 6.0  # sup W / 2
        ef = eigenfunction(pot, 6.0, 2)
        assert ef.n_zeros == 1

    def test_limit_eigenvalue_smooth(self):
        pot = Potential.from_callable(lambda x: 12.0 * np.sin(math.pi * x) ** 2, n=801)
        li = limit_top_eigenvalue(pot)
        lam_L = eigenvalue(pot, 20.0, 1)
        assert 0.0 < lam_L < li < 6.0


class TestValidation:
    def test_potential_validation(self):
        with pytest.raises(ValueError):
            Potential.step(-1.0)
        with pytest.raises(ValueError):
            Potential(kind="step", support_right=1.5, height=1.0)
        with pytest.raises(ValueError):
            Potential.table([0.0, 0.5, 0.4], [1.0, 1.0, 1.0])
        with pytest.raises(ValueError):
            Potential.table([0.0, 1.0], [1.0, -1.0])

    def test_eigenvalue_validation(self):
        with pytest.raises(ValueError):
            eigenvalue(STEP10, 10.0, 0)
        with pytest.raises(ValueError):
            eigenvalue(STEP10, 0.8, 1)
        with pytest.raises(ValueError):
            prufer_integrate(STEP10, 1.0, 10.0, step=-1e-3)

    def test_sigma2_refused_outside_fully_pushed(self):
        sd = solve_spectrum(Potential.zero(), 6.0)
        with pytest.raises(SpectralError):
            sd.h(0.0, 1.0)
        with pytest.raises(SpectralError):
            sd.kolmogorov_limit(1.0, 1.0)


@settings(max_examples=20, deadline=None)
@given(
    b=st.floats(min_value=0.0, max_value=20.0),
    L=st.floats(min_value=2.0, max_value=12.0),
)
def test_spectrum_properties_random_step(b, L):
    pot = Potential.step(b)
    lams = eigenvalues_batch(pot, L, 6)
    assert np.all(np.diff(lams) < 0)
    assert lams[0] <= b / 2.0 + 1e-9
    lower = -np.arange(1, 7) ** 2 * math.pi ** 2 / (2 * L ** 2)
    assert np.all(lams >= lower - 1e-9)


@settings(max_examples=15, deadline=None)
@given(lam=st.floats(min_value=-40.0, max_value=4.5),
       L=st.floats(min_value=2.0, max_value=10.0))
def test_trace_winding_matches_zero_count(lam, L):
    tr = prufer_integrate(STEP10, lam, L)
    u = tr.rho * np.sin(tr.theta)
    sign_changes = int(np.sum(u[1:-1] * u[2:] < 0))
    assert abs(int(tr.crossings()[-1]) - sign_changes) <= 1
