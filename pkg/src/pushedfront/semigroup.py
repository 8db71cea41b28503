"""Exact semigroup kernels built from the spectral decomposition.

All kernels are evaluated in exponent-shifted form so that no term ever
exceeds e^0: the expected-count kernel carries e^{(lambda_k - lambda1_inf) t}
(criticality pins lambda1 just below lambda1_inf, so exponents are <= 0 up
to the finite-L gap) and the spine transition kernel carries
e^{(lambda_k - lambda_1) t}.  This keeps horizons of order t*N ~ 10^3 finite
in double precision.

Series are truncated at solve_spectrum's t_min: evaluating a kernel below
that time raises KernelError instead of silently returning an unconverged
sum.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.integrate import quad

from .spectral import (
    SpectralData,
    SpectralError,
    linear_propagate,
    solve_spectrum,
)


class KernelError(RuntimeError):
    """Kernel evaluated outside its certified domain (e.g. t < t_min)."""


# ---------------------------------------------------------------------------
# quadrature weights on the two-block tabulation grid


def simpson_weights(grid: np.ndarray) -> np.ndarray:
    """Composite Simpson weights for a grid made of uniform blocks.

    The solver's grid is uniform on [0, a] and uniform with a different
    spacing on [a, L]; each block has an even interval count.
    """
    w = np.zeros_like(grid)
    d = np.diff(grid)
    # split into maximal uniform runs; diffs of a uniform grid jitter by
    # a few ulp of the coordinates, so the tolerance needs that floor
    tol = max(1e-12 * float(d.max()),
              16.0 * np.finfo(float).eps * abs(float(grid[-1])))
    brk = [0]
    for i in range(1, len(d)):
        if abs(d[i] - d[i - 1]) > tol:
            brk.append(i)
    brk.append(len(d))
    for b0, b1 in zip(brk[:-1], brk[1:]):
        n = b1 - b0           # intervals in this block
        h = d[b0]
        if n % 2 != 0:
            raise ValueError("each uniform block needs an even interval count")
        lw = np.ones(n + 1)
        lw[1:-1:2] = 4.0
        lw[2:-1:2] = 2.0
        w[b0:b1 + 1] += lw * h / 3.0
    return w


def _check_time(sd: SpectralData, t: float):
    if t < sd.t_min:
        raise KernelError(
            f"t = {t} below the series horizon t_min = {sd.t_min}; "
            "rebuild the spectrum with a smaller t_min or use the simulator")


def _check_x(sd: SpectralData, *xs):
    for x in xs:
        arr = np.asarray(x, float)
        if np.any((arr < 0.0) | (arr > sd.L)):
            raise ValueError(f"position outside [0, {sd.L}]")


# ---------------------------------------------------------------------------
# expected-count and spine kernels


def heat_kernel(sd: SpectralData, t: float, x: float, y=None):
    """Density p_t(x, y) of expected particle counts:

        E_x[ sum_{v alive at t} f(x_v) ] = int f(y) p_t(x, y) dy,

    p_t(x,y) = e^{mu (x-y)} sum_k e^{(lambda_k - lambda1_inf) t}
               v_k(x) v_k(y) / ||v_k||^2.

    y = None evaluates on the tabulation grid.
    """
    _check_time(sd, t)
    _check_x(sd, x)
    wx = np.exp((sd.eigenvalues - sd.lambda1_inf) * t) * sd.mode_values(x) / sd.norms_sq
    if y is None:
        y_arr = sd.grid
        vy = sd.efuncs
    else:
        _check_x(sd, y)
        y_arr = np.asarray(y, float)
        vy = sd.mode_values(y_arr)
        if vy.ndim == 1:
            vy = vy[:, None]
    out = np.exp(sd.mu * (x - y_arr)) * (wx @ vy)
    if y is not None and np.ndim(y) == 0:
        return float(out[0])
    return out


def spine_kernel(sd: SpectralData, t: float, x: float, y=None):
    """Transition density q_t(x, y) of the single-spine diffusion:

        q_t(x,y) = sum_k e^{(lambda_k - lambda_1) t}
                   v_k(x) v_k(y) v_1(y) / (v_1(x) ||v_k||^2),

    a probability density in y that mixes to pi = (v_1/||v_1||)^2.
    """
    _check_time(sd, t)
    _check_x(sd, x)
    vx = sd.mode_values(x)
    wx = np.exp((sd.eigenvalues - sd.lambda1) * t) * vx / sd.norms_sq
    if y is None:
        y_arr = sd.grid
        vy = sd.efuncs
        v1y = sd.efuncs[0]
    else:
        _check_x(sd, y)
        y_arr = np.asarray(y, float)
        vy = sd.mode_values(y_arr)
        if vy.ndim == 1:
            vy = vy[:, None]
        v1y = vy[0]
    out = (wx @ vy) * v1y / vx[0]
    if y is not None and np.ndim(y) == 0:
        return float(out[0])
    return out


def pi_profile(sd: SpectralData, y=None):
    """Stationary spine density pi(y) = v_1(y)^2 / ||v_1||^2 on the grid."""
    if y is None:
        v = sd.efuncs[0]
    else:
        v = sd.mode_values(y)[0]
    return v * v / sd.norms_sq[0]


def expected_mass(sd: SpectralData, t: float, x: float) -> float:
    """E_x[Z_t]: total expected particle count at time t."""
    _check_time(sd, t)
    _check_x(sd, x)
    w = simpson_weights(sd.grid)
    I = np.sum(sd.efuncs * (w * np.exp(-sd.mu * sd.grid)), axis=1)
    coef = np.exp((sd.eigenvalues - sd.lambda1_inf) * t) * sd.mode_values(x) / sd.norms_sq
    return float(math.exp(sd.mu * x) * np.dot(coef, I))


def mixing_report(sd: SpectralData, t: float, x: float) -> dict:
    """Uniform relative distance of q_t(x, .) from pi, with the spectral-gap
    prediction e^{(lambda_2 - lambda_1) t} for context."""
    q = spine_kernel(sd, t, x)
    p = pi_profile(sd)
    mask = p > p.max() * 1e-8
    dist = float(np.max(np.abs(q[mask] - p[mask]) / p[mask]))
    gap = float(np.exp((sd.eigenvalues[1] - sd.eigenvalues[0]) * t))
    return {"t": t, "x": x, "uniform_relative_distance": dist,
            "spectral_gap_factor": gap}


# ---------------------------------------------------------------------------
# second factorial moment (exact, for forward-simulation validation)


def _weighted_r(sd: SpectralData) -> np.ndarray:
    """Simpson weights times the branching rate r on the grid.

    r jumps at the support edge (W drops to 0 there), and that edge is a
    shared node of the two composite-Simpson blocks.  The node's weight is
    split so the inner block sees the left limit of r and the outer block
    the right limit; otherwise the quadrature picks one side and the error
    depends on the grid spacing.
    """
    w = simpson_weights(sd.grid)
    pot = sd.potential
    wr = w * pot.r(sd.grid)
    a = pot.support_right
    if 0.0 < a < sd.L:
        i = int(np.searchsorted(sd.grid, a))
        if abs(sd.grid[i] - a) < 1e-12:
            h_in = sd.grid[i] - sd.grid[i - 1]
            h_out = sd.grid[i + 1] - sd.grid[i]
            r_left = 0.5 * (1.0 + float(pot.w(np.asarray(a))))
            wr[i] = h_in / 3.0 * r_left + h_out / 3.0 * 0.5
    return wr


def factorial_moment2(sd: SpectralData, t: float, x: float,
                      drop: float = 40.0) -> float:
    """E_x[Z_t (Z_t - 1)] via the branching decomposition

        E[Z(Z-1)] = 2 int_0^t ds int dz p_s(x,z) r(z) m_{t-s}(z)^2,

    with m_tau(z) = E_z[Z_tau].  Near s = 0 and s = t one of the kernels
    degenerates to a delta / a constant and its eigen-expansion loses the
    exponential damping, so the time axis is split three ways: short Simpson
    heads on [0, s0] and [t - s0, t] evaluated through the converged series
    (with the exact endpoit limits r(x) m_t(x)^2 and int p_t r), and the
    middle handled by exact per-mode integrals
    (e^{A(t-s0) + B s0} - e^{A s0 + B(t-s0)})/(A - B).  Modes are kept while
    (lambda_k - lambda1_inf) s0 >= -drop, which makes the truncation error
    e^{-drop}-small instead of algebraic.
    """
    _check_x(sd, x)
    if t <= 0:
        raise ValueError("t must be positive")
    if t <= 4.0 * sd.t_min:
        raise KernelError(
            f"t = {t} too close to the series horizon; rebuild the spectrum "
            "with t_min below t/4")
    # the heads need series evaluations at s0/2 >= t_min; capping s0 from
    # below keeps the mode count K independent of how deep the spectrum is
    s0 = min(max(2.0 * sd.t_min, 0.1), t / 4.0)
    keep = (sd.eigenvalues - sd.lambda1_inf) * s0 >= -drop
    K = int(np.sum(keep))
    if K > 80:
        raise KernelError(
            f"{K} modes needed at t = {t}; the cubic mode sum would be "
            "too large, use the particle simulator instead")
    lam = sd.eigenvalues[:K]
    P = sd.efuncs[:K]
    nrm = sd.norms_sq[:K]
    w = simpson_weights(sd.grid)
    emy = np.exp(-sd.mu * sd.grid)
    I = np.sum(P * (w * emy), axis=1) / nrm          # int e^{-mu y} v_l / ||v_l||^2
    wr = _weighted_r(sd)
    Wz = wr * np.exp(sd.mu * sd.grid)
    # T[k,l,m] = int v_k v_l v_m r e^{mu z} dz
    T = np.einsum("kg,lg,mg,g->klm", P, P, P, Wz, optimize=True)
    a = lam - sd.lambda1_inf                          # outer exponents
    b = (lam[:, None] + lam[None, :]) - 2.0 * sd.lambda1_inf
    A = a[:, None, None]
    B = b[None, :, :]
    diff = A - B
    up = np.exp(A * (t - s0) + B * s0)
    lo = np.exp(A * s0 + B * (t - s0))
    S = np.where(np.abs(diff) > 1e-12, (up - lo) / np.where(diff == 0, 1, diff),
                 (t - 2.0 * s0) * np.exp(A * t))
    vx = sd.mode_values(x)[:K] / nrm
    core = np.einsum("klm,klm,l,m->k", S, T, I, I, optimize=True)
    middle = float(math.exp(sd.mu * x) * np.dot(vx, core))

    # heads: H(s) = int p_s(x, z) r(z) m_{t-s}(z)^2 dz through the full series
    dec = sd.eigenvalues - sd.lambda1_inf
    I_full = np.sum(sd.efuncs * (w * emy), axis=1) / sd.norms_sq
    vx_full = sd.mode_values(x) / sd.norms_sq
    emuz = np.exp(sd.mu * sd.grid)

    def m_row(tau):
        return emuz * ((np.exp(dec * tau) * I_full) @ sd.efuncs)

    def p_row(s):
        return math.exp(sd.mu * x) / emuz * ((np.exp(dec * s) * vx_full) @ sd.efuncs)

    def H(s, tau):
        return float(np.dot(wr, p_row(s) * m_row(tau) ** 2))

    rx = float(sd.potential.r(np.asarray(x)))
    H00 = rx * expected_mass(sd, t, x) ** 2             # s -> 0 limit
    Htt = float(np.dot(wr, p_row(t)))                   # s -> t limit (m_0 = 1)
    head = s0 / 6.0 * (H00 + 4.0 * H(s0 / 2.0, t - s0 / 2.0) + H(s0, t - s0))
    tail = s0 / 6.0 * (H(t - s0, s0) + 4.0 * H(t - s0 / 2.0, s0 / 2.0) + Htt)
    return float(2.0 * (head + middle + tail))


# ---------------------------------------------------------------------------
# Green's function


def _sinh_scaled(A):
    """(sinh(A) * 2 e^{-A}, that is 1 - e^{-2A}) for stable ratios, A >= 0."""
    return -np.expm1(-2.0 * A)


@dataclass
class GreenFunction:
    """Resolvent kernel G_xi(x, y) at spectral shift xi > 0:

        G_xi(x, y) = int_0^inf e^{-xi t} p_t(x, y) dt.

    Built from the two canonical solutions of u'' = (2 lam - W) u at
    lam = lambda1_inf + xi: phi vanishing at 0 (normalized to
    phi'(0) = v1'(0)) and psi vanishing at L (normalized to match
    sinh(sqrt(2 lam)(L - x)) / sinh(sqrt(2 lambda_1)(L - 1)) on [1, L]).

    Because the generator carries (1/2) d^2/dx^2, the delta-jump condition
    puts a factor 2 in front of phi*psi/omega, where omega is the plain
    Wronskian psi phi' - psi' phi.  Correspondingly omega(lam(xi))/xi tends
    to 2 ||v1||^2 as xi -> 0.
    """
    sd: SpectralData
    xi: float
    lam: float
    omega: float            # Wronskian psi phi' - psi' phi (constant in x)

    def phi(self, x):
        return self._phi_vals(np.asarray(x, float))[0]

    def phi_prime(self, x):
        return self._phi_vals(np.asarray(x, float))[1]

    def psi(self, x):
        return self._psi_vals(np.asarray(x, float))[0]

    def psi_prime(self, x):
        return self._psi_vals(np.asarray(x, float))[1]

    def _phi_vals(self, x):
        sd, lam = self.sd, self.lam
        pot = sd.potential
        a = pot.support_right
        x = np.atleast_1d(x)
        u = np.empty_like(x)
        up = np.empty_like(x)
        inside = x <= a
        if np.any(inside):
            from .spectral import _inner_grid, _shoot_inside
            if pot.kind == "table":
                gi = _inner_grid(pot, 1e-3)
                uu, uup = _shoot_inside(pot, lam, gi, 1e-3)
                u[inside] = np.interp(x[inside], gi, uu)
                up[inside] = np.interp(x[inside], gi, uup)
            else:
                c = 2.0 * lam - pot.height if pot.kind == "step" else 2.0 * lam
                uu, uup = linear_propagate(np.zeros_like(x[inside]),
                                           np.ones_like(x[inside]),
                                           np.full_like(x[inside], c), x[inside])
                u[inside] = uu
                up[inside] = uup
        if np.any(~inside):
            uu, uup = linear_propagate(np.full_like(x[~inside], self._phi_a),
                                       np.full_like(x[~inside], self._phip_a),
                                       np.full_like(x[~inside], 2.0 * lam),
                                       x[~inside] - a)
            u[~inside] = uu
            up[~inside] = uup
        scale = 1.0 / self.sd.u1_at_1     # phi'(0) = v1'(0)
        return u * scale, up * scale

    def _psi_vals(self, x):
        sd, lam = self.sd, self.lam
        x = np.atleast_1d(x)
        u = np.empty_like(x)
        up = np.empty_like(x)
        right = x >= 1.0
        if np.any(right):
            u[right], up[right] = self._psi_closed(x[right])
        if np.any(~right):
            x1, xp1 = self._psi_closed(np.array([1.0]))
            pot = sd.potential
            a = pot.support_right
            xs = x[~right]
            uu = np.full_like(xs, float(x1[0]))
            uup = np.full_like(xs, float(xp1[0]))
            # back-propagate over [a, 1] (W = 0) then inside the support
            seg1 = np.maximum(xs, a)
            uu, uup = linear_propagate(uu, uup, 2.0 * lam, seg1 - 1.0)
            below = xs < a
            if np.any(below):
                if pot.kind == "table":
                    uu[below], uup[below] = _table_back_solve(
                        pot, lam, a, uu[below], uup[below], xs[below])
                else:
                    c = 2.0 * lam - pot.height
                    ub, upb = linear_propagate(uu[below], uup[below],
                                               np.full(np.sum(below), c),
                                               xs[below] - a)
                    uu[below], uup[below] = ub, upb
            u[~right] = uu
            up[~right] = uup
        return u, up

    def _psi_closed(self, x):
        """psi and psi' on [1, L] via stable scaled hyperbolics."""
        sd, lam = self.sd, self.lam
        kp = math.sqrt(2.0 * lam)
        k1 = math.sqrt(2.0 * sd.lambda1)
        A = kp * (sd.L - x)
        B = k1 * (sd.L - 1.0)
        # sinh(A)/sinh(B) = e^{A-B}(1-e^{-2A})/(1-e^{-2B}); same for cosh with +
        den = _sinh_scaled(np.array([B]))[0]
        u = np.exp(A - B) * _sinh_scaled(A) / den
        up = -kp * np.exp(A - B) * (1.0 + np.exp(-2.0 * A)) / den
        return u, up

    def __call__(self, x, y):
        """G_xi(x, y), scalar in each argument or broadcast over y."""
        sd = self.sd
        _check_x(sd, x, y)
        x = float(x)
        y = np.asarray(y, float)
        scalar = y.ndim == 0
        y = np.atleast_1d(y)
        phx = float(self._phi_vals(np.array([x]))[0][0])
        psx = float(self._psi_vals(np.array([x]))[0][0])
        phy, _ = self._phi_vals(y)
        psy, _ = self._psi_vals(y)
        lower = y <= x
        vals = np.where(lower, phy * psx, phx * psy)
        out = 2.0 * np.exp(sd.mu * (x - y)) * vals / self.omega
        return float(out[0]) if scalar else out


def _table_back_solve(pot, lam, a, u0, up0, xs):
    """RK4 for u'' = (2 lam - W) u from x = a down to each x in xs (table W)."""
    order = np.argsort(-xs)   # descending targets
    res_u = np.empty_like(xs)
    res_up = np.empty_like(xs)
    u, up = float(u0[0]), float(up0[0])
    xcur = a
    h = -1e-3
    for idx in order:
        xt = xs[idx]
        n = max(1, int(math.ceil((xcur - xt) / abs(h))))
        hh = (xt - xcur) / n
        for _ in range(n):
            def f(xx, uu, uup):
                return uup, (2.0 * lam - float(pot.w(xx))) * uu
            k1u, k1p = f(xcur, u, up)
            k2u, k2p = f(xcur + hh / 2, u + hh / 2 * k1u, up + hh / 2 * k1p)
            k3u, k3p = f(xcur + hh / 2, u + hh / 2 * k2u, up + hh / 2 * k2p)
            k4u, k4p = f(xcur + hh, u + hh * k3u, up + hh * k3p)
            u += hh / 6 * (k1u + 2 * k2u + 2 * k3u + k4u)
            up += hh / 6 * (k1p + 2 * k2p + 2 * k3p + k4p)
            xcur += hh
        res_u[idx] = u
        res_up[idx] = up
    return res_u, res_up


def green_function(sd: SpectralData, xi: float) -> GreenFunction:
    """Construct G_xi for xi > 0 (resolvent shift above lambda1_inf)."""
    if xi <= 0.0:
        raise ValueError("xi must be positive (resolvent shift above lambda1_inf)")
    if sd.lambda1 <= 0.0:
        raise KernelError("psi normalization needs a positive top eigenvalue "
                          "(bound-state regime)")
    lam = sd.lambda1_inf + xi
    g = GreenFunction(sd=sd, xi=float(xi), lam=float(lam), omega=0.0)
    # phi at the support edge, for closed-form continuation
    pot = sd.potential
    a = pot.support_right
    if pot.kind == "table":
        from .spectral import _shoot_inside
        gi = np.linspace(0.0, a, max(2, int(math.ceil(a / 1e-3))) + 1)
        uu, uup = _shoot_inside(pot, lam, gi, 1e-3)
        g._phi_a, g._phip_a = float(uu[-1]), float(uup[-1])
    else:
        c = 2.0 * lam - (pot.height if pot.kind == "step" else 0.0)
        uu, uup = linear_propagate(0.0, 1.0, c, a)
        g._phi_a, g._phip_a = float(uu), float(uup)
    ph1, php1 = g._phi_vals(np.array([1.0]))
    ps1, psp1 = g._psi_vals(np.array([1.0]))
    omega = float(ps1[0] * php1[0] - psp1[0] * ph1[0])
    if omega <= 0.0:
        raise KernelError(f"non-positive Wronskian {omega} at xi = {xi}")
    g.omega = omega
    return g


def green_mode_sum(sd: SpectralData, xi: float, x: float, y: float) -> float:
    """Laplace-transform representation of the same resolvent:

        G_xi(x,y) = sum_k v_k(x) v_k(y) e^{mu(x-y)}
                    / ((xi + lambda1_inf - lambda_k) ||v_k||^2).
    """
    if xi <= 0.0:
        raise ValueError("xi must be positive")
    vx = sd.mode_values(x)
    vy = sd.mode_values(y)
    den = (xi + sd.lambda1_inf - sd.eigenvalues) * sd.norms_sq
    return float(math.exp(sd.mu * (x - y)) * np.sum(vx * vy / den))


def resolvent_quadrature(sd: SpectralData, xi: float, x: float, y: float,
                         t_max: float = 400.0) -> float:
    """Numerical Laplace transform int e^{-xi t} p_t(x, y) dt.

    Integrates the heat-kernel series in time over [t_min, t_max]; this is an
    independent path to G_xi (time quadrature of the expansion versus the
    closed-form phi psi / omega solution of the resolvent ODE).  The omitted
    head [0, t_min] is bounded by t_min times the free Gaussian
    e^{mu(x-y) - (x-y)^2/(2 t_min)} / sqrt(2 pi t_min), negligible whenever
    |x - y| is a few sqrt(t_min); the tail beyond t_max is O(e^{-xi t_max}).
    """
    if xi <= 0.0:
        raise ValueError("xi must be positive")

    def f(t):
        return math.exp(-xi * t) * heat_kernel(sd, float(t), x, y)

    total = 0.0
    # split where the integrand changes character: transient vs spine-mixed
    for a, b in ((sd.t_min, 1.0), (1.0, 10.0), (10.0, t_max)):
        if b > a:
            val, _ = quad(f, a, b, limit=400)
            total += val
    return total


def green_spine_identity(sd: SpectralData, xi: float, x: float):
    """(lhs, rhs) of the normalized resolvent mass identity

        (1/h(0,x)) int_0^L h(0,y) G_xi(x,y) dy = 1/(xi + lambda1_inf - lambda_1).

    The integral is done adaptively on the closed-form kernel.
    """
    g = green_function(sd, xi)
    hx = float(sd.h(0.0, x))

    def f(y):
        return float(sd.h(0.0, y)) * g(x, float(y))

    pts = sorted({0.0, sd.potential.support_right, 1.0, float(x), sd.L})
    total = 0.0
    for a, b in zip(pts[:-1], pts[1:]):
        if b - a > 1e-14:
            val, _ = quad(f, a, b, limit=200)
            total += val
    lhs = total / hx
    rhs = 1.0 / (xi + sd.lambda1_inf - sd.lambda1)
    return lhs, rhs


def wronskian_profile(sd: SpectralData, xi: float, xs) -> np.ndarray:
    """psi(x) phi'(x) - psi'(x) phi(x) along xs; constant for a valid build."""
    g = green_function(sd, xi)
    xs = np.asarray(xs, float)
    ph, php = g._phi_vals(xs)
    ps, psp = g._psi_vals(xs)
    return ps * php - psp * ph


# ---------------------------------------------------------------------------
# escape mass through a level gamma * L


_restricted_cache: dict = {}


def restricted_spectrum(pot, ell: float, t_min: float = 2e-3) -> SpectralData:
    """Spectrum of the same potential on the shortened domain [0, ell]."""
    key = (pot, round(float(ell), 12), float(t_min))
    if key not in _restricted_cache:
        _restricted_cache[key] = solve_spectrum(pot, ell, t_min=t_min)
    return _restricted_cache[key]


def escape_mass(sd: SpectralData, gamma: float, T: float, x: float) -> float:
    """Expected time-integrated absorption flux at the level gamma * L by
    horizon T: the mean count of particles ever killed there when the
    process is run with an absorbing boundary at gamma * L.

        E_x[R] = int_t0^T -(1/2) d_y p_s(x, y)|_{y = ell} ds
               = -(1/2) e^{mu (x - ell)} sum_k
                 S_k v_k(x) v_k'(ell) / ||v_k||^2,
        S_k = (e^{z_k T} - e^{z_k t0}) / z_k,   z_k = lambda_k - lambda1_inf,

    with the eigenpairs of the restricted domain [0, ell], ell = gamma * L.
    Starting the flux integral at the series horizon t0 = t_min rather than 0
    does two things: it damps the deep modes (a plain 1/z_k series converges
    only like one over the cutoff frequency and can even go negative) and it
    omits only Gaussian-suppressed mass e^{-(ell-x)^2 / 2 t0}, which the
    start-distance check below keeps under ~1e-17.
    """
    ell = gamma * sd.L
    if not (0.0 < gamma < 1.0):
        raise ValueError("gamma must lie in (0, 1)")
    if ell <= max(1.0, sd.potential.support_right):
        raise ValueError("gamma * L must exceed the potential support bound 1")
    if not (0.0 <= x < ell):
        raise ValueError("x must lie in [0, gamma L)")
    if T <= 0.0:
        raise ValueError("T must be positive")
    r = restricted_spectrum(sd.potential, ell)
    t0 = r.t_min
    if ell - x < math.sqrt(80.0 * t0):
        raise ValueError(
            f"start point {x} too close to the level {ell}: the pre-horizon "
            f"flux is no longer negligible (need ell - x >= {math.sqrt(80.0 * t0):.3f})")
    if T <= t0:
        return 0.0
    z = r.eigenvalues - sd.lambda1_inf
    zs = np.where(z == 0, 1.0, z)
    S = np.where(np.abs(z) > 1e-14,
                 np.exp(z * t0) * np.expm1(zs * (T - t0)) / zs,
                 T - t0)
    vx = r.mode_values(x)
    vpl = r.ederivs[:, -1]
    val = -0.5 * math.exp(sd.mu * (x - ell)) * np.sum(S * vx * vpl / r.norms_sq)
    return float(val)
