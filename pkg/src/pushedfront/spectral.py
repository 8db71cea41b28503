"""Sturm-Liouville spectral analysis via the Pruefer transformation.

Solves

    (1/2) v'' + (1/2) W v = lambda v   on (0, L),   v(0) = v(L) = 0,

for a non-negative perturbation W supported in [0, 1].  The top eigenpair
controls criticality of the associated branching Brownian motion: the drift
is mu = sqrt(1 + 2*lambda1_inf), the front decay rate is
beta = sqrt(2*lambda1_inf), and the regime (pulled / semipushed / fully
pushed) is read off lambda1_inf against the thresholds 0 and 1/16.

The Pruefer substitution u = rho*sin(theta), u' = rho*cos(theta) turns the
eigenvalue problem into a phase condition theta_lambda(L) = k*pi, with

    theta' = cos(theta)^2 + (W - 2*lambda) sin(theta)^2,
    (log rho)' = ((1 - W)/2 + lambda) sin(2*theta).

We integrate log(rho), never rho, so very negative lambda cannot overflow.
Wherever W is piecewise constant (step potentials, and everywhere to the
right of the support) the pair (theta, log rho) is propagated with exact
constant-coefficient formulas instead of an ODE stepper; a fixed-step RK4
on [0, support] is only used for tabulated potentials.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.integrate import simpson
from scipy.optimize import brentq

PI = math.pi

# Everything below lambda1 - SERIES_DROP/t_min is cut from eigen-series:
# exp((lambda_M - lambda_1) * t_min) <= 1e-12.
SERIES_DROP = 12.0 * math.log(10.0)
DEFAULT_T_MIN = 0.05

PULLED = "Pulled"
SEMIPUSHED = "Semipushed"
FULLY_PUSHED = "FullyPushed"


class SpectralError(RuntimeError):
    """Raised when the spectral solver cannot certify its output."""


# ---------------------------------------------------------------------------
# Potential


@dataclass(frozen=True)
class Potential:
    """Perturbation W >= 0 with support in [0, support_right], support_right <= 1.

    kind is one of "zero", "step" (constant height on [0, support_right]) or
    "table" (piecewise-linear interpolation of (xs, ws) samples).  The
    branching rate of the particle system is r(x) = (1 + W(x))/2, so
    r_max = (1 + sup W)/2 is the thinning rate used by the simulator.
    """

    kind: str
    support_right: float = 1.0
    height: float = 0.0
    xs: tuple = ()
    ws: tuple = ()

    def __post_init__(self):
        if self.kind not in ("zero", "step", "table"):
            raise ValueError(f"unknown potential kind {self.kind!r}")
        if not (0.0 < self.support_right <= 1.0):
            raise ValueError("support_right must lie in (0, 1]")
        if self.kind == "step" and self.height < 0.0:
            raise ValueError("step height must be >= 0 (W >= 0)")
        if self.kind == "table":
            xs = np.asarray(self.xs, float)
            ws = np.asarray(self.ws, float)
            if xs.ndim != 1 or xs.shape != ws.shape or len(xs) < 2:
                raise ValueError("table potential needs matching 1-d xs, ws")
            if np.any(np.diff(xs) <= 0):
                raise ValueError("table abscissae must be strictly increasing")
            if xs[0] < 0.0 or xs[-1] > self.support_right + 1e-12:
                raise ValueError("table support exceeds support_right")
            if np.any(ws < 0.0):
                raise ValueError("W must be non-negative")

    # -- constructors

    @staticmethod
    def zero() -> "Potential":
        return Potential(kind="zero", support_right=1.0, height=0.0)

    @staticmethod
    def step(height: float, support_right: float = 1.0) -> "Potential":
        if height == 0.0:
            return Potential.zero()
        return Potential(kind="step", support_right=support_right, height=height)

    @staticmethod
    def table(xs, ws) -> "Potential":
        xs = np.asarray(xs, float)
        ws = np.asarray(ws, float)
        return Potential(kind="table", support_right=min(1.0, float(xs[-1])),
                         xs=tuple(xs.tolist()), ws=tuple(ws.tolist()))

    @staticmethod
    def from_callable(fn, support_right: float = 1.0, n: int = 2001) -> "Potential":
        xs = np.linspace(0.0, support_right, n)
        return Potential.table(xs, np.maximum(np.asarray(fn(xs), float), 0.0))

    # -- evaluation

    def _table_arrays(self):
        arrs = getattr(self, "_tab", None)
        if arrs is None:
            arrs = (np.asarray(self.xs, float), np.asarray(self.ws, float))
            object.__setattr__(self, "_tab", arrs)
        return arrs

    def w(self, x):
        x = np.asarray(x, float)
        if self.kind == "zero":
            return np.zeros_like(x)
        if self.kind == "step":
            return np.where((x >= 0.0) & (x <= self.support_right), self.height, 0.0)
        xs, ws = self._table_arrays()
        out = np.interp(x, xs, ws, left=0.0, right=0.0)
        return np.where((x >= 0.0) & (x <= self.support_right), out, 0.0)

    def r(self, x):
        return 0.5 * (1.0 + self.w(x))

    def w_antiderivative(self, x):
        """Exact int_0^x W(s) ds (piecewise closed form for every kind).

        Cell averages of W built from differences of this stay second
        order across the jump of a step potential, where pointwise
        sampling would be first order.
        """
        x = np.asarray(x, float)
        if self.kind == "zero":
            return np.zeros_like(x)
        if self.kind == "step":
            return self.height * np.clip(x, 0.0, self.support_right)
        xs, ws = self._table_arrays()
        cum = np.concatenate(
            ([0.0], np.cumsum(0.5 * (ws[1:] + ws[:-1]) * np.diff(xs))))
        xc = np.clip(x, xs[0], xs[-1])
        idx = np.clip(np.searchsorted(xs, xc, side="right") - 1,
                      0, len(xs) - 2)
        wl = ws[idx]
        frac = (xc - xs[idx]) / (xs[idx + 1] - xs[idx])
        wx = wl + frac * (ws[idx + 1] - wl)
        return cum[idx] + 0.5 * (wl + wx) * (xc - xs[idx])

    def r_cell_average(self, lo, hi):
        """Average of r over [lo, hi] (exact, for finite-volume grids)."""
        lo = np.asarray(lo, float)
        hi = np.asarray(hi, float)
        wbar = (self.w_antiderivative(hi) - self.w_antiderivative(lo)) \
            / (hi - lo)
        return 0.5 * (1.0 + wbar)

    @property
    def sup_w(self) -> float:
        if self.kind == "zero":
            return 0.0
        if self.kind == "step":
            return float(self.height)
        return float(max(self.ws))

    @property
    def r_max(self) -> float:
        return 0.5 * (1.0 + self.sup_w)

    def scaled(self, eps: float) -> "Potential":
        """The potential eps*W (used for regime-threshold sweeps)."""
        if self.kind == "zero" or eps == 0.0:
            return Potential.zero()
        if self.kind == "step":
            return Potential.step(eps * self.height, self.support_right)
        return Potential.table(np.asarray(self.xs), eps * np.asarray(self.ws))


# ---------------------------------------------------------------------------
# Exact propagation across W-free (or constant-W) stretches


def _theta_of_chi(chi, omega):
    """Continuous increasing map theta(chi) with tan(theta) = tan(chi)/omega."""
    m = np.round(chi / PI)
    d = chi - m * PI  # in (-pi/2, pi/2]
    return m * PI + np.arctan2(np.sin(d), omega * np.cos(d))


def free_propagate(theta, logrho, lam, s):
    """Advance the Pruefer pair (theta, log rho) across a stretch of length s
    where the equation is u'' = 2*lam*u (constant coefficients), exactly.

    For a constant potential piece W = b, call with lam - b/2.  Inputs
    broadcast; s must be >= 0.
    """
    theta, logrho, lam, s = np.broadcast_arrays(
        np.asarray(theta, float), np.asarray(logrho, float),
        np.asarray(lam, float), np.asarray(s, float))
    out_t = np.array(theta, float, copy=True)
    out_r = np.array(logrho, float, copy=True)
    u0 = np.sin(theta)
    up0 = np.cos(theta)
    q = 2.0 * lam

    small = np.abs(q) * s * s < 1e-6
    run = s > 0.0

    def _band_fix(idx, u1, up1, crossings):
        n2 = np.floor(theta[idx] / PI) + crossings
        that = np.arctan2(u1, up1)
        out_t[idx] = that + PI * (n2 - np.floor(that / PI))
        out_r[idx] = logrho[idx] + 0.5 * np.log(u1 * u1 + up1 * up1)

    m = small & run
    if np.any(m):
        a = q[m] * s[m] * s[m]
        C = 1.0 + a / 2.0 + a * a / 24.0
        S = s[m] * (1.0 + a / 6.0 + a * a / 120.0)
        u1 = u0[m] * C + up0[m] * S
        up1 = u0[m] * q[m] * S + up0[m] * C
        _band_fix(m, u1, up1, (u0[m] * u1 < 0.0).astype(float))

    m = (q > 0.0) & ~small & run
    if np.any(m):
        k = np.sqrt(q[m])
        E = np.exp(-2.0 * k * s[m])
        u1 = 0.5 * (u0[m] * (1.0 + E) + (up0[m] / k) * (1.0 - E))   # e^{-ks} u(s)
        up1 = 0.5 * (u0[m] * k * (1.0 - E) + up0[m] * (1.0 + E))    # e^{-ks} u'(s)
        n2 = np.floor(theta[m] / PI) + (u0[m] * u1 < 0.0)
        that = np.arctan2(u1, up1)
        out_t[m] = that + PI * (n2 - np.floor(that / PI))
        # the scaled pair can cancel to zero only at eigenvalue-degenerate
        # inputs far below float resolution; floor the norm to keep logs finite
        out_r[m] = logrho[m] + k * s[m] + 0.5 * np.log(
            np.maximum(u1 * u1 + up1 * up1, 1e-300))

    m = (q < 0.0) & ~small & run
    if np.any(m):
        om = np.sqrt(-q[m])
        A = u0[m]
        B = up0[m] / om
        chi0 = np.arctan2(A, B)
        chi1 = chi0 + om * s[m]
        t0 = _theta_of_chi(chi0, om)
        t1 = _theta_of_chi(chi1, om)
        off = np.round((theta[m] - t0) / PI)
        out_t[m] = t1 + off * PI
        R2 = A * A + B * B
        u1 = np.sin(chi1)
        up1 = om * np.cos(chi1)
        out_r[m] = logrho[m] + 0.5 * np.log(R2 * (u1 * u1 + up1 * up1))

    return out_t, out_r


def linear_propagate(u, up, c, s):
    """Solve u'' = c*u over (possibly negative) duration s; exact, vectorized."""
    u, up, c, s = np.broadcast_arrays(np.asarray(u, float), np.asarray(up, float),
                                      np.asarray(c, float), np.asarray(s, float))
    out_u = np.empty_like(u)
    out_up = np.empty_like(u)

    small = np.abs(c) * s * s < 1e-6
    if np.any(small):
        a = c[small] * s[small] * s[small]
        C = 1.0 + a / 2.0 + a * a / 24.0
        S = s[small] * (1.0 + a / 6.0 + a * a / 120.0)
        out_u[small] = u[small] * C + up[small] * S
        out_up[small] = u[small] * c[small] * S + up[small] * C

    m = (c > 0.0) & ~small
    if np.any(m):
        k = np.sqrt(c[m])
        ch = np.cosh(k * s[m])
        sh = np.sinh(k * s[m])
        out_u[m] = u[m] * ch + up[m] * sh / k
        out_up[m] = u[m] * k * sh + up[m] * ch

    m = (c < 0.0) & ~small
    if np.any(m):
        om = np.sqrt(-c[m])
        co = np.cos(om * s[m])
        si = np.sin(om * s[m])
        out_u[m] = u[m] * co + up[m] * si / om
        out_up[m] = -u[m] * om * si + up[m] * co

    return out_u, out_up


# ---------------------------------------------------------------------------
# Pruefer integration


def _prufer_rk4(pot: Potential, lams, x0: float, x1: float, step: float,
                theta, logrho, grid_out=None):
    """Fixed-step RK4 for the Pruefer pair on [x0, x1] (tabulated potentials).

    If grid_out is given, (theta, logrho) are recorded at those abscissae
    (which must include x0 and x1 and be uniform)."""
    lams = np.asarray(lams, float)
    theta = np.array(theta, float, copy=True)
    logrho = np.array(logrho, float, copy=True)

    if grid_out is not None:
        xs = np.asarray(grid_out, float)
        rec_t = np.empty((len(xs),) + theta.shape)
        rec_r = np.empty_like(rec_t)
        rec_t[0] = theta
        rec_r[0] = logrho
    n = max(1, int(math.ceil((x1 - x0) / step)))
    if grid_out is not None:
        # land exactly on the recording grid
        n = max(n, len(np.asarray(grid_out)) - 1)
        n = int(math.ceil(n / (len(np.asarray(grid_out)) - 1))) * (len(np.asarray(grid_out)) - 1)
    h = (x1 - x0) / n
    rec_every = n // (len(np.asarray(grid_out)) - 1) if grid_out is not None else 0

    def rhs(x, th):
        Wx = pot.w(x)
        s2 = np.sin(th) ** 2
        dth = np.cos(th) ** 2 + (Wx - 2.0 * lams) * s2
        dlr = ((1.0 - Wx) / 2.0 + lams) * np.sin(2.0 * th)
        return dth, dlr

    x = x0
    for i in range(n):
        k1t, k1r = rhs(x, theta)
        k2t, k2r = rhs(x + h / 2, theta + h / 2 * k1t)
        k3t, k3r = rhs(x + h / 2, theta + h / 2 * k2t)
        k4t, k4r = rhs(x + h, theta + h * k3t)
        theta = theta + h / 6 * (k1t + 2 * k2t + 2 * k3t + k4t)
        logrho = logrho + h / 6 * (k1r + 2 * k2r + 2 * k3r + k4r)
        x = x0 + (i + 1) * h
        if grid_out is not None and (i + 1) % rec_every == 0:
            j = (i + 1) // rec_every
            rec_t[j] = theta
            rec_r[j] = logrho

    if grid_out is not None:
        return theta, logrho, rec_t, rec_r
    return theta, logrho


def _phase_end(pot: Potential, lams, L: float, step: float = 1e-3):
    """theta_lambda(L) and log rho_lambda(L) for an array of lambdas."""
    lams = np.atleast_1d(np.asarray(lams, float))
    theta = np.zeros_like(lams)
    logrho = np.zeros_like(lams)
    a = pot.support_right
    if pot.kind == "step":
        theta, logrho = free_propagate(theta, logrho, lams - pot.height / 2.0, a)
    elif pot.kind == "table":
        theta, logrho = _prufer_rk4(pot, lams, 0.0, a, step, theta, logrho)
    else:  # zero
        a = 0.0
    if L > a:
        theta, logrho = free_propagate(theta, logrho, lams, L - a)
    return theta, logrho


@dataclass(frozen=True)
class PruferTrace:
    """Phase/amplitude trace of the shooting solution at a fixed lambda."""
    lam: float
    grid: np.ndarray
    theta: np.ndarray
    logrho: np.ndarray

    @property
    def rho(self) -> np.ndarray:
        return np.exp(self.logrho)

    def crossings(self) -> np.ndarray:
        """Count of multiples of pi crossed up to each grid point."""
        return np.floor(self.theta / PI).astype(int)


def _even_count(n: int) -> int:
    """Round an interval count up to even (composite Simpson needs it)."""
    n = max(2, n)
    return n + (n % 2)


def _inner_grid(pot: Potential, step: float) -> np.ndarray:
    a = pot.support_right
    n = _even_count(int(math.ceil(a / step)))
    return np.linspace(0.0, a, n + 1)


def _resolved_dx(dx: float, lam_min: float, shift: float = 0.0) -> float:
    """Grid spacing fine enough to resolve oscillations at the deepest mode.

    A mode at lambda has local frequency sqrt(shift - 2 lambda); eight grid
    points per wavelength keeps sign-change counting and quadrature honest.
    """
    om = math.sqrt(max(1.0, shift - 2.0 * lam_min))
    return min(dx, PI / (4.0 * om))


def _sq_integral(c: float, delta: float, p: float, q: float) -> float:
    """integral of u(s)^2 over [0, delta] where u'' = c u, u(0)=p, u'(0)=q.

    Closed forms in the trig (c < 0) and hyperbolic (c > 0) branches, and a
    series branch near c = 0 where both collapse.  Written in the (C, S)
    fundamental basis so nothing blows up as c -> 0.
    """
    if abs(c) * delta * delta < 1e-6:
        i_cc = delta + c * delta ** 3 / 3.0
        i_cs = delta ** 2 / 2.0 + c * delta ** 4 / 6.0
        i_ss = delta ** 3 / 3.0 + c * delta ** 5 / 15.0
    elif c < 0.0:
        om = math.sqrt(-c)
        s2 = math.sin(2.0 * om * delta) / (4.0 * om)
        i_cc = delta / 2.0 + s2
        i_cs = (math.sin(om * delta) / om) ** 2 / 2.0
        i_ss = (delta / 2.0 - s2) / (-c)
    else:
        kp = math.sqrt(c)
        if kp * delta > 350.0:
            raise SpectralError("hyperbolic norm integral would overflow; "
                                "use the anchored eigenfunction form instead")
        s2 = math.sinh(2.0 * kp * delta) / (4.0 * kp)
        i_cc = delta / 2.0 + s2
        i_cs = (math.sinh(kp * delta) / kp) ** 2 / 2.0
        i_ss = (s2 - delta / 2.0) / c
    return p * p * i_cc + 2.0 * p * q * i_cs + q * q * i_ss


def _exact_norm_sq(pot: Potential, lam: float, L: float,
                   u_a: float, up_a: float) -> float:
    """Exact L^2 norm of the shooting eigenfunction for piecewise-constant W.

    For lam > 0 the outside piece uses the decay-anchored sinh form (the same
    representation the tabulation uses), which is exact when lam is an
    eigenvalue and immune to the growing-mode cancellation.
    """
    a = pot.support_right
    total = 0.0
    if a > 0.0:
        total += _sq_integral(2.0 * lam - pot.height, a, 0.0, 1.0)
    delta = L - a
    if lam > 0.0 and 2.0 * lam * delta * delta >= 1e-6:
        kp = math.sqrt(2.0 * lam)
        kd = kp * delta
        if kd > 350.0:
            tail = u_a * u_a / (2.0 * kp)
        else:
            sh = math.sinh(kd)
            tail = u_a * u_a * (math.cosh(kd) / (2.0 * kp * sh)
                                - delta / (2.0 * sh * sh))
        total += tail
    else:
        total += _sq_integral(2.0 * lam, delta, u_a, up_a)
    return total


def prufer_integrate(pot: Potential, lam: float, L: float, step: float = 1e-3,
                     outer_dx: float = 1e-2) -> PruferTrace:
    """Pruefer trace of the solution with u(0)=0, u'(0)=1 on [0, L].

    Uses exact constant-coefficient propagation on every W-free (or
    constant-W) stretch and RK4 at the requested step otherwise.  log(rho)
    is integrated throughout, so no amplitude overflow can occur.

    Precision note: for lam > 0 within ~e^{-2 sqrt(2 lam)(L-1)} of the top
    eigenvalue, u(L) is a cancellation of two exponentially large basis
    solutions and the terminal phase carries a relative error of order
    eps * e^{2 sqrt(2 lam)(L-1)}.  This is inherent to double precision,
    not to the scheme; eigenvalue bisection is unaffected because it only
    consumes phase signs away from the collapsed bracket.
    """
    if L <= 1.0:
        raise ValueError("L must exceed the support bound 1")
    if step <= 0.0:
        raise ValueError("step must be positive")
    a = pot.support_right
    gi = _inner_grid(pot, step)
    lam_arr = np.array([float(lam)])

    if pot.kind == "step":
        t_in, r_in = free_propagate(np.zeros_like(gi), np.zeros_like(gi),
                                    np.full_like(gi, lam - pot.height / 2.0), gi)
    elif pot.kind == "zero":
        t_in, r_in = free_propagate(np.zeros_like(gi), np.zeros_like(gi),
                                    np.full_like(gi, lam), gi)
    else:
        _, _, rec_t, rec_r = _prufer_rk4(pot, lam_arr, 0.0, a, step,
                                         np.zeros(1), np.zeros(1), grid_out=gi)
        t_in, r_in = rec_t[:, 0], rec_r[:, 0]

    n_out = _even_count(int(math.ceil((L - a) / outer_dx)))
    go = np.linspace(a, L, n_out + 1)
    t_out, r_out = free_propagate(np.full_like(go, t_in[-1]),
                                  np.full_like(go, r_in[-1]),
                                  np.full_like(go, lam), go - a)
    grid = np.concatenate([gi, go[1:]])
    theta = np.concatenate([t_in, t_out[1:]])
    logrho = np.concatenate([r_in, r_out[1:]])
    return PruferTrace(lam=float(lam), grid=grid, theta=theta, logrho=logrho)


# ---------------------------------------------------------------------------
# Eigenvalues


def eigenvalues_batch(pot: Potential, L: float, kmax: int, step: float = 1e-3,
                      xtol: float = 1e-12, phase_tol: float = 1e-10) -> np.ndarray:
    """First kmax eigenvalues, solved simultaneously by bisection on the phase.

    theta_lambda(L) is strictly decreasing in lambda, so lambda_k is the
    unique solution of theta_lambda(L) = k*pi.  Brackets come from the
    comparison bounds: the Dirichlet Laplacian gives the lower end and
    lambda_1 <= sup(W)/2 caps everything from above.
    """
    if L <= 1.0:
        raise ValueError("L must exceed the support bound 1")
    ks = np.arange(1, kmax + 1)
    target = ks * PI
    lo = -(ks ** 2) * PI ** 2 / (2.0 * L ** 2) - 1e-9
    hi = np.full(kmax, pot.sup_w / 2.0 + 1e-6)

    th_lo, _ = _phase_end(pot, lo, L, step)
    th_hi, _ = _phase_end(pot, hi, L, step)
    bad = th_lo < target
    tries = 0
    while np.any(bad):
        # widen downward; indicates the comparison bound was too tight
        lo[bad] = lo[bad] * 2.0 - 1.0
        th_lo, _ = _phase_end(pot, lo, L, step)
        bad = th_lo < target
        tries += 1
        if tries > 60:
            raise SpectralError("eigenvalue bracket failure at the lower end")
    bad = th_hi > target
    tries = 0
    while np.any(bad):
        hi[bad] = hi[bad] * 2.0 + 1.0
        th_hi, _ = _phase_end(pot, hi, L, step)
        bad = th_hi > target
        tries += 1
        if tries > 60:
            raise SpectralError("eigenvalue bracket failure at the upper end")

    # Bisect down to float spacing: the phase residual scales like
    # |d theta / d lambda| ~ L^2 for the shallowest modes, so a 1e-12-wide
    # bracket alone would not certify |theta(L) - k pi| <= phase_tol.
    for _ in range(110):
        mid = 0.5 * (lo + hi)
        th, _ = _phase_end(pot, mid, L, step)
        take_hi = th <= target   # phase too small -> lambda too big
        hi = np.where(take_hi, mid, hi)
        lo = np.where(take_hi, lo, mid)
        width_floor = np.maximum(8.0 * np.spacing(np.maximum(np.abs(lo), np.abs(hi))),
                                 min(xtol, 1e-14))
        if np.all(hi - lo <= np.maximum(width_floor, 0.0)):
            break

    lam = 0.5 * (lo + hi)
    th, _ = _phase_end(pot, lam, L, step)
    resid = np.abs(th - target)
    # Near lambda_1 with a long W-free stretch, theta(L) transitions through
    # k*pi over a lambda-window of width ~ e^{-2 sqrt(2 lam)(L-1)}, far below
    # float spacing; the residual certificate is then unattainable even
    # though the bracket has collapsed onto the root.  Accept either a small
    # residual or an ulp-width bracket (theta(lo) >= k pi >= theta(hi) is a
    # loop invariant).
    width_ok = (hi - lo) <= np.maximum(
        xtol, 16.0 * np.spacing(np.maximum(np.abs(lo), np.abs(hi))))
    if np.any((resid > phase_tol) & ~width_ok):
        j = int(np.argmax(np.where(width_ok, 0.0, resid)))
        raise SpectralError(
            f"phase residual {resid[j]:.3e} exceeds {phase_tol:.1e} for k={j + 1} "
            "without a collapsed bracket; integrator failure")
    if np.any(np.diff(lam) >= 0):
        raise SpectralError("eigenvalues not strictly decreasing")
    return lam


def eigenvalue(pot: Potential, L: float, k: int, step: float = 1e-3) -> float:
    """k-th eigenvalue (k = 1 is the top of the spectrum)."""
    if k < 1:
        raise ValueError("k must be >= 1")
    return float(eigenvalues_batch(pot, L, k, step=step)[k - 1])


# ---------------------------------------------------------------------------
# Eigenfunctions


@dataclass(frozen=True)
class Eigenfunction:
    k: int
    lam: float
    grid: np.ndarray
    values: np.ndarray        # normalization u'(0) = 1
    derivs: np.ndarray
    norm_sq: float            # integral of values^2 over [0, L]
    n_zeros: int              # interior sign changes


def _shoot_inside(pot: Potential, lam: float, grid_in: np.ndarray, step: float):
    """(u, u') on grid_in (subset of [0, support]) with u(0)=0, u'(0)=1."""
    if pot.kind == "step":
        c = 2.0 * lam - pot.height
        u, up = linear_propagate(np.zeros_like(grid_in), np.ones_like(grid_in),
                                 np.full_like(grid_in, c), grid_in)
        return u, up
    if pot.kind == "zero":
        u, up = linear_propagate(np.zeros_like(grid_in), np.ones_like(grid_in),
                                 np.full_like(grid_in, 2.0 * lam), grid_in)
        return u, up
    # deep modes oscillate fast; keep the RK4 phase error per step small
    step = min(step, 0.35 / math.sqrt(1.0 + pot.sup_w + 2.0 * max(0.0, -lam)))
    _, _, rec_t, rec_r = _prufer_rk4(pot, np.array([lam]), 0.0, grid_in[-1], step,
                                     np.zeros(1), np.zeros(1), grid_out=grid_in)
    rho = np.exp(rec_r[:, 0])
    return rho * np.sin(rec_t[:, 0]), rho * np.cos(rec_t[:, 0])


def _eigen_outside(lam: float, L: float, a: float, u_a: float, up_a: float,
                   x: np.ndarray):
    """(u, u') on [a, L] for an eigenvalue lam (so u(L) = 0 exactly).

    For lam > 0 the naive cosh/sinh combination cancels catastrophically at
    large L; we anchor on the decaying closed form sinh(sqrt(2 lam)(L - x))
    instead, which is exact for eigenfunctions.
    """
    q = 2.0 * lam
    if q * (L - a) ** 2 >= 1e-6 and lam > 0.0:
        kp = math.sqrt(q)
        scale = u_a / math.sinh(kp * (L - a))
        u = scale * np.sinh(kp * (L - x))
        up = -scale * kp * np.cosh(kp * (L - x))
        return u, up
    return linear_propagate(np.full_like(x, u_a), np.full_like(x, up_a),
                            np.full_like(x, q), x - a)


def eigenfunction(pot: Potential, L: float, k: int, step: float = 1e-3,
                  outer_dx: float = 1e-2, lam: float | None = None) -> Eigenfunction:
    """Tabulated k-th eigenfunction with u'(0) = 1 and its L^2 norm."""
    if lam is None:
        lam = eigenvalue(pot, L, k, step=step)
    a = pot.support_right
    gi = _inner_grid(pot, _resolved_dx(step, lam, shift=pot.sup_w))
    u_in, up_in = _shoot_inside(pot, lam, gi, step)
    n_out = _even_count(int(math.ceil((L - a) / _resolved_dx(outer_dx, lam))))
    go = np.linspace(a, L, n_out + 1)
    u_out, up_out = _eigen_outside(lam, L, a, u_in[-1], up_in[-1], go)
    grid = np.concatenate([gi, go[1:]])
    vals = np.concatenate([u_in, u_out[1:]])
    ders = np.concatenate([up_in, up_out[1:]])
    vals[-1] = 0.0   # Dirichlet condition holds exactly; kill roundoff residue
    nz = int(np.sum(vals[1:-2] * vals[2:-1] < 0.0))
    if nz != k - 1:
        raise SpectralError(
            f"eigenfunction {k} has {nz} interior zeros (expected {k - 1}); "
            "phase-integration failure")
    if pot.kind in ("step", "zero"):
        norm_sq = _exact_norm_sq(pot, lam, L, float(u_in[-1]), float(up_in[-1]))
    else:
        norm_sq = float(simpson(vals ** 2, x=grid))
    return Eigenfunction(k=k, lam=float(lam), grid=grid, values=vals,
                         derivs=ders, norm_sq=norm_sq, n_zeros=nz)


# ---------------------------------------------------------------------------
# Infinite-domain top eigenvalue (decaying-match shooting)


def _match_function_batch(pot: Potential, lams, step: float = 1e-3):
    """u'(1) + sqrt(2 lam) u(1) for an array of lam (vectorized shooting);
    the largest root in (0, sup W / 2) is lambda1_inf."""
    lams = np.atleast_1d(np.asarray(lams, float))
    a = pot.support_right
    if pot.kind == "table":
        th, lr = _prufer_rk4(pot, lams, 0.0, a, step, np.zeros_like(lams),
                             np.zeros_like(lams))
        rho = np.exp(lr)
        u_a, up_a = rho * np.sin(th), rho * np.cos(th)
    else:
        c = 2.0 * lams - (pot.height if pot.kind == "step" else 0.0)
        u_a, up_a = linear_propagate(np.zeros_like(lams), np.ones_like(lams), c, a)
    if a < 1.0:
        u_a, up_a = linear_propagate(u_a, up_a, 2.0 * lams, 1.0 - a)
    return up_a + np.sqrt(2.0 * lams) * u_a


def _match_function(pot: Potential, lam: float, step: float = 1e-3) -> float:
    return float(_match_function_batch(pot, np.array([lam]), step)[0])


def limit_top_eigenvalue(pot: Potential, step: float = 1e-3,
                         cross_validate: bool = True) -> float:
    """lambda1_inf: the L -> infinity limit of the top eigenvalue.

    Solves the decaying-match condition u'(1) + sqrt(2 lambda) u(1) = 0 for
    the shooting solution on [0, 1]; no root means no bound state and the
    limit is 0 (pulled regime).  The root is cross-validated against the
    finite-L eigenvalue, which increases to lambda1_inf.
    """
    sup_w = pot.sup_w
    if sup_w == 0.0:
        return 0.0
    lo = 1e-12
    hi = sup_w / 2.0 - 1e-12
    grid = np.linspace(lo, hi, 400)
    vals = _match_function_batch(pot, grid, step)
    root = None
    for i in range(len(grid) - 1, 0, -1):  # scan down: largest root first
        if np.isfinite(vals[i]) and np.isfinite(vals[i - 1]) and vals[i] * vals[i - 1] < 0:
            root = brentq(lambda l: _match_function(pot, l, step),
                          grid[i - 1], grid[i], xtol=1e-14, rtol=8.9e-16)
            break
    if root is None:
        lam_inf = 0.0
    else:
        lam_inf = float(root)

    if cross_validate:
        L_chk = 35.0
        lam_L = eigenvalue(pot, L_chk, 1, step=step)
        if lam_inf > 0.0:
            beta = math.sqrt(2.0 * lam_inf)
            tol = 1e-8 + 100.0 * math.exp(-2.0 * beta * L_chk)
            if not (lam_L < lam_inf + 1e-12 and lam_inf - lam_L < tol):
                raise SpectralError(
                    f"lambda1_inf root {lam_inf:.9f} inconsistent with "
                    f"lambda_1({L_chk}) = {lam_L:.9f}")
        else:
            if not (-3.0 * PI ** 2 / (2.0 * L_chk ** 2) < lam_L < 1e-8):
                raise SpectralError(
                    f"no bound state found but lambda_1({L_chk}) = {lam_L:.3e}")
    return lam_inf


def classify_regime(lam_inf: float):
    """(regime, mu, beta, alpha) from lambda1_inf; alpha := 1 when beta = 0."""
    if lam_inf < 0.0:
        raise ValueError("lambda1_inf must be >= 0")
    mu = math.sqrt(1.0 + 2.0 * lam_inf)
    beta = math.sqrt(2.0 * lam_inf)
    if lam_inf == 0.0:
        return PULLED, mu, beta, 1.0
    alpha = (mu + beta) / (mu - beta)
    if lam_inf > 1.0 / 16.0:
        return FULLY_PUSHED, mu, beta, alpha
    return SEMIPUSHED, mu, beta, alpha


def regime_thresholds(wtilde: Potential, step: float = 1e-3):
    """(eps1, eps2) for the family eps * Wtilde: the BBM is pulled below eps1
    and fully pushed above eps2.

    eps1 is where a bound state first appears, i.e. the zero of
    u'(1; lambda=0) as a function of eps; eps2 solves lambda1_inf(eps) = 1/16.
    """
    def match_at_zero(eps):
        # at lam = 0 the matching function reduces to u'(1) alone
        pot = wtilde.scaled(eps)
        a = pot.support_right
        u, up = _shoot_inside(pot, 0.0, np.array([0.0, a]), step)
        u_a, up_a = float(u[-1]), float(up[-1])
        if a < 1.0:
            u_a, up_a = linear_propagate(u_a, up_a, 0.0, 1.0 - a)
            u_a, up_a = float(u_a), float(up_a)
        return up_a

    hi = 1.0
    while match_at_zero(hi) > 0.0:
        hi *= 2.0
        if hi > 1e6:
            raise SpectralError("no binding threshold found")
    eps1 = brentq(match_at_zero, 1e-9, hi, xtol=1e-12)

    def lam_minus(eps):
        return limit_top_eigenvalue(wtilde.scaled(eps), step,
                                    cross_validate=False) - 1.0 / 16.0

    hi2 = max(2.0 * eps1, 1.0)
    while lam_minus(hi2) < 0.0:
        hi2 *= 2.0
        if hi2 > 1e6:
            raise SpectralError("no fully-pushed threshold found")
    eps2 = brentq(lam_minus, eps1 * (1.0 + 1e-9), hi2, xtol=1e-12)
    return float(eps1), float(eps2)


# ---------------------------------------------------------------------------
# Full spectral data


@dataclass
class SpectralData:
    """Immutable bundle of everything downstream modules need.

    Eigenfunctions are stored with the internal normalization u'(0) = 1; all
    spectral sums divide by the stored L^2 norms so the scaling cancels.  v1
    is additionally exposed with the convention v1(1) = 1.
    """
    potential: Potential
    L: float
    t_min: float
    eigenvalues: np.ndarray          # descending
    grid: np.ndarray
    efuncs: np.ndarray               # (M, len(grid))
    ederivs: np.ndarray
    norms_sq: np.ndarray
    K: int                           # count of positive eigenvalues
    lambda1_inf: float
    mu: float
    beta: float
    alpha: float
    regime: str
    u1_at_1: float                   # scaling between u1 and v1
    # infinite-domain quantities (fully pushed only; None otherwise)
    tilde_c: float | None = None
    Sigma2: float | None = None
    v1_inf_grid: np.ndarray | None = None
    v1_inf_vals: np.ndarray | None = None
    norm_v1_inf_sq: float | None = None

    # -- basic accessors ----------------------------------------------------

    @property
    def lambda1(self) -> float:
        return float(self.eigenvalues[0])

    @property
    def n_modes(self) -> int:
        return len(self.eigenvalues)

    def mode_values(self, x):
        """Exact eigenfunction values u_k(x), shape (M,) + shape(x)."""
        return self._modes_at(np.asarray(x, float), deriv=False)

    def mode_derivs(self, x):
        return self._modes_at(np.asarray(x, float), deriv=True)

    def _modes_at(self, x, deriv: bool):
        pot = self.potential
        lam = self.eigenvalues
        a = pot.support_right
        scalar = np.isscalar(x) or np.ndim(x) == 0
        x = np.atleast_1d(np.asarray(x, float))
        if np.any((x < 0) | (x > self.L)):
            raise ValueError("x outside [0, L]")
        out = np.empty((len(lam), len(x)))
        inside = x <= a
        if pot.kind == "table":
            # cubic-ish fallback: interpolate the stored fine tabulation
            src = self.ederivs if deriv else self.efuncs
            j = np.clip(np.searchsorted(self.grid, x), 1, len(self.grid) - 1)
            w = (x - self.grid[j - 1]) / (self.grid[j] - self.grid[j - 1])
            out = src[:, j - 1] * (1.0 - w) + src[:, j] * w
            return (out[:, 0] if scalar else out)
        if np.any(inside):
            xi = x[inside]
            c = 2.0 * lam[:, None] - (pot.height if pot.kind == "step" else 0.0)
            u, up = linear_propagate(np.zeros((len(lam), len(xi))),
                                     np.ones((len(lam), len(xi))),
                                     np.broadcast_to(c, (len(lam), len(xi))),
                                     np.broadcast_to(xi, (len(lam), len(xi))))
            out[:, inside] = up if deriv else u
        if np.any(~inside):
            xo = x[~inside]
            ua = self._u_at_support
            upa = self._up_at_support
            q = 2.0 * lam
            # decaying modes: anchor on sinh(kp (L - x)) as in _eigen_outside
            bound = (lam > 0.0) & (q * (self.L - a) ** 2 >= 1e-6)
            if np.any(bound):
                kp = np.sqrt(q[bound])[:, None]
                scale = (ua[bound] / np.sinh(kp[:, 0] * (self.L - a)))[:, None]
                arg = kp * (self.L - xo)[None, :]
                vals = -scale * kp * np.cosh(arg) if deriv else scale * np.sinh(arg)
                out[np.ix_(bound, ~inside)] = vals
            rest = ~bound
            if np.any(rest):
                ko, n = int(rest.sum()), len(xo)
                u, up = linear_propagate(
                    np.broadcast_to(ua[rest, None], (ko, n)),
                    np.broadcast_to(upa[rest, None], (ko, n)),
                    np.broadcast_to(q[rest, None], (ko, n)),
                    np.broadcast_to(xo - a, (ko, n)))
                out[np.ix_(rest, ~inside)] = up if deriv else u
        return (out[:, 0] if scalar else out)

    def v1(self, x):
        """Top eigenfunction normalized so that v1(1) = 1."""
        return self.mode_values(x)[0] / self.u1_at_1

    def v1_prime(self, x):
        return self.mode_derivs(x)[0] / self.u1_at_1

    def drift(self, x):
        """1-spine drift v1'(x)/v1(x) (normalization-free)."""
        m = self.mode_values(x)
        d = self.mode_derivs(x)
        return d[0] / m[0]

    @property
    def v1_norm_sq(self) -> float:
        """Norm of v1 in the v1(1)=1 normalization."""
        return float(self.norms_sq[0] / self.u1_at_1 ** 2)

    def v1_inf(self, x):
        """Pointwise limit of v1 (v1_inf(x) = e^{-beta (x-1)} for x >= 1)."""
        if self.v1_inf_vals is None:
            raise SpectralError("v1_inf requires a bound state (pushed regime)")
        x = np.asarray(x, float)
        inside = np.interp(x, self.v1_inf_grid, self.v1_inf_vals)
        tail = np.exp(-self.beta * (x - 1.0))
        return np.where(x <= 1.0, inside, tail)

    # -- harmonic pair -------------------------------------------------------

    def h(self, t, x):
        """Space-time harmonic h(t,x) = e^{(lam1_inf - lam1) t} e^{mu x} v1(x) / (c norm^2)."""
        self._require_fully_pushed()
        pref = 1.0 / (self.tilde_c * self.v1_norm_sq)
        return pref * np.exp((self.lambda1_inf - self.lambda1) * np.asarray(t, float)) \
            * np.exp(self.mu * np.asarray(x, float)) * self.v1(x)

    def h_tilde(self, t, x):
        self._require_fully_pushed()
        return self.tilde_c * np.exp((self.lambda1 - self.lambda1_inf) * np.asarray(t, float)) \
            * np.exp(-self.mu * np.asarray(x, float)) * self.v1(x)

    def h_inf(self, x):
        self._require_fully_pushed()
        return np.exp(self.mu * np.asarray(x, float)) * self.v1_inf(x) \
            / (self.tilde_c * self.norm_v1_inf_sq)

    def h_tilde_inf(self, x):
        self._require_fully_pushed()
        return self.tilde_c * np.exp(-self.mu * np.asarray(x, float)) * self.v1_inf(x)

    def pi_density(self, x):
        """Invariant density of the 1-spine: (v1 / ||v1||)^2."""
        v = self.v1(x)
        return v * v / self.v1_norm_sq

    def pi_inf_density(self, x):
        self._require_fully_pushed()
        v = self.v1_inf(x)
        return v * v / self.norm_v1_inf_sq

    def L_of_N(self, N: float, grid_dx: float = 1e-2) -> float:
        """Cutoff L(N) = log(N)/(mu - beta), rounded up to the grid."""
        self._require_fully_pushed()
        raw = math.log(N) / (self.mu - self.beta)
        return math.ceil(raw / grid_dx) * grid_dx

    def kolmogorov_limit(self, t: float, x) -> float:
        """N P_x(Z_tN > 0) -> 2 h_inf(x) / (Sigma^2 t)."""
        self._require_fully_pushed()
        return 2.0 * self.h_inf(x) / (self.Sigma2 * t)

    def _require_fully_pushed(self):
        if self.regime != FULLY_PUSHED:
            raise SpectralError(
                "Sigma^2 divergent in this regime (integrand tail ~ e^{(mu-3beta)x}); "
                f"regime is {self.regime}")

    # -- quadrature helper ----------------------------------------------------

    def quad_grid(self, f_vals) -> float:
        """Composite Simpson over the stored grid."""
        return float(simpson(f_vals, x=self.grid))


def _v1_inf_data(pot: Potential, lam_inf: float, step: float = 1e-3):
    """Tabulate v1_inf on [0, 1] (v1_inf(1) = 1) and its squared L2 norm."""
    a = pot.support_right
    gi = _inner_grid(pot, step)
    u, up = _shoot_inside(pot, lam_inf, gi, step)
    if a < 1.0:
        n_ext = _even_count(int(math.ceil((1.0 - a) / step)))
        ge = np.linspace(a, 1.0, n_ext + 1)
        ue, _ = linear_propagate(np.full_like(ge, u[-1]), np.full_like(ge, up[-1]),
                                 np.full_like(ge, 2.0 * lam_inf), ge - a)
        grid = np.concatenate([gi, ge[1:]])
        vals = np.concatenate([u, ue[1:]])
    else:
        grid, vals = gi, u
    vals = vals / vals[-1]          # v1_inf(1) = 1
    beta = math.sqrt(2.0 * lam_inf)
    norm_sq = float(simpson(vals ** 2, x=grid)) + 1.0 / (2.0 * beta)
    return grid, vals, norm_sq


def solve_spectrum(pot: Potential, L: float, t_min: float = DEFAULT_T_MIN,
                   kmax: int | None = None, step: float = 1e-3,
                   outer_dx: float = 1e-2) -> SpectralData:
    """Solve the full spectral problem on [0, L].

    The series is truncated at the first mode with
    exp((lambda_M - lambda_1) * t_min) <= 1e-12, so heat-kernel evaluations
    at t >= t_min are converged to that tolerance.
    """
    lam_inf = limit_top_eigenvalue(pot, step=step, cross_validate=False)
    regime, mu, beta, alpha = classify_regime(lam_inf)

    if kmax is None:
        lam_floor = pot.sup_w / 2.0 - SERIES_DROP / t_min
        kmax = int(math.ceil(L * math.sqrt(-2.0 * lam_floor) / PI)) + 2

    lams = eigenvalues_batch(pot, L, kmax, step=step)
    keep = lams >= lams[0] - SERIES_DROP / t_min - 1e-9
    lams = lams[keep]
    M = len(lams)

    a = pot.support_right
    # refine both tabulation grids until the deepest retained mode is
    # resolved, otherwise sign counts and Simpson norms alias
    gi = _inner_grid(pot, _resolved_dx(step, lams[-1], shift=pot.sup_w))
    n_out = _even_count(int(math.ceil((L - a) / _resolved_dx(outer_dx, lams[-1]))))
    go = np.linspace(a, L, n_out + 1)
    grid = np.concatenate([gi, go[1:]])

    efuncs = np.empty((M, len(grid)))
    ederivs = np.empty((M, len(grid)))
    u_at_a = np.empty(M)
    up_at_a = np.empty(M)
    exact_norms = pot.kind in ("step", "zero")
    norms_sq = np.empty(M)
    for j, lam in enumerate(lams):
        u_in, up_in = _shoot_inside(pot, lam, gi, step)
        u_out, up_out = _eigen_outside(lam, L, a, u_in[-1], up_in[-1], go)
        efuncs[j] = np.concatenate([u_in, u_out[1:]])
        ederivs[j] = np.concatenate([up_in, up_out[1:]])
        efuncs[j, -1] = 0.0   # Dirichlet condition holds exactly
        u_at_a[j] = u_in[-1]
        up_at_a[j] = up_in[-1]
        if exact_norms:
            norms_sq[j] = _exact_norm_sq(pot, lam, L,
                                         float(u_in[-1]), float(up_in[-1]))

    if not exact_norms:
        norms_sq = simpson(efuncs ** 2, x=grid, axis=1)
    K = int(np.sum(lams > 0.0))

    # zero-count sanity on the tabulated grid
    for j in range(M):
        nz = int(np.sum(efuncs[j, 1:-2] * efuncs[j, 2:-1] < 0.0))
        if nz != j:
            raise SpectralError(
                f"eigenfunction {j + 1} shows {nz} interior zeros (expected {j})")

    # u1(1) for the exposed v1(1) = 1 normalization
    if a < 1.0:
        u1_1, _ = linear_propagate(u_at_a[0], up_at_a[0], 2.0 * lams[0], 1.0 - a)
        u1_1 = float(u1_1)
    else:
        u1_1 = float(u_at_a[0])

    sd = SpectralData(potential=pot, L=float(L), t_min=float(t_min),
                      eigenvalues=lams, grid=grid, efuncs=efuncs,
                      ederivs=ederivs, norms_sq=np.asarray(norms_sq),
                      K=K, lambda1_inf=lam_inf, mu=mu, beta=beta, alpha=alpha,
                      regime=regime, u1_at_1=u1_1)
    sd._u_at_support = u_at_a
    sd._up_at_support = up_at_a

    if regime == FULLY_PUSHED:
        g_inf, v_inf, norm_inf = _v1_inf_data(pot, lam_inf, step)
        sd.v1_inf_grid = g_inf
        sd.v1_inf_vals = v_inf
        sd.norm_v1_inf_sq = norm_inf
        # tilde_c = 1 / int_0^inf e^{-mu x} v1_inf, analytic tail on [1, inf)
        inner = float(simpson(np.exp(-mu * g_inf) * v_inf, x=g_inf))
        tail = math.exp(-mu) / (mu + beta)
        sd.tilde_c = 1.0 / (inner + tail)
        # Sigma^2 = 2 int r (h_inf)^2 h_tilde_inf, tail in closed form
        coef = 1.0 / (sd.tilde_c * norm_inf ** 2)
        wi = pot.w(g_inf)
        integrand = 0.5 * (1.0 + wi) * np.exp(mu * g_inf) * v_inf ** 3
        inner2 = float(simpson(integrand, x=g_inf))
        tail2 = 0.5 * math.exp(mu) / (3.0 * beta - mu)
        sd.Sigma2 = 2.0 * coef * (inner2 + tail2)
    return sd


# ---------------------------------------------------------------------------
# Step-potential residual check (negative spectrum)


def negative_spectrum_residual(lam: float, L: float, height: float = 10.0) -> float:
    """Residual of the transcendental matching equation for the negative
    spectrum of the step potential W = height * 1_[0,1]:

        tan(sqrt(height - 2 lam)) / sqrt(height - 2 lam)
            + tan(sqrt(-2 lam) (L - 1)) / sqrt(-2 lam) = 0.

    Only defined for lam < 0; raises on lam >= 0.
    """
    if lam >= 0.0:
        raise ValueError("matching equation only defined for negative eigenvalues")
    qi = math.sqrt(height - 2.0 * lam)
    qo = math.sqrt(-2.0 * lam)
    return math.tan(qi) / qi + math.tan(qo * (L - 1.0)) / qo


def verify_negative_spectrum_example(L: float, height: float = 10.0,
                                     n_eigen: int | None = None,
                                     pole_guard: float = 0.05) -> dict:
    """Check computed negative eigenvalues of the step potential against the
    closed transcendental equation; returns a residual report."""
    pot = Potential.step(height)
    if n_eigen is None:
        n_eigen = int(math.ceil(L * math.sqrt(2.0 * (height / 2.0 + 60.0)) / PI))
    lams = eigenvalues_batch(pot, L, n_eigen)
    neg = lams[lams < 0.0]
    rows = []
    for lam in neg:
        qi = math.sqrt(height - 2.0 * lam)
        qo = math.sqrt(-2.0 * lam) * (L - 1.0)
        near_pole = (abs(math.cos(qi)) < pole_guard) or (abs(math.cos(qo)) < pole_guard)
        res = negative_spectrum_residual(float(lam), L, height)
        rows.append({"lambda": float(lam), "residual": float(res),
                     "near_pole": bool(near_pole)})
    clean = [abs(r["residual"]) for r in rows if not r["near_pole"]]
    return {
        "L": L,
        "height": height,
        "n_negative": len(neg),
        "rows": rows,
        "max_residual_away_from_poles": max(clean) if clean else float("nan"),
    }
