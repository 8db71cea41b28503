"""Marked Brownian coalescent point process (CPP) and its moments.

The depth-T CPP is a Poisson point process with intensity dt/t^2 x dy
on (0, T) x R_+: the population is the interval [0, Y_T], where Y_T is
the first y carrying a point of height >= T (an Exp(mean T) variable),
and the genealogical distance between two individuals is the largest
point height strictly between them.  Truncating point heights below
t_floor leaves any k-sample genealogy untouched as long as all pairwise
distances stay above t_floor, which is enforced by resampling.

Finite sample marginals come in closed form through a mixing variable
theta with density k theta^(k-1) / (1+theta)^(k+1): given theta, the
k-1 sequential coalescence times are i.i.d. with distribution function
(1+theta) s / (t + theta s) on [0, t], the pairwise matrix is the
interval maximum, and a uniform relabeling restores exchangeability.
Leaf marks are i.i.d. from the stationary front profile h_tilde_inf.
"""

import math
from dataclasses import dataclass

import numpy as np
from scipy.integrate import simpson

from .kspine import umatrix_from_times

_MAX_ATOMS = 5_000_000
_MAX_RESAMPLES = 200


class CppError(RuntimeError):
    """Raised when CPP sampling cannot honor its guarantees."""


# ---------------------------------------------------------------------------
# continuum object


@dataclass
class CPPSample:
    """One realization of the truncated CPP.

    atoms are sorted by position; atom_t[i] is the height of the i-th
    barrier.  mark_sampler(n, rng) draws leaf marks (None leaves marks
    NaN)."""

    T: float
    t_floor: float
    y_total: float
    atom_y: np.ndarray
    atom_t: np.ndarray
    mark_sampler: object = None

    def distance(self, ya: float, yb: float) -> float:
        """Largest barrier strictly between the two positions; 0.0 when
        none remains above the truncation floor."""
        if ya > yb:
            ya, yb = yb, ya
        lo = int(np.searchsorted(self.atom_y, ya, side="right"))
        hi = int(np.searchsorted(self.atom_y, yb, side="right"))
        if hi <= lo:
            return 0.0
        return float(self.atom_t[lo:hi].max())

    def sample_leaves(self, k: int, rng):
        """k uniform individuals: (positions, k x k distances, marks).

        Positions are resampled while some pair is separated only below
        the truncation floor (the untruncated process would place a
        point of height < t_floor between them, so the stored atoms
        cannot resolve that pair).  A realization with fewer than k - 1
        atoms can never separate k leaves; that raises immediately so
        the caller can redraw the realization (see sample_cpp_leaves)."""
        if len(self.atom_y) < k - 1:
            raise CppError(
                f"realization holds {len(self.atom_y)} atoms above the "
                f"floor, too few to separate {k} leaves")
        for _ in range(_MAX_RESAMPLES):
            ys = np.sort(rng.uniform(0.0, self.y_total, size=k))
            d = np.zeros((k, k))
            ok = True
            for i in range(k):
                for j in range(i + 1, k):
                    dij = self.distance(ys[i], ys[j])
                    if dij < self.t_floor:
                        ok = False
                        break
                    d[i, j] = d[j, i] = dij
                if not ok:
                    break
            if ok:
                if self.mark_sampler is not None:
                    marks = np.asarray(self.mark_sampler(k, rng), float)
                else:
                    marks = np.full(k, np.nan)
                return ys, d, marks
        raise CppError(
            "leaf pairs kept coalescing below t_floor; lower t_floor")


def sample_cpp(T: float, t_floor: float | None = None, mark_sampler=None,
               rng=None) -> CPPSample:
    """Sample the truncated depth-T CPP.

    Heights >= T arrive at rate 1/T per unit length, so Y_T ~ Exp(mean
    T); below T the heights on [t_floor, T) arrive at rate
    1/t_floor - 1/T with density proportional to dt/t^2."""
    if rng is None:
        rng = np.random.default_rng()
    if t_floor is None:
        t_floor = 1e-4 * T
    if not (0.0 < t_floor < T):
        raise ValueError("need 0 < t_floor < T")
    y_total = rng.exponential(T)
    rate = 1.0 / t_floor - 1.0 / T
    mean_atoms = y_total * rate
    if mean_atoms > _MAX_ATOMS:
        raise CppError(
            f"t_floor {t_floor:g} implies about {mean_atoms:.3g} atoms "
            f"(cap {_MAX_ATOMS}); raise t_floor")
    n = int(rng.poisson(mean_atoms))
    ys = np.sort(rng.uniform(0.0, y_total, size=n))
    u = rng.uniform(size=n)
    ts = 1.0 / (1.0 / t_floor - u * rate)
    return CPPSample(T=float(T), t_floor=float(t_floor),
                     y_total=float(y_total), atom_y=ys, atom_t=ts,
                     mark_sampler=mark_sampler)


def sample_cpp_leaves(T: float, k: int, rng, t_floor: float | None = None,
                      mark_sampler=None, max_realizations: int = 50):
    """Fresh realization plus a k-leaf uniform sample from it.

    Realizations whose leaves cannot be separated above the truncation
    floor are redrawn, which conditions the law on an event of
    probability O(t_floor / T); the t_floor consistency test bounds the
    effect.  Returns (CPPSample, positions, distance matrix, marks)."""
    for _ in range(max_realizations):
        cpp = sample_cpp(T, t_floor=t_floor, mark_sampler=mark_sampler,
                         rng=rng)
        try:
            ys, d, marks = cpp.sample_leaves(k, rng)
        except CppError:
            continue
        return cpp, ys, d, marks
    raise CppError(
        f"no realization separated {k} leaves above the floor in "
        f"{max_realizations} attempts")


# ---------------------------------------------------------------------------
# finite-dimensional marginals


@dataclass
class HMatrix:
    """Exchangeable k-sample CPP genealogy: mixing draw theta, pairwise
    coalescence times (relabeled by the stored permutation) and marks."""

    k: int
    theta: float
    distances: np.ndarray
    marks: np.ndarray
    permutation: np.ndarray


def theta_density(theta, k: int):
    """Mixing density k theta^(k-1) / (1+theta)^(k+1) on (0, inf)."""
    th = np.asarray(theta, float)
    return k * th ** (k - 1) / (1.0 + th) ** (k + 1)


def sample_theta(k: int, rng) -> float:
    """theta = u/(1-u) with u = V^(1/k): inverse-CDF of theta_density."""
    u = rng.uniform() ** (1.0 / k)
    return u / (1.0 - u)


def u_theta_cdf(s, t: float, theta: float):
    """P(U^theta <= s) = (1+theta) p / (1 + theta p), p = s/t."""
    p = np.asarray(s, float) / t
    return (1.0 + theta) * p / (1.0 + theta * p)


def sample_u_theta(theta: float, t: float, n: int, rng):
    """Inverse CDF: U = t V / (1 + theta (1 - V))."""
    v = rng.uniform(size=n)
    return t * v / (1.0 + theta * (1.0 - v))


def pair_distance_cdf(s, t: float):
    """P(H_{1,2} <= s): distance law of two uniformly sampled leaves.

    Mixing the conditional CDF (1+theta)p/(1+theta p) over the k = 2
    theta-density gives, with p = s/t,

        F(s) = 2 p [ -ln(p) / (1-p)^2 - 1 / (1-p) ],

    continued through p = 1 by its series 2p [1/2 + e/3 + e^2/4 + ...]
    in e = 1 - p.  F(t/2) = 4 ln 2 - 2.
    """
    if not (t > 0.0):
        raise ValueError("t must be positive")
    p = np.clip(np.asarray(s, float) / t, 0.0, 1.0)
    eps = 1.0 - p
    near = eps < 1e-3
    pn = np.where(near | (p == 0.0), 0.5, p)
    en = np.where(near, eps, 0.5)
    exact = 2.0 * pn * (-np.log(pn) / (1.0 - pn) ** 2 - 1.0 / (1.0 - pn))
    series = 2.0 * p * (0.5 + en / 3.0 + en ** 2 / 4.0 + en ** 3 / 5.0
                        + en ** 4 / 6.0)
    out = np.where(near, series, np.where(p == 0.0, 0.0, exact))
    return out if out.ndim else float(out)


def sample_H(k: int, t: float, rng, mark_sampler=None) -> HMatrix:
    """Exact k-sample genealogy of the depth-t CPP."""
    if k < 2:
        raise ValueError("k must be at least 2")
    theta = sample_theta(k, rng)
    us = sample_u_theta(theta, t, k - 1, rng)
    u_mat = umatrix_from_times(us, k)
    sigma = rng.permutation(k)
    d = u_mat[np.ix_(sigma, sigma)]
    if mark_sampler is not None:
        marks = np.asarray(mark_sampler(k, rng), float)
    else:
        marks = np.full(k, np.nan)
    return HMatrix(k=k, theta=float(theta), distances=d, marks=marks,
                   permutation=sigma)


# ---------------------------------------------------------------------------
# marks


def h_tilde_inf_sampler(sd, grid_points: int = 4000):
    """Inverse-CDF sampler for the front-profile mark density
    h_tilde_inf, with the analytic exponential tail rate mu + beta on
    [1, inf).  Returns sampler(n, rng) -> array."""
    xs = np.linspace(0.0, 1.0, grid_points)
    dens = sd.h_tilde_inf(xs)
    cdf = np.concatenate([[0.0], np.cumsum(
        0.5 * (dens[1:] + dens[:-1]) * np.diff(xs))])
    rate = sd.mu + sd.beta
    tail_mass = float(sd.h_tilde_inf(1.0)) / rate
    total = cdf[-1] + tail_mass
    # h_tilde_inf integrates to 1 by construction; renormalize the
    # quadrature residue so the sampler is exact
    inner_mass = cdf[-1] / total

    def sampler(n, rng):
        u = rng.uniform(size=n)
        out = np.empty(n)
        inner = u < inner_mass
        out[inner] = np.interp(u[inner] / inner_mass * cdf[-1], cdf, xs)
        w = (u[~inner] - inner_mass) / (1.0 - inner_mass)
        out[~inner] = 1.0 - np.log1p(-w) / rate
        return out

    return sampler


def h_tilde_inf_mean(sd, x_max: float = 60.0):
    """E[mark] = int y h_tilde_inf(y) dy with analytic tail."""
    xs = np.linspace(0.0, 1.0, 4000)
    inner = float(simpson(xs * sd.h_tilde_inf(xs), x=xs))
    rate = sd.mu + sd.beta
    # int_1^inf y c e^{-rate (y-1)} dy with c = h_tilde_inf(1)
    c = float(sd.h_tilde_inf(1.0))
    tail = c * (1.0 / rate + 1.0 / rate ** 2)
    return inner + tail


# ---------------------------------------------------------------------------
# moments


def _pair_fn_table(psi_fns, k):
    n_pairs = k * (k - 1) // 2
    if psi_fns is None or callable(psi_fns):
        return [psi_fns] * n_pairs
    fns = list(psi_fns)
    if len(fns) != n_pairs:
        raise ValueError(f"need {n_pairs} pair functions")
    return fns


def _psi_product(dmat, pair_fns, k):
    g = 1.0
    idx = 0
    for i in range(k):
        for j in range(i + 1, k):
            fn = pair_fns[idx]
            idx += 1
            if fn is not None:
                g *= float(fn(dmat[i, j]))
    return g


def _mark_factor(phi, mark_density, mark_mass, support):
    if phi is None:
        return mark_mass
    if mark_density is None:
        raise ValueError("phi given but no mark density to integrate against")
    from scipy.integrate import quad
    lo, hi = support
    hi = min(hi, 60.0)
    # the front profile has a kink where its potential support ends
    pts = [p for p in (1.0,) if lo < p < hi]
    val, _ = quad(lambda y: phi(y) * mark_density(y), lo, hi,
                  points=pts or None, limit=200)
    return val


def cpp_moment(k: int, T: float, psi_fns=None, phi_fns=None,
               mark_density=None, mark_mass: float = 1.0,
               mark_support=(0.0, np.inf), rng=None, n_mc: int = 200_000,
               quad_points: int | None = None, method: str = "auto"):
    """Factorial-moment density of the marked CPP:

        k! T^k E[ prod_{i<j} psi(U_{sigma_i, sigma_j}) ]
             * prod_i int phi_i dm,

    where U_1 .. U_{k-1} are i.i.d. uniform on [0, T] and U_{i,j} is
    the interval maximum.  Note the distinction from sample_H: the
    moment measure weights realizations by their mass, so the pair
    law appearing here is the plain uniform, not the mixing law of a
    uniformly sampled pair.  psi functions must accept arrays.

    The U-expectation is computed by fine composite quadrature for
    k = 2, tensor Gauss-Legendre for k in {3, 4}, and Monte Carlo
    beyond; method forces one path ("quad" / "mc") for
    cross-validation.  Returns (value, standard_error), the latter 0
    for quadrature.
    """
    if k < 1:
        raise ValueError("k must be at least 1")
    if method not in ("auto", "quad", "mc"):
        raise ValueError("method must be auto, quad or mc")
    if method == "quad" and k > 4:
        raise ValueError("tensor quadrature only supports k <= 4")
    if phi_fns is None:
        phi_fns = [None] * k
    if len(phi_fns) != k:
        raise ValueError("phi_fns must have one entry per leaf")
    mark_prod = 1.0
    for phi in phi_fns:
        mark_prod *= _mark_factor(phi, mark_density, mark_mass, mark_support)
    pref = math.factorial(k) * T ** k * mark_prod

    pair_fns = _pair_fn_table(psi_fns, k)
    if all(fn is None for fn in pair_fns) or k == 1:
        return pref, 0.0

    common = psi_fns is None or callable(psi_fns)
    if k <= 4 and method != "mc":
        if k == 2:
            # one split time; a fine Simpson grid keeps indicator test
            # functions accurate to the grid spacing
            n = quad_points or 2 ** 18 + 1
            us = np.linspace(0.0, T, n)
            vals = np.asarray(pair_fns[0](us), float)
            est = float(simpson(vals, x=us)) / T
            return pref * est, 0.0
        if quad_points is None:
            quad_points = {3: 512, 4: 96}[k]
        nodes, weights = np.polynomial.legendre.leggauss(quad_points)
        nodes = 0.5 * T * (nodes + 1.0)
        weights = 0.5 * weights  # sums to 1 per dimension
        d = k - 1
        grids = np.meshgrid(*([nodes] * d), indexing="ij")
        wgts = np.ones_like(grids[0])
        for g in np.meshgrid(*([weights] * d), indexing="ij"):
            wgts = wgts * g
        us = np.stack([g.ravel() for g in grids])
        import itertools
        # a common psi is invariant under relabeling, so the
        # permutation average only matters for pair-dependent lists
        sigmas = ([tuple(range(k))] if common
                  else list(itertools.permutations(range(k))))
        total = np.zeros(us.shape[1])
        for sigma in sigmas:
            g = np.ones(us.shape[1])
            idx = 0
            for i in range(k):
                for j in range(i + 1, k):
                    fn = pair_fns[idx]
                    idx += 1
                    if fn is None:
                        continue
                    a, b = sorted((sigma[i], sigma[j]))
                    # U_{a,b} = max of sequential times a..b-1
                    dab = us[a]
                    for m in range(a + 1, b):
                        dab = np.maximum(dab, us[m])
                    g = g * np.asarray(fn(dab), float)
            total += g
        est = float((total / len(sigmas) * wgts.ravel()).sum())
        return pref * est, 0.0

    if rng is None:
        rng = np.random.default_rng(0)
    vals = np.empty(n_mc)
    for i in range(n_mc):
        us = rng.uniform(0.0, T, size=k - 1)
        dmat = umatrix_from_times(us, k)
        if not common:
            sigma = rng.permutation(k)
            dmat = dmat[np.ix_(sigma, sigma)]
        vals[i] = _psi_product(dmat, pair_fns, k)
    mean = float(vals.mean())
    se = float(vals.std(ddof=1) / math.sqrt(n_mc))
    return pref * mean, pref * se
