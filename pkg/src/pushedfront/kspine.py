"""k-spine importance sampling of genealogy moments.

A k-spine tree is a planar ultrametric binary tree of depth t built
from k-1 i.i.d. uniform branch times: the pairwise coalescence time of
leaves i < j is max{U_i, ..., U_{j-1}}, and the tree splits recursively
at the argmax.  Marks evolve along branches by the single-spine
diffusion, whose transition density q_s is sampled exactly by inverse
CDF of the spectral kernel for s >= t_min and by Euler-Maruyama with
drift v1'/v1 for shorter stretches.  Weighting a sampled tree by

    delta = prod_{branch v} r(zeta_v) h(|v|, zeta_v)
            * prod_{leaf} 1 / h(t, zeta_leaf)

turns spine averages into genealogy moments of the particle system
(many-to-few).  The accelerated variant runs every branch at speed N
inside the kernel while keeping tree times on the [0, t] scale.
"""

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .spectral import SpectralData

_Q_GRID_POINTS = 2000
_EM_DT = 1e-3
_EM_MAX_HALVINGS = 40


class SpineError(RuntimeError):
    """Raised when spine sampling cannot proceed."""


@dataclass
class SpineTree:
    """One sampled k-spine: branch times, coalescence matrix and marks.

    node_times[i] is the absolute time of the i-th branch point (in the
    order the recursion created them, root first) and node_marks[i] its
    spatial mark; leaf_marks are the k endpoint marks at depth t.
    accelerate_N = 1 means the plain (unaccelerated) spine.
    """

    k: int
    depth: float
    x0: float
    branch_times: np.ndarray
    umatrix: np.ndarray
    node_times: np.ndarray
    node_marks: np.ndarray
    leaf_marks: np.ndarray
    accelerate_N: float


# cached sampling grid per spectral data set: (ys, mode matrix, v1 row)
_GRID_CACHE = {}

# repeated (duration, start) transitions reuse their inverse-CDF table;
# k = 1 and the root edge of replicated trees hit this constantly
_CDF_CACHE = {}
_CDF_CACHE_MAX = 64


def _sampling_grid(sd: SpectralData):
    key = id(sd)
    hit = _GRID_CACHE.get(key)
    if hit is not None and hit[0] is sd:
        return hit[1]
    ys = np.linspace(0.0, sd.L, _Q_GRID_POINTS)
    vy = sd.mode_values(ys)
    data = (ys, vy, vy[0])
    _GRID_CACHE[key] = (sd, data)
    return data


def _sample_q_exact(sd, s, x, rng):
    """Inverse-CDF draw from the spine kernel q_s(x, .)."""
    key = (id(sd), float(s), float(x))
    hit = _CDF_CACHE.get(key)
    if hit is not None and hit[0] is sd:
        _, ys, cdf, total = hit
        return float(np.interp(rng.uniform() * total, cdf, ys))
    ys, vy, v1y = _sampling_grid(sd)
    vx = sd.mode_values(x)
    wx = np.exp((sd.eigenvalues - sd.lambda1) * s) * vx / sd.norms_sq
    q = np.maximum((wx @ vy) * v1y / vx[0], 0.0)
    dy = ys[1] - ys[0]
    cdf = np.empty(len(ys))
    cdf[0] = 0.0
    np.cumsum(0.5 * dy * (q[1:] + q[:-1]), out=cdf[1:])
    total = cdf[-1]
    if not (total > 0.0) or not np.isfinite(total):
        raise SpineError(f"degenerate spine kernel at duration {s}")
    if len(_CDF_CACHE) >= _CDF_CACHE_MAX:
        _CDF_CACHE.pop(next(iter(_CDF_CACHE)))
    _CDF_CACHE[key] = (sd, ys, cdf, total)
    return float(np.interp(rng.uniform() * total, cdf, ys))


def _sample_q_euler(sd, s, x, rng):
    """Euler-Maruyama for durations below the kernel's series horizon.
    A step that leaves (0, L) restarts the whole segment with half the
    step size."""
    dt0 = _EM_DT
    for _ in range(_EM_MAX_HALVINGS):
        n = max(1, int(math.ceil(s / dt0)))
        dt = s / n
        sdt = math.sqrt(dt)
        y = x
        ok = True
        for _ in range(n):
            y = y + float(sd.drift(y)) * dt + sdt * rng.standard_normal()
            if not (0.0 < y < sd.L):
                ok = False
                break
        if ok:
            return y
        dt0 *= 0.5
    raise SpineError("spine Euler segment kept escaping (0, L)")


def _transition(sd, duration, x, rng, accelerate_N):
    s = duration * accelerate_N
    if s <= 0.0:
        return x
    if s >= sd.t_min:
        return _sample_q_exact(sd, s, x, rng)
    return _sample_q_euler(sd, s, x, rng)


def umatrix_from_times(us, k):
    """U_{i,j} = max{U_i, ..., U_{j-1}} for i < j."""
    u = np.zeros((k, k))
    for i in range(k):
        for j in range(i + 1, k):
            m = float(np.max(us[i:j]))
            u[i, j] = u[j, i] = m
    return u


def sample_kspine(sd: SpectralData, k: int, t: float, x0: float, rng,
                  accelerate_N: float = 1.0) -> SpineTree:
    """Sample branch times, tree shape and marks of a k-spine of depth t."""
    if k < 1:
        raise ValueError("k must be at least 1")
    if not (t > 0.0):
        raise ValueError("t must be positive")
    if not (0.0 < x0 < sd.L):
        raise ValueError("x0 must lie in (0, L)")
    if accelerate_N < 1.0:
        raise ValueError("accelerate_N must be >= 1")
    us = rng.uniform(0.0, t, size=k - 1)
    node_times = []
    node_marks = []
    leaves = np.empty(k)

    def grow(x, t_from, lo, hi):
        # leaves lo..hi with internal times us[lo..hi-1]
        if lo == hi:
            leaves[lo] = _transition(sd, t - t_from, x, rng, accelerate_N)
            return
        m = lo + int(np.argmax(us[lo:hi]))   # first index wins exact ties
        tb = t - us[m]
        xb = _transition(sd, tb - t_from, x, rng, accelerate_N)
        node_times.append(tb)
        node_marks.append(xb)
        grow(xb, tb, lo, m)
        grow(xb, tb, m + 1, hi)

    grow(x0, 0.0, 0, k - 1)
    return SpineTree(k=k, depth=t, x0=x0, branch_times=us,
                     umatrix=umatrix_from_times(us, k),
                     node_times=np.array(node_times),
                     node_marks=np.array(node_marks),
                     leaf_marks=leaves, accelerate_N=float(accelerate_N))


def spine_weight(tree: SpineTree, sd: SpectralData, N: float | None = None) -> float:
    """Bias weight of the sampled tree: the product of r(zeta) h(|v| N,
    zeta) over branch points divided by h(t N, zeta) at every leaf."""
    if N is None:
        N = tree.accelerate_N
    w = 1.0
    for tb, xb in zip(tree.node_times, tree.node_marks):
        w *= float(sd.potential.r(xb)) * sd.h(tb * N, xb)
    for xl in tree.leaf_marks:
        w /= sd.h(tree.depth * N, xl)
    return w


def _fisher_yates(k, rng):
    sigma = np.arange(k)
    for i in range(k - 1, 0, -1):
        j = int(rng.integers(0, i + 1))
        sigma[i], sigma[j] = sigma[j], sigma[i]
    return sigma


def _pair_psis(psi_fns, k):
    n_pairs = k * (k - 1) // 2
    if psi_fns is None or callable(psi_fns):
        return [psi_fns] * n_pairs
    fns = list(psi_fns)
    if len(fns) != n_pairs:
        raise ValueError(f"need {n_pairs} pair functions, got {len(fns)}")
    return fns


def ess_report(weights):
    """(effective sample size, share of the sum carried by the top 1%)."""
    w = np.abs(np.asarray(weights, float))
    tot = w.sum()
    if tot <= 0:
        return 0.0, 0.0
    ess = tot * tot / float((w * w).sum())
    n_top = max(1, int(math.ceil(0.01 * len(w))))
    top_share = float(np.sort(w)[-n_top:].sum() / tot)
    return float(ess), top_share


def many_to_few_estimate(sd: SpectralData, k: int, t: float, x0: float,
                         psi_fns=None, phi_fns=None, replicas: int = 1000,
                         N: float = 1.0, seed: int = 0):
    """Monte Carlo genealogy moment

        (1/N) k! h(0, x0) t^(k-1)
            E[ delta * prod_{i<j} psi(U_{sigma_i, sigma_j})
                     * prod_i phi_i(zeta_{sigma_i}) ],

    estimated over independent spine replicas with a fresh uniform
    relabeling sigma per replica.  Returns (estimate, standard error)
    and warns when the top 1% of weights carries more than half of the
    total (tiny effective sample size).
    """
    if replicas < 100:
        raise ValueError("need at least 100 replicas")
    pair_fns = _pair_psis(psi_fns, k)
    if phi_fns is None:
        phi_fns = [None] * k
    if len(phi_fns) != k:
        raise ValueError("phi_fns must have one entry per leaf")
    pref = math.factorial(k) * sd.h(0.0, x0) * t ** (k - 1) / N
    streams = np.random.SeedSequence(seed).spawn(replicas)
    contribs = np.empty(replicas)
    weights = np.empty(replicas)
    for irep in range(replicas):
        rng = np.random.default_rng(streams[irep])
        tree = sample_kspine(sd, k, t, x0, rng, accelerate_N=N)
        sigma = _fisher_yates(k, rng)
        w = spine_weight(tree, sd, N)
        g = 1.0
        idx = 0
        for i in range(k):
            for j in range(i + 1, k):
                fn = pair_fns[idx]
                idx += 1
                if fn is not None:
                    g *= float(fn(tree.umatrix[sigma[i], sigma[j]]))
        for i in range(k):
            if phi_fns[i] is not None:
                g *= float(phi_fns[i](tree.leaf_marks[sigma[i]]))
        weights[irep] = w
        contribs[irep] = pref * w * g
    est = float(contribs.mean())
    se = float(contribs.std(ddof=1) / math.sqrt(replicas))
    ess, top_share = ess_report(weights)
    if top_share > 0.5:
        warnings.warn(
            f"heavy-tailed spine weights: top 1% carries "
            f"{100 * top_share:.1f}% of the sum (ESS {ess:.1f} of {replicas})",
            RuntimeWarning)
    return est, se
