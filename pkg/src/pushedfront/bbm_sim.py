"""Forward simulation of the branching diffusion with full genealogy.

Particles perform Brownian motion with drift -mu on (0, cutoff), branch
into two at space-dependent rate r(x) = (1 + W(x))/2, and are killed on
the boundary.  Branch times come from exponential thinning at the rate
ceiling r_max, so event times are exact; absorption inside a substep is
decided by the Brownian-bridge crossing probability exp(-2ab/dt) for
each boundary, which makes the path law exact up to the (exponentially
small) chance of touching both boundaries within one substep.

A simulation returns a GenealogyForest: flat arrays of parent links,
birth/death times, death causes and death positions, one planar bit per
node, plus first-crossing counters for the configured escape levels.
Runs are deterministic given (seed, replica): each node draws from its
own counter-based stream, so results are bit-identical regardless of
scheduling or buffer sizes.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import _engine
from .spectral import Potential

CAUSE_ALIVE = 0
CAUSE_ABSORBED0 = 1
CAUSE_ABSORBEDL = 2
CAUSE_BRANCHED = 3

CAUSE_NAMES = {
    CAUSE_ALIVE: "alive_at_horizon",
    CAUSE_ABSORBED0: "absorbed0",
    CAUSE_ABSORBEDL: "absorbedL",
    CAUSE_BRANCHED: "branched",
}

_EDGE_DT = 0.01       # substep ceiling within 0.5 of a boundary
_INITIAL_CAP = 4096   # starting node-buffer size; grows x8 on overflow


class SimulationError(RuntimeError):
    """Raised for invalid simulation configurations."""


@dataclass(frozen=True)
class SimConfig:
    """Parameters of one forward run.

    gamma_levels are fractions of the cutoff: a lineage is counted for
    level gamma the first time it reaches gamma*cutoff (descendants
    inherit the crossing flag, so each initial-particle lineage counts
    at most once per level).  A level with gamma = 1 is tallied exactly
    when the cutoff absorbs the particle, which makes the escape count
    and the absorbedL count coincide by construction.
    """

    potential: Potential
    mu: float
    horizon: float
    x0: float
    seed: int
    cutoff: float | None = None
    dt_max: float = 0.1
    max_particles: int = 1_000_000
    gamma_levels: tuple = ()

    def __post_init__(self):
        if not isinstance(self.potential, Potential):
            raise SimulationError("potential must be a Potential")
        if not (self.horizon > 0.0):
            raise SimulationError("horizon must be positive")
        if not (self.x0 > 0.0):
            raise SimulationError("x0 must be positive")
        if self.cutoff is not None and self.x0 >= self.cutoff:
            raise SimulationError("x0 must lie below the cutoff")
        if not (self.dt_max > 0.0):
            raise SimulationError("dt_max must be positive")
        if self.max_particles < 16:
            raise SimulationError("max_particles must be at least 16")
        if self.seed < 0 or self.seed > 2**64 - 1:
            raise SimulationError("seed must fit in a u64")
        if self.gamma_levels:
            if self.cutoff is None:
                raise SimulationError("gamma_levels require a cutoff")
            if len(self.gamma_levels) > 60:
                raise SimulationError("at most 60 escape levels")
            for g in self.gamma_levels:
                if not (0.0 < g <= 1.0):
                    raise SimulationError("escape levels need 0 < gamma <= 1")

    def engine_args(self):
        """Static (non-buffer) argument tuple for the compiled kernel."""
        pot = self.potential
        kind = {"zero": 0, "step": 1, "table": 2}[pot.kind]
        if pot.kind == "table":
            wxs = np.asarray(pot.xs, float)
            wvals = np.asarray(pot.ws, float)
        else:
            wxs = np.array([0.0, 1.0])
            wvals = np.array([0.0, 0.0])
        has_cut = self.cutoff is not None
        cut = float(self.cutoff) if has_cut else 1e300
        levels = np.array([g * cut for g in self.gamma_levels], float)
        lev_is_cut = np.array(
            [has_cut and abs(lv - cut) < 1e-12 * max(1.0, cut) for lv in levels],
            np.bool_)
        dt_bulk = float(self.dt_max)
        dt_edge = min(dt_bulk, _EDGE_DT)
        return (float(self.x0), float(self.horizon), float(self.mu),
                kind, float(pot.support_right), float(pot.height),
                wxs, wvals, float(pot.r_max),
                cut, has_cut, levels, lev_is_cut, dt_bulk, dt_edge)


@dataclass
class GenealogyForest:
    """Flat-array genealogy of one replica.

    Node 0 is the initial particle.  A branched node's two children sit
    at consecutive indices and inherit its death position as their birth
    position.  capped means the node budget ran out and the run was
    truncated; such runs must be excluded from estimators.
    """

    config: SimConfig
    replica: int
    parent: np.ndarray
    birth: np.ndarray
    death: np.ndarray
    cause: np.ndarray
    planar: np.ndarray
    x_death: np.ndarray
    escape_counts: np.ndarray
    capped: bool

    @property
    def n_nodes(self) -> int:
        return len(self.parent)

    def alive_mask(self, t=None):
        """Nodes whose lifetime covers t (default: alive at the horizon)."""
        if t is None:
            return self.cause == CAUSE_ALIVE
        t = float(t)
        open_int = (self.birth <= t) & (self.death > t)
        at_end = (self.cause == CAUSE_ALIVE) & (self.birth <= t) & (self.death == t)
        return open_int | at_end

    def alive_ids(self, t=None):
        return np.flatnonzero(self.alive_mask(t))

    @property
    def z_alive(self) -> int:
        return int(np.count_nonzero(self.cause == CAUSE_ALIVE))

    def positions_at_horizon(self):
        return self.x_death[self.cause == CAUSE_ALIVE]

    def escape_count(self, gamma: float) -> int:
        for g, c in zip(self.config.gamma_levels, self.escape_counts):
            if abs(g - gamma) < 1e-12:
                return int(c)
        raise KeyError(f"gamma {gamma} was not tracked")

    def lca_split_time(self, u: int, v: int) -> float:
        """Death time of the last common ancestor of nodes u and v."""
        if u == v:
            raise ValueError("nodes must differ")
        anc = set()
        i = u
        while i >= 0:
            anc.add(i)
            i = self.parent[i]
        i = v
        while i >= 0 and i not in anc:
            i = self.parent[i]
        if i < 0:
            raise ValueError("nodes share no ancestor")
        return float(self.death[i])

    def children_of(self):
        """(kid_a, kid_b) arrays, -1 where a node has no children."""
        n = self.n_nodes
        kid_a = np.full(n, -1, np.int64)
        kid_b = np.full(n, -1, np.int64)
        idx = np.arange(n - 1, 0, -1)
        kid_a[self.parent[idx]] = idx      # repeated writes: smallest child wins
        idx = np.arange(1, n)
        kid_b[self.parent[idx]] = idx      # largest child wins
        return kid_a, kid_b


def simulate(config: SimConfig, replica: int = 0,
             branching: bool = True) -> GenealogyForest:
    """Run one replica.  branching=False freezes the tree at a single
    particle (diffusion plus absorption only), which is test
    instrumentation rather than part of the model."""
    static = config.engine_args()
    nlev = len(config.gamma_levels)
    cap = min(config.max_particles, _INITIAL_CAP)
    while True:
        parent = np.empty(cap, np.int64)
        birth = np.empty(cap, np.float64)
        death = np.empty(cap, np.float64)
        cause = np.empty(cap, np.int8)
        planar = np.empty(cap, np.int8)
        x_death = np.empty(cap, np.float64)
        flags = np.empty(cap, np.int64)
        stack = np.empty(cap, np.int64)
        esc = np.zeros(nlev, np.int64)
        n, capped = _engine.run_replica(
            np.uint64(config.seed), np.uint64(replica), *static, branching,
            parent, birth, death, cause, planar, x_death, flags, stack, esc)
        if capped and cap < config.max_particles:
            cap = min(cap * 8, config.max_particles)
            continue
        return GenealogyForest(
            config=config, replica=replica,
            parent=parent[:n].copy(), birth=birth[:n].copy(),
            death=death[:n].copy(), cause=cause[:n].copy(),
            planar=planar[:n].copy(), x_death=x_death[:n].copy(),
            escape_counts=esc, capped=bool(capped))


@dataclass
class EnsembleStats:
    """Per-replica scalars from a batch of runs."""

    config: SimConfig
    replicas: np.ndarray        # replica indices actually run
    z: np.ndarray               # particles alive at the horizon
    escapes: np.ndarray         # (n, n_levels) first-crossing counts
    n_nodes: np.ndarray
    capped: np.ndarray          # bool; capped runs carry no estimate
    window_counts: np.ndarray | None = None
    forests: list = field(default_factory=list)

    @property
    def ok(self):
        return ~self.capped

    def survival(self):
        """(estimate, standard error) of P(Z_horizon > 0)."""
        alive = (self.z[self.ok] > 0).astype(float)
        m = len(alive)
        if m == 0:
            raise RuntimeError("no uncapped replicas")
        p = float(alive.mean())
        return p, math.sqrt(max(p * (1.0 - p), 1e-300) / m)


def simulate_ensemble(config: SimConfig, n_replicas: int,
                      replica_offset: int = 0, keep: str = "none",
                      window=None) -> EnsembleStats:
    """Run replicas replica_offset .. replica_offset+n_replicas-1.

    keep: "none" records scalars only, "survivors" also stores forests
    with at least one particle alive at the horizon, "all" stores every
    forest.  window=(lo, hi) additionally counts horizon survivors with
    position in [lo, hi).
    """
    if keep not in ("none", "survivors", "all"):
        raise ValueError("keep must be none, survivors or all")
    nlev = len(config.gamma_levels)
    z = np.zeros(n_replicas, np.int64)
    esc = np.zeros((n_replicas, nlev), np.int64)
    nn = np.zeros(n_replicas, np.int64)
    capped = np.zeros(n_replicas, np.bool_)
    wcount = np.zeros(n_replicas, np.int64) if window is not None else None
    forests = []
    for i in range(n_replicas):
        f = simulate(config, replica=replica_offset + i)
        z[i] = f.z_alive
        if nlev:
            esc[i] = f.escape_counts
        nn[i] = f.n_nodes
        capped[i] = f.capped
        if window is not None:
            xs = f.positions_at_horizon()
            wcount[i] = int(np.count_nonzero((xs >= window[0]) & (xs < window[1])))
        if keep == "all" or (keep == "survivors" and f.z_alive > 0):
            forests.append(f)
    return EnsembleStats(config=config,
                         replicas=np.arange(replica_offset,
                                            replica_offset + n_replicas),
                         z=z, escapes=esc, n_nodes=nn, capped=capped,
                         window_counts=wcount, forests=forests)


# ---------------------------------------------------------------------------
# Marked metric measure extraction


@dataclass
class MarkedSample:
    """Leaves of the genealogy cut at time t, with pairwise distances.

    ids are node indices in planar depth-first order; dist[i, j] is
    t - (death time of the last common ancestor), divided by rescale_N
    when a rescaling is requested.  marks are horizon positions and are
    NaN when t is not the horizon (positions are only stored at birth,
    death and horizon).  total_mass is the leaf count, divided by
    rescale_N when rescaling.
    """

    ids: np.ndarray
    marks: np.ndarray
    dist: np.ndarray
    total_mass: float
    rescale_N: float | None
    t: float

    @property
    def n_leaves(self) -> int:
        return len(self.ids)

    @property
    def marks_valid(self) -> bool:
        return self.n_leaves == 0 or bool(np.isfinite(self.marks).all())


def extract_mmm(forest: GenealogyForest, t=None, rescale_N=None) -> MarkedSample:
    """Marked metric measure sample of the forest cut at time t."""
    if forest.capped:
        raise SimulationError("capped forest; rerun with more max_particles")
    horizon = forest.config.horizon
    if t is None:
        t = horizon
    t = float(t)
    if not (0.0 < t <= horizon):
        raise ValueError("t must lie in (0, horizon]")
    is_leaf = forest.alive_mask(t)
    ok_internal = (forest.cause == CAUSE_BRANCHED) & (forest.death <= t)
    cnt = _engine.subtree_leaf_counts(forest.parent, is_leaf, ok_internal)
    m = int(cnt[0]) if len(cnt) else 0
    dmat = np.zeros((m, m), np.float64)
    slot_ids = np.zeros(m, np.int64)
    if m:
        kid_a, kid_b = forest.children_of()
        _engine.fill_distance_matrix(
            forest.parent, forest.death, forest.planar, kid_a, kid_b,
            cnt, is_leaf, ok_internal, t, slot_ids, dmat)
    if abs(t - horizon) <= 1e-12 * max(1.0, horizon):
        marks = forest.x_death[slot_ids] if m else np.zeros(0)
    else:
        marks = np.full(m, np.nan)
    scale = float(rescale_N) if rescale_N is not None else None
    if scale is not None:
        if scale <= 0:
            raise ValueError("rescale_N must be positive")
        dmat /= scale
        mass = m / scale
    else:
        mass = float(m)
    return MarkedSample(ids=slot_ids, marks=marks, dist=dmat,
                        total_mass=mass, rescale_N=scale, t=t)


def sample_uniform_k(sample: MarkedSample, k: int, rng) -> MarkedSample:
    """k leaves drawn uniformly with replacement, as a sub-sample."""
    if sample.n_leaves == 0:
        raise ValueError("empty sample")
    idx = rng.integers(0, sample.n_leaves, size=k)
    return MarkedSample(ids=sample.ids[idx], marks=sample.marks[idx],
                        dist=sample.dist[np.ix_(idx, idx)],
                        total_mass=sample.total_mass,
                        rescale_N=sample.rescale_N, t=sample.t)


def _phi_values(sample, phis):
    cols = []
    for phi in phis:
        if phi is None:
            cols.append(np.ones(sample.n_leaves))
        else:
            if not sample.marks_valid:
                raise ValueError("marks unavailable at this cut time")
            cols.append(np.asarray(phi(sample.marks), float))
    return cols


def evaluate_polynomial(sample: MarkedSample, psi=None, phis=(None,),
                        distinct=False, rng=None, n_tuples=100_000):
    """Polynomial of the marked sample: the sum over leaf k-tuples of
    prod_{i<j} psi(d(v_i, v_j)) * prod_i phi_i(x_{v_i}).

    psi acts elementwise on distances (None means 1); phis is a length-k
    sequence of mark functions (entries may be None).  With a rescaled
    sample each tuple carries weight rescale_N**-k.  k <= 3 is evaluated
    exactly; larger k is estimated from n_tuples uniform tuples using
    rng.  Returns (value, standard_error), the latter 0 for exact sums.
    """
    k = len(phis)
    if k < 1:
        raise ValueError("need at least one mark function")
    n = sample.n_leaves
    w = 1.0 if sample.rescale_N is None else sample.rescale_N ** (-k)
    if n == 0 or (distinct and n < k):
        return 0.0, 0.0
    pv = _phi_values(sample, phis)
    psi_mat = None
    if k >= 2:
        psi_mat = np.ones((n, n)) if psi is None else np.asarray(psi(sample.dist), float)

    if k == 1:
        return w * float(pv[0].sum()), 0.0
    if k == 2:
        total = float(pv[0] @ psi_mat @ pv[1])
        if distinct:
            total -= float(np.sum(np.diag(psi_mat) * pv[0] * pv[1]))
        return w * total, 0.0
    if k == 3:
        a, b, c = pv
        total = float(np.einsum("pq,pr,qr,p,q,r->", psi_mat, psi_mat, psi_mat,
                                a, b, c, optimize=True))
        if distinct:
            dg = np.diag(psi_mat)
            sq = psi_mat * psi_mat
            s_ab = float(np.einsum("p,pr,p,p,r->", dg, sq, a, b, c, optimize=True))
            s_ac = float(np.einsum("p,pq,p,q,p->", dg, sq, a, b, c, optimize=True))
            s_bc = float(np.einsum("q,pq,p,q,q->", dg, sq, a, b, c, optimize=True))
            s_all = float(np.sum(dg ** 3 * a * b * c))
            total = total - s_ab - s_ac - s_bc + 2.0 * s_all
        return w * total, 0.0

    # k >= 4: Monte Carlo over uniform tuples
    if rng is None:
        rng = np.random.default_rng(0)
    vals = np.empty(n_tuples)
    tuples_total = float(n) ** k
    if distinct:
        tuples_total = 1.0
        for j in range(k):
            tuples_total *= n - j
    filled = 0
    while filled < n_tuples:
        batch = min(n_tuples - filled, 50_000)
        idx = rng.integers(0, n, size=(batch, k))
        if distinct:
            good = np.ones(batch, np.bool_)
            for a_ in range(k):
                for b_ in range(a_ + 1, k):
                    good &= idx[:, a_] != idx[:, b_]
            idx = idx[good]
            if len(idx) == 0:
                continue
            batch = len(idx)
        g = np.ones(batch)
        for a_ in range(k):
            for b_ in range(a_ + 1, k):
                g *= psi_mat[idx[:, a_], idx[:, b_]]
        for a_ in range(k):
            g *= pv[a_][idx[:, a_]]
        vals[filled:filled + batch] = g
        filled += batch
    mean = float(vals.mean())
    se = float(vals.std(ddof=1) / math.sqrt(n_tuples)) if n_tuples > 1 else 0.0
    return w * tuples_total * mean, w * tuples_total * se
