"""Compiled Monte Carlo core for the branching diffusion.

Every particle owns a counter-based RNG stream derived from
(seed, replica, node id) through a splitmix64 mix, so the output of a
replica does not depend on the order in which particles are processed.

Node record layout (filled by run_replica):
    parent[i]  index of the parent node, -1 for the root
    birth[i]   birth time
    death[i]   death / horizon / truncation time
    cause[i]   0 alive at horizon, 1 absorbed at 0, 2 absorbed at the
               cutoff, 3 branched
    planar[i]  left/right label, uniform among the two children
    xdeath[i]  position at death (0 or cutoff when absorbed; the branch
               point for cause 3; the horizon position for cause 0)
    flags[i]   bitmask of escape levels this lineage has already crossed
"""

import math

import numpy as np
from numba import njit

U64 = np.uint64
_GOLD = U64(0x9E3779B97F4A7C15)
_MIX1 = U64(0xBF58476D1CE4E5B9)
_MIX2 = U64(0x94D049BB133111EB)
_S30 = U64(30)
_S27 = U64(27)
_S31 = U64(31)
_S11 = U64(11)
_ONE = U64(1)
_TO01 = 1.0 / 9007199254740992.0       # 2^-53


@njit(cache=True, inline="always")
def _mix(z):
    z = (z ^ (z >> _S30)) * _MIX1
    z = (z ^ (z >> _S27)) * _MIX2
    return z ^ (z >> _S31)


@njit(cache=True, inline="always")
def _stream_key(seed, replica, node):
    k = _mix(seed + _GOLD * (replica + _ONE))
    return _mix(k + _GOLD * (node + _ONE))


@njit(cache=True, inline="always")
def _u01(key, ctr):
    """ctr-th uniform of the stream, in [0, 1)."""
    z = _mix(key + _GOLD * (ctr + _ONE))
    return float(z >> _S11) * _TO01


@njit(cache=True, inline="always")
def _rate(kind, a, height, wxs, wvals, x):
    """Branching rate r(x) = (1 + W(x)) / 2, W supported in [0, a]."""
    if kind == 0:
        return 0.5
    if x < 0.0 or x > a:
        return 0.5
    if kind == 1:
        return 0.5 * (1.0 + height)
    return 0.5 * (1.0 + np.interp(x, wxs, wvals))


@njit(cache=True)
def run_replica(seed, replica, x0, horizon, mu,
                kind, a, height, wxs, wvals, r_max,
                cutoff, has_cutoff, levels, lev_is_cutoff,
                dt_bulk, dt_edge, branching,
                parent, birth, death, cause, planar, xdeath, flags,
                stack, esc_counts):
    """One forward replica; returns (n_nodes, capped).

    Arrays are caller-allocated buffers of equal length; esc_counts must be
    zeroed by the caller.  If the node budget runs out the run is truncated:
    the offending particle is frozen at its current time with cause 0 and
    capped = True is reported (such runs are excluded from estimators).
    """
    maxn = parent.shape[0]
    nlev = levels.shape[0]
    seed_u = U64(seed)
    rep_u = U64(replica)

    parent[0] = -1
    birth[0] = 0.0
    planar[0] = 0
    flags[0] = 0
    n = 1
    sp = 0
    stack[0] = 0
    capped = False

    while sp >= 0:
        node = stack[sp]
        sp -= 1
        t = birth[node]
        pa = parent[node]
        x = x0 if pa < 0 else xdeath[pa]
        key = _stream_key(seed_u, rep_u, U64(node))
        ctr = U64(0)
        fl = flags[node]

        for j in range(nlev):
            if (fl >> j) & 1 == 0 and x >= levels[j]:
                fl |= 1 << j
                esc_counts[j] += 1

        if branching and r_max > 0.0:
            u = _u01(key, ctr); ctr += _ONE
            t_prop = t - math.log(1.0 - u) / r_max
        else:
            t_prop = horizon + 1.0

        while True:
            near = x < 0.5 or (has_cutoff and x > cutoff - 0.5)
            dt_loc = dt_edge if near else dt_bulk
            t_event = t_prop if t_prop < horizon else horizon
            dt = t_event - t
            if dt > dt_loc:
                dt = dt_loc
            if dt <= 1e-15:
                if t_prop < horizon:
                    u = _u01(key, ctr); ctr += _ONE
                    if u * r_max < _rate(kind, a, height, wxs, wvals, x):
                        if n + 2 > maxn:
                            capped = True
                            death[node] = t
                            cause[node] = 0
                            xdeath[node] = x
                            flags[node] = fl
                            break
                        death[node] = t
                        cause[node] = 3
                        xdeath[node] = x
                        flags[node] = fl
                        ub = _u01(key, ctr); ctr += _ONE
                        b = 1 if ub < 0.5 else 0
                        for c in range(2):
                            parent[n + c] = node
                            birth[n + c] = t
                            planar[n + c] = b if c == 0 else 1 - b
                            flags[n + c] = fl
                            sp += 1
                            stack[sp] = n + c
                        n += 2
                        break
                    u = _u01(key, ctr); ctr += _ONE
                    t_prop = t - math.log(1.0 - u) / r_max
                    continue
                death[node] = horizon
                cause[node] = 0
                xdeath[node] = x
                flags[node] = fl
                break

            u1 = _u01(key, ctr); ctr += _ONE
            u2 = _u01(key, ctr); ctr += _ONE
            z = math.sqrt(-2.0 * math.log(1.0 - u1)) * math.cos(6.283185307179586 * u2)
            xn = x - mu * dt + math.sqrt(dt) * z
            tn = t + dt

            # escape levels (skip ones aliased to the cutoff; those count
            # exactly when the cutoff absorbs, keeping both tallies equal)
            for j in range(nlev):
                if (fl >> j) & 1 == 0 and not lev_is_cutoff[j]:
                    lev = levels[j]
                    crossed = False
                    if xn >= lev:
                        crossed = True
                    elif x < lev:
                        ex = 2.0 * (lev - x) * (lev - xn) / dt
                        if ex < 50.0:
                            ub = _u01(key, ctr); ctr += _ONE
                            if ub < math.exp(-ex):
                                crossed = True
                    if crossed:
                        fl |= 1 << j
                        esc_counts[j] += 1

            # absorption at 0 (endpoint, then bridge)
            died0 = xn <= 0.0
            if not died0:
                ex = 2.0 * x * xn / dt
                if ex < 50.0:
                    ub = _u01(key, ctr); ctr += _ONE
                    if ub < math.exp(-ex):
                        died0 = True
            if died0:
                death[node] = tn
                cause[node] = 1
                xdeath[node] = 0.0
                flags[node] = fl
                break

            if has_cutoff:
                diedL = xn >= cutoff
                if not diedL:
                    ex = 2.0 * (cutoff - x) * (cutoff - xn) / dt
                    if ex < 50.0:
                        ub = _u01(key, ctr); ctr += _ONE
                        if ub < math.exp(-ex):
                            diedL = True
                if diedL:
                    for j in range(nlev):
                        if lev_is_cutoff[j] and (fl >> j) & 1 == 0:
                            fl |= 1 << j
                            esc_counts[j] += 1
                    death[node] = tn
                    cause[node] = 2
                    xdeath[node] = cutoff
                    flags[node] = fl
                    break

            x = xn
            t = tn

    return n, capped


@njit(cache=True)
def subtree_leaf_counts(parent, is_leaf, ok_internal):
    """Number of cut-tree leaves under each node.

    Children always carry larger indices than their parent, so one
    descending pass accumulates counts bottom-up.
    """
    n = parent.shape[0]
    cnt = np.zeros(n, np.int64)
    for i in range(n - 1, -1, -1):
        if is_leaf[i]:
            cnt[i] += 1
        elif not ok_internal[i]:
            cnt[i] = 0
        p = parent[i]
        if p >= 0:
            cnt[p] += cnt[i]
    return cnt


@njit(cache=True)
def fill_distance_matrix(parent, death, planar, kid_a, kid_b, cnt,
                         is_leaf, ok_internal, t, slot_ids, dmat):
    """Pairwise leaf distances t - death[LCA] in planar DFS leaf order.

    Walks nodes in increasing index (parents first), assigning each
    cut-tree node a contiguous leaf interval; at a branch node the
    cross-block of the two child intervals gets the split distance.
    """
    n = parent.shape[0]
    lo = np.zeros(n, np.int64)
    for i in range(n):
        if cnt[i] == 0:
            continue
        if is_leaf[i]:
            slot_ids[lo[i]] = i
        elif ok_internal[i]:
            a = kid_a[i]
            b = kid_b[i]
            if planar[a] != 0:
                a, b = b, a
            ca = cnt[a]
            cb = cnt[b]
            base = lo[i]
            lo[a] = base
            lo[b] = base + ca
            if ca > 0 and cb > 0:
                d = t - death[i]
                for p in range(base, base + ca):
                    for q in range(base + ca, base + ca + cb):
                        dmat[p, q] = d
                        dmat[q, p] = d
