"""Config-driven experiment runner tying the other modules together.

Three experiments cover the limit theorems at finite N:

  yaglom      conditional law of Z_{tN}/N against the exponential limit
  genealogy   sampled leaf genealogies against the CPP pair law and
              the front-profile mark density
  kolmogorov  N P(Z_{tN} > 0): Monte Carlo vs the FKPP solve vs the
              closed-form limit, across a sweep of N

Each experiment is a plain function returning a JSON-ready report; the
Experiment runner adds config validation, output files and gates.
Reproducibility contract: outputs carry (code version, seed, sha256 of
the canonical config) in their headers and contain no timestamps, so
re-running the same triple reproduces the statistics files byte for
byte.  Replica fan-out (capped by PUSHEDFRONT_THREADS) assigns random
streams by replica index, never by scheduling order.
"""

import json
import hashlib
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats as sps
from scipy.integrate import cumulative_trapezoid

from . import __version__
from .bbm_sim import (SimConfig, extract_mmm, sample_uniform_k, simulate,
                      simulate_ensemble, EnsembleStats)
from .cpp import pair_distance_cdf
from .fkpp import kolmogorov_check
from .spectral import Potential, SpectralData, solve_spectrum


class ConfigError(ValueError):
    """Bad experiment configuration (CLI exit code 2)."""


# ---------------------------------------------------------------------------
# worker fan-out


def n_workers() -> int:
    """Worker cap from PUSHEDFRONT_THREADS (default 1)."""
    raw = os.environ.get("PUSHEDFRONT_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ConfigError(f"PUSHEDFRONT_THREADS={raw!r} is not an integer")


def _merge_stats(parts):
    base = parts[0]
    return EnsembleStats(
        config=base.config,
        replicas=np.concatenate([p.replicas for p in parts]),
        z=np.concatenate([p.z for p in parts]),
        escapes=np.concatenate([p.escapes for p in parts], axis=0),
        n_nodes=np.concatenate([p.n_nodes for p in parts]),
        capped=np.concatenate([p.capped for p in parts]),
        window_counts=(np.concatenate([p.window_counts for p in parts])
                       if base.window_counts is not None else None),
        forests=[f for p in parts for f in p.forests])


def run_ensemble(config: SimConfig, replicas: int, keep: str = "none",
                 window=None) -> EnsembleStats:
    """simulate_ensemble with block fan-out across workers.

    Blocks are contiguous replica ranges and results are merged in block
    order, so the output is identical to a single-threaded run whatever
    the scheduler does (random streams are keyed by replica index).
    """
    w = min(n_workers(), int(replicas))
    if w <= 1:
        return simulate_ensemble(config, replicas, keep=keep, window=window)
    bounds = np.linspace(0, replicas, w + 1).astype(int)
    def block(ab):
        lo, hi = ab
        return simulate_ensemble(config, hi - lo, replica_offset=lo,
                                 keep=keep, window=window)
    with ThreadPoolExecutor(max_workers=w) as ex:
        parts = list(ex.map(block, zip(bounds[:-1], bounds[1:])))
    return _merge_stats(parts)


# ---------------------------------------------------------------------------
# statistical tests (two-sided asymptotic KS; chi^2 with bin merging)


def ks_against_cdf(sample, cdf) -> dict:
    xs = np.asarray(sample, float)
    res = sps.kstest(xs, cdf, mode="asymp")
    return {"stat": float(res.statistic), "p": float(res.pvalue),
            "n": int(len(xs))}


def ks_exponential(sample, mean=None) -> dict:
    """KS against Exp(mean); the mean is fitted when not given."""
    xs = np.asarray(sample, float)
    m = float(xs.mean()) if mean is None else float(mean)
    out = ks_against_cdf(xs, lambda s: -np.expm1(-np.asarray(s) / m))
    out["mean"] = m
    return out


def chi2_against_density(draws, xs, density, n_bins: int = 20,
                         min_expected: float = 5.0) -> dict:
    """Chi-square of draws against a tabulated density.

    Equal-width bins over the table's support; mass beyond the last
    abscissa is folded into the final bin, and bins are merged forward
    until every expected count reaches min_expected.  Reports the
    statistic, asymptotic p, and Cramer's V as the effect size.
    """
    draws = np.asarray(draws, float)
    xs = np.asarray(xs, float)
    density = np.asarray(density, float)
    n = len(draws)
    if n == 0:
        raise ValueError("no draws")
    cum = np.concatenate(([0.0], cumulative_trapezoid(density, xs)))
    edges = np.linspace(xs[0], xs[-1], n_bins + 1)
    cdf_e = np.interp(edges, xs, cum)
    probs = np.diff(cdf_e)
    probs[-1] += max(0.0, 1.0 - cum[-1])   # density tail beyond the table
    probs = probs / probs.sum()
    count_edges = edges.copy()
    count_edges[0] = -np.inf
    count_edges[-1] = np.inf
    counts = np.histogram(draws, count_edges)[0].astype(float)
    expected = probs * n

    merged_o, merged_e = [], []
    acc_o = acc_e = 0.0
    for o, e in zip(counts, expected):
        acc_o += o
        acc_e += e
        if acc_e >= min_expected:
            merged_o.append(acc_o)
            merged_e.append(acc_e)
            acc_o = acc_e = 0.0
    if acc_e > 0.0:
        if merged_e:
            merged_o[-1] += acc_o
            merged_e[-1] += acc_e
        else:
            merged_o.append(acc_o)
            merged_e.append(acc_e)
    obs = np.array(merged_o)
    exp = np.array(merged_e)
    if len(obs) < 2:
        raise ValueError("fewer than two bins after merging; need more draws")
    stat = float(((obs - exp) ** 2 / exp).sum())
    dof = len(obs) - 1
    return {"stat": stat, "p": float(sps.chi2.sf(stat, dof)), "dof": dof,
            "bins": len(obs), "n": n,
            "effect": math.sqrt(stat / (n * dof))}


# ---------------------------------------------------------------------------
# threshold defaults ("acceptance thresholds live in config, not code":
# these are schema defaults, overridable per run)

_THRESHOLDS = {
    "yaglom": {"min_survivors": 300, "mean_rel_tol": 0.15,
               "moment_ratio_lo": 0.85, "moment_ratio_hi": 1.15,
               "ks_p_min": 0.01},
    "genealogy": {"min_survivors": 300, "ks_max": 0.08, "chi2_p_min": 0.01,
                  "chi2_bins": 20, "mark_hi": 6.0},
    "kolmogorov": {"limit_rel_tol": 0.2, "se_factor": 3.0,
                   "require_fkpp_trend": True, "require_mc_trend": False},
}


def _merge_thresholds(kind: str, overrides) -> dict:
    th = dict(_THRESHOLDS[kind])
    if overrides:
        unknown = set(overrides) - set(th)
        if unknown:
            raise ConfigError(
                f"unknown threshold keys for {kind}: {sorted(unknown)}")
        th.update(overrides)
    return th


def _insufficient(report, n_surv, need, replicas):
    report["status"] = "insufficient survivors"
    report["n_survivors"] = int(n_surv)
    scale = need / max(n_surv, 1)
    report["suggested_replicas"] = int(math.ceil(replicas * scale * 1.3))
    report["gates"] = {"enough_survivors": False}
    report["passed"] = False
    return report


# ---------------------------------------------------------------------------
# experiments


def run_yaglom(sd: SpectralData, N, t, x0, replicas, seed: int = 0,
               thresholds=None, dt_max: float = 0.1) -> dict:
    """Conditional Z_{tN}/N sample vs the exponential limit law."""
    sd._require_fully_pushed()
    th = _merge_thresholds("yaglom", thresholds)
    cfg = SimConfig(potential=sd.potential, mu=sd.mu, horizon=float(t * N),
                    x0=float(x0), seed=int(seed), cutoff=sd.L, dt_max=dt_max)
    ens = run_ensemble(cfg, int(replicas))
    z = ens.z[ens.ok]
    surv_p, surv_se = ens.survival()
    zn = z[z > 0] / float(N)
    target = sd.Sigma2 * t / 2.0
    report = {
        "experiment": "yaglom",
        "params": {"N": float(N), "t": float(t), "x0": float(x0),
                   "L": sd.L, "replicas": int(replicas), "seed": int(seed)},
        "thresholds": th,
        "n_effective": int(len(z)),
        "n_capped": int(ens.capped.sum()),
        "survival": {"estimate": surv_p, "se": surv_se},
        "expected_survival": sd.kolmogorov_limit(t, x0) / float(N),
        "data": {"z_surv": z[z > 0], "zn": zn},
    }
    if len(zn) < th["min_survivors"]:
        return _insufficient(report, len(zn), th["min_survivors"], replicas)
    mean = float(zn.mean())
    ratio = float((zn ** 2).mean() / (2.0 * mean ** 2))
    ks = ks_exponential(zn)           # Exp with the fitted mean
    report.update({
        "status": "ok",
        "n_survivors": int(len(zn)),
        "cond_mean": mean,
        "cond_var": float(zn.var(ddof=1)),
        "target_mean": target,
        "mean_rel_err": abs(mean - target) / target,
        "moment_ratio": ratio,
        "ks": ks,
    })
    gates = {
        "enough_survivors": True,
        "mean_within_tol": report["mean_rel_err"] <= th["mean_rel_tol"],
        "moment_ratio_in_band":
            th["moment_ratio_lo"] <= ratio <= th["moment_ratio_hi"],
        "ks_p_above_min": ks["p"] > th["ks_p_min"],
    }
    report["gates"] = gates
    report["passed"] = all(gates.values())
    return report


def _genealogy_block(sd, cfg, N, k, lo, hi, seed):
    """Scan replicas [lo, hi): per-survivor k-leaf genealogy rows.

    Forests are discarded right after sampling, so memory stays flat
    however long the horizon.  The leaf-sampling stream is keyed by
    replica index, keeping pooled outputs independent of the worker
    split.
    """
    n_pairs = k * (k - 1) // 2
    rows = []
    z = np.zeros(hi - lo, np.int64)
    capped = np.zeros(hi - lo, np.bool_)
    for i in range(lo, hi):
        f = simulate(cfg, replica=i)
        z[i - lo] = f.z_alive
        capped[i - lo] = f.capped
        if f.capped or f.z_alive == 0:
            continue
        ms = extract_mmm(f, rescale_N=N)
        rng = np.random.default_rng([int(seed), i, 0x67656e])
        sub = sample_uniform_k(ms, k, rng)
        d = sub.dist
        pairs = d[np.triu_indices(k, 1)]
        viol = 0
        if k >= 3:
            for a in range(k):
                for b in range(a + 1, k):
                    for c in range(b + 1, k):
                        sides = sorted((d[a, b], d[a, c], d[b, c]))
                        if sides[1] != sides[2]:
                            viol += 1
        rows.append((i, int(f.z_alive), pairs, sub.marks.copy(), viol))
    return rows, z, capped


def run_genealogy(sd: SpectralData, N, t, x0, k, replicas, seed: int = 0,
                  thresholds=None, dt_max: float = 0.1) -> dict:
    """k sampled leaves per surviving replica vs the CPP limit.

    Pools one uniformly sampled k-tuple per survivor: rescaled pairwise
    distances are compared to the closed-form CPP pair CDF (for k = 2
    the pooled pairs are independent draws, so the asymptotic KS p-value
    is exact in distribution), and marks to the front profile density.
    """
    sd._require_fully_pushed()
    if k < 2:
        raise ConfigError("genealogy needs k >= 2")
    th = _merge_thresholds("genealogy", thresholds)
    cfg = SimConfig(potential=sd.potential, mu=sd.mu, horizon=float(t * N),
                    x0=float(x0), seed=int(seed), cutoff=sd.L, dt_max=dt_max)
    w = min(n_workers(), int(replicas))
    bounds = np.linspace(0, int(replicas), w + 1).astype(int)
    if w <= 1:
        parts = [_genealogy_block(sd, cfg, N, k, 0, int(replicas), seed)]
    else:
        with ThreadPoolExecutor(max_workers=w) as ex:
            parts = list(ex.map(
                lambda ab: _genealogy_block(sd, cfg, N, k, ab[0], ab[1],
                                            seed),
                zip(bounds[:-1], bounds[1:])))
    rows = [r for p in parts for r in p[0]]
    z_all = np.concatenate([p[1] for p in parts])
    capped = np.concatenate([p[2] for p in parts])
    n_surv = len(rows)

    alive = (z_all[~capped] > 0).astype(float)
    surv_p = float(alive.mean())
    surv_se = math.sqrt(max(surv_p * (1 - surv_p), 1e-300) / len(alive))
    report = {
        "experiment": "genealogy",
        "params": {"N": float(N), "t": float(t), "x0": float(x0),
                   "k": int(k), "L": sd.L, "replicas": int(replicas),
                   "seed": int(seed)},
        "thresholds": th,
        "n_capped": int(capped.sum()),
        "survival": {"estimate": surv_p, "se": surv_se},
    }
    if n_surv < th["min_survivors"]:
        report["data"] = {"rows": rows, "z": z_all}
        return _insufficient(report, n_surv, th["min_survivors"], replicas)

    first_pair = np.array([r[2][0] for r in rows])
    all_pairs = np.concatenate([r[2] for r in rows])
    marks = np.concatenate([r[3] for r in rows])
    violations = int(sum(r[4] for r in rows))
    ks_first = ks_against_cdf(first_pair, lambda s: pair_distance_cdf(s, t))

    mark_xs = np.linspace(0.0, th["mark_hi"], 2001)
    mark_density = np.asarray(sd.h_tilde_inf(mark_xs), float)
    chi2 = chi2_against_density(marks, mark_xs, mark_density,
                                n_bins=int(th["chi2_bins"]))
    report.update({
        "status": "ok",
        "n_survivors": n_surv,
        "pair_ks": ks_first,
        "marks_chi2": chi2,
        "ultrametric_violations": violations,
        "n_triangles": n_surv * (k * (k - 1) * (k - 2) // 6),
        "data": {"rows": rows, "z": z_all, "first_pair": first_pair,
                 "all_pairs": all_pairs, "marks": marks,
                 "mark_xs": mark_xs, "mark_density": mark_density},
    })
    if k > 2:
        # pooled pairs share replicas, so this KS p is only indicative
        report["pair_ks_pooled"] = ks_against_cdf(
            all_pairs, lambda s: pair_distance_cdf(s, t))
    gates = {
        "enough_survivors": True,
        "ks_within_band": ks_first["stat"] <= th["ks_max"],
        "marks_chi2_p_above_min": chi2["p"] > th["chi2_p_min"],
        "ultrametric_exact": violations == 0,
    }
    report["gates"] = gates
    report["passed"] = all(gates.values())
    return report


def run_kolmogorov(sd: SpectralData, N_list, t, x0, replicas, seed: int = 0,
                   thresholds=None, dx: float = 5e-3, dt: float = 5e-3,
                   dt_max: float = 0.1) -> dict:
    """Three-way survival comparison: MC vs FKPP vs the limit formula."""
    sd._require_fully_pushed()
    th = _merge_thresholds("kolmogorov", thresholds)
    if not N_list:
        raise ConfigError("kolmogorov needs a non-empty N_list")
    pot = sd.potential
    limit = sd.kolmogorov_limit(t, x0)
    rows = []
    for idx, N in enumerate(N_list):
        L = sd.L_of_N(N)
        sd_n = solve_spectrum(pot, L, t_min=sd.t_min)
        kc = kolmogorov_check(sd_n, N, t, x0, dx=dx, dt=dt)
        cfg = SimConfig(potential=pot, mu=sd_n.mu, horizon=float(t * N),
                        x0=float(x0), seed=int(seed) + idx, cutoff=L,
                        dt_max=dt_max)
        ens = run_ensemble(cfg, int(replicas))
        p, se = ens.survival()
        mc = float(N) * p
        mc_se = float(N) * se
        rows.append({
            "N": float(N), "L": L,
            "fkpp": kc["lhs"], "mc": mc, "mc_se": mc_se, "limit": limit,
            "fkpp_rel_err": kc["rel_err"],
            "mc_rel_err": abs(mc - limit) / limit,
            "mc_fkpp_z": (mc - kc["lhs"]) / mc_se if mc_se > 0 else np.inf,
            "prop_max_dev": kc["prop_max_dev"],
            "n_capped": int(ens.capped.sum()),
        })
    fkpp_errs = [r["fkpp_rel_err"] for r in rows]
    mc_gap = [abs(r["mc"] - limit) for r in rows]
    gates = {
        "mc_matches_fkpp":
            all(abs(r["mc_fkpp_z"]) <= th["se_factor"] for r in rows),
        "fkpp_within_tol":
            all(e <= th["limit_rel_tol"] for e in fkpp_errs),
        "mc_within_tol":
            all(r["mc_rel_err"] <= th["limit_rel_tol"] for r in rows),
    }
    if th["require_fkpp_trend"]:
        gates["fkpp_trend_non_increasing"] = all(
            b <= a for a, b in zip(fkpp_errs, fkpp_errs[1:]))
    if th["require_mc_trend"]:
        gates["mc_trend_non_increasing"] = all(
            b <= a for a, b in zip(mc_gap, mc_gap[1:]))
    report = {
        "experiment": "kolmogorov",
        "params": {"N_list": [float(n) for n in N_list], "t": float(t),
                   "x0": float(x0), "replicas": int(replicas),
                   "seed": int(seed), "dx": dx, "dt": dt},
        "thresholds": th,
        "limit": limit,
        "rows": rows,
        "mc_gap_trend": mc_gap,
        "status": "ok",
        "gates": gates,
        "passed": all(gates.values()),
    }
    return report


# ---------------------------------------------------------------------------
# config schema


_POTENTIAL_FIELDS = {
    "zero": set(),
    "step": {"height", "support_right"},
    "table": {"xs", "ws"},
}


def build_potential(spec_dict) -> Potential:
    if not isinstance(spec_dict, dict) or "kind" not in spec_dict:
        raise ConfigError("potential must be an object with a 'kind'")
    kind = spec_dict["kind"]
    if kind not in _POTENTIAL_FIELDS:
        raise ConfigError(f"unknown potential kind {kind!r}")
    extra = set(spec_dict) - _POTENTIAL_FIELDS[kind] - {"kind"}
    if extra:
        raise ConfigError(
            f"unknown potential keys for kind {kind!r}: {sorted(extra)}")
    try:
        if kind == "zero":
            return Potential.zero()
        if kind == "step":
            if "height" not in spec_dict:
                raise ConfigError("step potential needs a height")
            return Potential.step(float(spec_dict["height"]),
                                  float(spec_dict.get("support_right", 1.0)))
        if "xs" not in spec_dict or "ws" not in spec_dict:
            raise ConfigError("table potential needs xs and ws")
        return Potential.table(np.asarray(spec_dict["xs"], float),
                               np.asarray(spec_dict["ws"], float))
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"bad potential: {exc}") from exc


_COMMON_KEYS = {"name", "experiment", "potential", "seed", "thresholds",
                "t", "x0", "replicas", "dt_max", "t_min"}
_EXP_KEYS = {
    "yaglom": _COMMON_KEYS | {"N", "L"},
    "genealogy": _COMMON_KEYS | {"N", "L", "k"},
    "kolmogorov": _COMMON_KEYS | {"N_list", "dx", "dt"},
}
_DEFAULTS = {"t": 1.0, "x0": 2.0, "seed": 0, "dt_max": 0.1, "k": 2,
             "dx": 5e-3, "dt": 5e-3}


def _as_number(cfg, key, integer=False):
    v = cfg[key]
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(f"{key} must be a number")
    if integer and int(v) != v:
        raise ConfigError(f"{key} must be an integer")
    return int(v) if integer else float(v)


def validate_config(cfg: dict) -> dict:
    """Check keys and types, fill defaults; unknown keys are rejected."""
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a JSON object")
    kind = cfg.get("experiment")
    if kind not in _EXP_KEYS:
        raise ConfigError(
            f"experiment must be one of {sorted(_EXP_KEYS)}, got {kind!r}")
    unknown = set(cfg) - _EXP_KEYS[kind]
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    if "potential" not in cfg:
        raise ConfigError("config needs a potential")
    build_potential(cfg["potential"])          # validates eagerly
    if "replicas" not in cfg:
        raise ConfigError("config needs a replica count")

    merged = dict(_DEFAULTS)
    if kind != "genealogy":
        merged.pop("k")
    if kind != "kolmogorov":
        merged.pop("dx")
        merged.pop("dt")
    merged.update(cfg)
    merged["name"] = str(merged.get("name", kind))
    merged["seed"] = _as_number(merged, "seed", integer=True)
    merged["replicas"] = _as_number(merged, "replicas", integer=True)
    if merged["replicas"] <= 0:
        raise ConfigError("replicas must be positive")
    for key in ("t", "x0", "dt_max"):
        merged[key] = _as_number(merged, key)
    if kind == "kolmogorov":
        if not isinstance(merged.get("N_list"), list) or not merged["N_list"]:
            raise ConfigError("kolmogorov needs a non-empty N_list")
        merged["N_list"] = [float(n) for n in merged["N_list"]]
        for key in ("dx", "dt"):
            merged[key] = _as_number(merged, key)
    else:
        if "N" not in merged:
            raise ConfigError(f"{kind} needs N")
        merged["N"] = _as_number(merged, "N")
        if "L" in merged:
            merged["L"] = _as_number(merged, "L")
        if kind == "genealogy":
            merged["k"] = _as_number(merged, "k", integer=True)
    if "t_min" in merged:
        merged["t_min"] = _as_number(merged, "t_min")
    _merge_thresholds(kind, merged.get("thresholds"))   # key check only
    return merged


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"),
                      default=_jsonable)


def config_hash(merged_cfg: dict) -> str:
    return hashlib.sha256(canonical_json(merged_cfg).encode()).hexdigest()


def _jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer, np.bool_)):
        return o.item()
    raise TypeError(f"not JSON-serializable: {type(o)}")


# ---------------------------------------------------------------------------
# experiment runner


@dataclass
class Experiment:
    """A validated run: merged config, report and output paths."""

    name: str
    config: dict
    report: dict = field(default_factory=dict)
    paths: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return bool(self.report.get("passed"))


def _spectral_for(cfg: dict) -> SpectralData:
    pot = build_potential(cfg["potential"])
    t_min = cfg.get("t_min")
    kw = {} if t_min is None else {"t_min": t_min}
    if cfg["experiment"] == "kolmogorov":
        # per-N strips are solved inside run_kolmogorov; this spectral
        # data only carries the potential and the limit constants
        return solve_spectrum(pot, 10.0, **kw)
    if "L" in cfg:
        return solve_spectrum(pot, cfg["L"], **kw)
    probe = solve_spectrum(pot, 10.0, **kw)
    return solve_spectrum(pot, probe.L_of_N(cfg["N"]), **kw)


def _stamp(merged: dict, h: str):
    return [f"# pushedfront {__version__}",
            f"# seed={merged['seed']}",
            f"# config_sha256={h}"]


def write_csv(path, columns, rows, stamp_lines):
    """Delimited output with stamped header; floats via repr for
    byte-stable round-trips."""
    def fmt(v):
        if isinstance(v, (float, np.floating)):
            return repr(float(v))
        if isinstance(v, (int, np.integer)):
            return str(int(v))
        return str(v)
    with open(path, "w", newline="\n") as fh:
        for line in stamp_lines:
            fh.write(line + "\n")
        fh.write(",".join(columns) + "\n")
        for row in rows:
            fh.write(",".join(fmt(v) for v in row) + "\n")


def _report_for_json(report: dict) -> dict:
    out = {k: v for k, v in report.items() if k != "data"}
    return out


def run_experiment(cfg: dict, out_dir, seed=None, no_plots=False) -> Experiment:
    """Validate, run, and write report.json + CSVs (+ figures)."""
    merged = validate_config(cfg)
    if seed is not None:
        merged["seed"] = int(seed)
    h = config_hash(merged)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    sd = _spectral_for(merged)
    kind = merged["experiment"]
    common = dict(t=merged["t"], x0=merged["x0"], replicas=merged["replicas"],
                  seed=merged["seed"], thresholds=merged.get("thresholds"),
                  dt_max=merged["dt_max"])
    if kind == "yaglom":
        report = run_yaglom(sd, merged["N"], **common)
    elif kind == "genealogy":
        report = run_genealogy(sd, merged["N"], k=merged["k"], **common)
    else:
        report = run_kolmogorov(sd, merged["N_list"], dx=merged["dx"],
                                dt=merged["dt"], **common)

    exp = Experiment(name=merged["name"], config=merged, report=report)
    stamp = _stamp(merged, h)
    base = out / merged["name"]

    jpath = Path(f"{base}_report.json")
    jreport = _report_for_json(report)
    jreport["meta"] = {"version": __version__, "seed": merged["seed"],
                       "config_sha256": h}
    with open(jpath, "w", newline="\n") as fh:
        fh.write(json.dumps(jreport, sort_keys=True, indent=2,
                            default=_jsonable) + "\n")
    exp.paths["report"] = str(jpath)

    data = report.get("data", {})
    if kind == "yaglom" and "zn" in data:
        rows = [(i, int(z), float(z) / merged["N"])
                for i, z in enumerate(data["z_surv"])]
        cpath = Path(f"{base}_survivors.csv")
        write_csv(cpath, ["survivor", "z", "zn"], rows, stamp)
        exp.paths["survivors"] = str(cpath)
    elif kind == "genealogy" and "rows" in data:
        k = merged["k"]
        pair_names = [f"d{a}{b}" for a in range(k) for b in range(a + 1, k)]
        mark_names = [f"mark{a}" for a in range(k)]
        cols = ["replica", "z"] + pair_names + mark_names + ["violations"]
        rows = [(r[0], r[1], *r[2], *r[3], r[4]) for r in data["rows"]]
        cpath = Path(f"{base}_pairs.csv")
        write_csv(cpath, cols, rows, stamp)
        exp.paths["pairs"] = str(cpath)
    elif kind == "kolmogorov":
        cols = ["N", "L", "fkpp", "mc", "mc_se", "limit", "fkpp_rel_err",
                "mc_rel_err", "mc_fkpp_z", "prop_max_dev"]
        rows = [tuple(r[c] for c in cols) for r in report["rows"]]
        cpath = Path(f"{base}_sweep.csv")
        write_csv(cpath, cols, rows, stamp)
        exp.paths["sweep"] = str(cpath)

    if not no_plots:
        from . import plots
        exp.paths.update(plots.render_experiment(report, base))
    return exp
