"""Figure rendering for experiment reports.

Only the verify path draws figures; the data subcommands stay
plain-CSV.  Figures are diagnostics, not part of the byte-stable
statistics contract, and every renderer degrades to "no figure" when
the report lacks the arrays it needs (e.g. an insufficient-survivors
run).
"""

import matplotlib
matplotlib.use("Agg")

import numpy as np
import matplotlib.pyplot as plt

from .cpp import pair_distance_cdf


def render_experiment(report: dict, base) -> dict:
    kind = report.get("experiment")
    fn = {"yaglom": _yaglom, "genealogy": _genealogy,
          "kolmogorov": _kolmogorov}.get(kind)
    if fn is None:
        return {}
    return fn(report, str(base))


def _yaglom(report, base):
    data = report.get("data", {})
    zn = np.asarray(data.get("zn", ()), float)
    if len(zn) == 0:
        return {}
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    hi = float(np.quantile(zn, 0.995)) * 1.1
    ax.hist(zn, bins=40, range=(0.0, hi), density=True, alpha=0.6,
            color="#4878a8", label=f"Z/N given survival (n={len(zn)})")
    xs = np.linspace(0.0, hi, 400)
    m_fit = zn.mean()
    ax.plot(xs, np.exp(-xs / m_fit) / m_fit, "k-", lw=1.2,
            label=f"Exp(mean={m_fit:.3f})")
    m_t = report.get("target_mean")
    if m_t:
        ax.plot(xs, np.exp(-xs / m_t) / m_t, "r--", lw=1.0,
                label=f"Exp(mean={m_t:.3f}) limit")
    ax.set_xlabel("rescaled population Z/N")
    ax.set_ylabel("density")
    ax.set_title("conditioned population vs exponential limit")
    ax.legend(frameon=False, fontsize=9)
    path = f"{base}_yaglom.png"
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)
    return {"fig_yaglom": path}


def _genealogy(report, base):
    data = report.get("data", {})
    pairs = np.asarray(data.get("first_pair", ()), float)
    marks = np.asarray(data.get("marks", ()), float)
    if len(pairs) == 0:
        return {}
    t = report["params"]["t"]
    fig, axes = plt.subplots(1, 2, figsize=(10.0, 4.0))

    ax = axes[0]
    xs = np.sort(pairs)
    ecdf = np.arange(1, len(xs) + 1) / len(xs)
    ax.step(xs, ecdf, where="post", color="#4878a8",
            label=f"sampled pairs (n={len(xs)})")
    grid = np.linspace(0.0, t, 400)
    ax.plot(grid, pair_distance_cdf(grid, t), "k-", lw=1.2,
            label="CPP pair law")
    ks = report.get("pair_ks", {})
    if ks:
        ax.set_title(f"pair distance CDF  (KS={ks['stat']:.3f})")
    ax.set_xlabel("rescaled pairwise distance")
    ax.set_ylabel("CDF")
    ax.legend(frameon=False, fontsize=9, loc="lower right")

    ax = axes[1]
    mark_xs = np.asarray(data.get("mark_xs", ()), float)
    dens = np.asarray(data.get("mark_density", ()), float)
    hi = mark_xs[-1] if len(mark_xs) else float(marks.max()) * 1.05
    ax.hist(marks, bins=30, range=(0.0, hi), density=True, alpha=0.6,
            color="#4878a8", label=f"leaf marks (n={len(marks)})")
    if len(mark_xs):
        ax.plot(mark_xs, dens, "k-", lw=1.2, label="front profile density")
    chi2 = report.get("marks_chi2", {})
    if chi2:
        ax.set_title(f"mark density  (chi2 p={chi2['p']:.3f})")
    ax.set_xlabel("position")
    ax.set_ylabel("density")
    ax.legend(frameon=False, fontsize=9)

    path = f"{base}_genealogy.png"
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)
    return {"fig_genealogy": path}


def _kolmogorov(report, base):
    rows = report.get("rows", ())
    if not rows:
        return {}
    N = np.array([r["N"] for r in rows])
    mc = np.array([r["mc"] for r in rows])
    se = np.array([r["mc_se"] for r in rows])
    fk = np.array([r["fkpp"] for r in rows])
    limit = report["limit"]
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    ax.errorbar(N, mc, yerr=3.0 * se, fmt="o", color="#4878a8",
                capsize=3, label="Monte Carlo (3 SE)")
    ax.plot(N, fk, "s-", color="#b05030", ms=5, label="FKPP solve")
    ax.axhline(limit, color="k", lw=1.0, ls="--",
               label=f"limit {limit:.4f}")
    ax.set_xscale("log")
    ax.set_xlabel("N")
    ax.set_ylabel("N x survival probability")
    ax.set_title("survival scaling vs the limit")
    ax.legend(frameon=False, fontsize=9)
    path = f"{base}_kolmogorov.png"
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)
    return {"fig_kolmogorov": path}
