"""Figure rendering for the experiment runners.

Every function takes already-reduced arrays, writes one PNG next to the
delimited output, and returns the path. The Agg backend is forced so runs
work headless; figures are a convenience view of the CSVs, never the
primary record.
"""

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

DPI = 150


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=DPI)
    plt.close(fig)
    return str(path)


def plot_atom_purity(times, by_eta, path):
    """by_eta: eta -> dict with 'P_e' and 'purity' arrays."""
    fig, (ax_pop, ax_pur) = plt.subplots(1, 2, figsize=(9, 3.5))
    for eta, series in by_eta.items():
        ax_pop.plot(times, series["P_e"], label=f"$\\eta$ = {eta:g}")
        ax_pur.plot(times, series["purity"], label=f"$\\eta$ = {eta:g}")
    ax_pop.set_xlabel("t")
    ax_pop.set_ylabel("$P_e$")
    ax_pur.set_xlabel("t")
    ax_pur.set_ylabel("purity")
    ax_pur.set_ylim(0.0, 1.05)
    ax_pop.legend(fontsize=8)
    return _save(fig, path)


def plot_method_compare(times, curves, path):
    """curves: label -> (P_e, stderr or None)."""
    fig, ax = plt.subplots(figsize=(5.5, 3.8))
    for label, (values, stderr) in curves.items():
        if stderr is None:
            ax.plot(times, values, "k-", lw=1.2, label=label)
        else:
            ax.errorbar(
                times, values, yerr=stderr, fmt=".", ms=3,
                errorevery=max(1, len(times) // 40), label=label,
            )
    ax.set_xlabel("t")
    ax.set_ylabel("$P_e$")
    ax.legend(fontsize=8)
    return _save(fig, path)


def plot_deviation(times, deviation, path):
    fig, ax = plt.subplots(figsize=(5.0, 3.5))
    ax.semilogy(times, np.maximum(deviation, 1e-18), "-")
    ax.set_xlabel("t")
    ax.set_ylabel("max |$\\rho$ − $\\rho_{LME}$|")
    return _save(fig, path)


def plot_profile(profile, fit_curve, path):
    """Steady profile with optional fitted wall overlay (sites, values)."""
    sites = np.arange(1, profile.L + 1)
    fig, ax = plt.subplots(figsize=(5.5, 3.8))
    ax.errorbar(sites, profile.n, yerr=profile.stderr, fmt="o", ms=3)
    if fit_curve is not None:
        ax.plot(fit_curve[0], fit_curve[1], "r-", lw=1.2, label="tanh fit")
        ax.legend(fontsize=8)
    ax.set_xlabel("site x")
    ax.set_ylabel("n(x)")
    ax.set_ylim(-0.02, 1.02)
    return _save(fig, path)


def plot_beta_scan(gammas, betas, k, intercept, path):
    gammas = np.asarray(gammas, dtype=float)
    fig, ax = plt.subplots(figsize=(5.0, 3.8))
    ax.plot(gammas, betas, "o")
    grid = np.linspace(0.0, gammas.max() * 1.05, 50)
    ax.plot(grid, k * grid + intercept, "r-", lw=1.0,
            label=f"k = {k:.4g}")
    ax.set_xlabel("$\\gamma$")
    ax.set_ylabel("$\\beta$")
    ax.legend(fontsize=8)
    return _save(fig, path)


def plot_entropy_scan(records_by_label, path):
    """records_by_label: label -> list of EntropyRecord (varying delta)."""
    fig, ax = plt.subplots(figsize=(5.5, 3.8))
    for label, records in records_by_label.items():
        deltas = [r.delta for r in records]
        values = [r.S for r in records]
        errors = [r.stderr for r in records]
        ax.errorbar(deltas, values, yerr=errors, fmt="o-", ms=3, label=label)
    ax.set_xscale("log")
    ax.set_xlabel("$\\Delta$")
    ax.set_ylabel("TAEE")
    ax.legend(fontsize=8)
    return _save(fig, path)
