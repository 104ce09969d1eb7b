"""Report figures rendered next to the delimited output files.

All plots go through the Agg backend so runs work headless. Each
renderer takes the already-computed payload object and a target path
and writes a single PNG.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

REGIME_ORDER = ("known", "parametric", "unknown")
REGIME_COLORS = {"known": "#4878d0", "parametric": "#ee854a", "unknown": "#d65f5f"}
DPI = 150


def bound_figure(report, path: str) -> str:
    """Grouped bars of the per-arm bound variances under the three regimes."""
    arms = np.arange(len(report.beta_star))
    width = 0.26
    fig, ax = plt.subplots(figsize=(7, 4))
    for i, regime in enumerate(REGIME_ORDER):
        diag = np.diag(report.bounds[regime])
        ax.bar(
            arms + (i - 1) * width,
            diag,
            width,
            label=regime,
            color=REGIME_COLORS[regime],
        )
    ax.set_xticks(arms)
    ax.set_xticklabels([f"arm {t}" for t in arms])
    ax.set_ylabel("bound variance")
    ax.set_title("Efficiency bound diagonal by regime")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=DPI)
    plt.close(fig)
    return path


def decompose_figure(payload: dict, path: str) -> str:
    """Stacked bars splitting the bound gap into its two variance sources."""
    delta0 = np.asarray(payload["delta0"])
    delta1 = np.asarray(payload["delta1"])
    arms = np.arange(delta0.shape[0])
    fig, ax = plt.subplots(figsize=(7, 4))
    d0 = np.diag(delta0)
    d1 = np.diag(delta1)
    ax.bar(arms, d0, 0.6, label="within-stratum moment variation", color="#4878d0")
    ax.bar(
        arms,
        d1,
        0.6,
        bottom=d0,
        label="between-stratum moment variation",
        color="#ee854a",
    )
    ax.set_xticks(arms)
    ax.set_xticklabels([f"arm {t}" for t in arms])
    ax.set_ylabel("gap contribution")
    ax.set_title("Unknown-vs-known bound gap, split by source")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=DPI)
    plt.close(fig)
    return path


def sequence_figure(curve, classification, path: str) -> str:
    """Convergence diagnostics of the parametric bound along the sequence."""
    levels = [p.level for p in curve.points]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 4))

    floor = 1e-18
    ax1.semilogy(
        levels,
        np.maximum(classification.residual_sequence, floor),
        "o-",
        label="span residual",
        color="#4878d0",
    )
    ax1.semilogy(
        levels,
        np.maximum(classification.h_distance_sequence, floor),
        "s-",
        label="middle-term distance sq.",
        color="#ee854a",
    )
    ax1.semilogy(
        levels,
        np.maximum(classification.gap_eig_sequence, floor),
        "^-",
        label="bound gap eigenvalue",
        color="#d65f5f",
    )
    ax1.set_xlabel("level")
    ax1.set_title(f"Attainment criteria (verdict: {classification.verdict})")
    ax1.legend()

    diag_unknown = np.diag(curve.bound_unknown)
    for t in range(len(diag_unknown)):
        ax2.plot(
            levels,
            [p.bound[t, t] for p in curve.points],
            "o-",
            label=f"arm {t}",
        )
        ax2.axhline(diag_unknown[t], linestyle=":", color="gray", linewidth=0.8)
    ax2.set_xlabel("level")
    ax2.set_ylabel("bound variance")
    ax2.set_title("Per-level bound vs unknown-regime ceiling")
    ax2.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=DPI)
    plt.close(fig)
    return path


def simulate_figure(payload: dict, path: str) -> str:
    """Sample-vs-exact comparison for either simulation mode."""
    fig, ax = plt.subplots(figsize=(7, 4))
    if "second_moment_hat" in payload:
        exact = np.diag(np.asarray(payload["bound"]))
        hat = np.diag(np.asarray(payload["second_moment_hat"]))
        se = np.diag(np.asarray(payload["second_moment_se"]))
        arms = np.arange(len(exact))
        ax.bar(arms - 0.15, exact, 0.3, label="exact bound", color="#4878d0")
        ax.bar(arms + 0.15, hat, 0.3, label="sample moment", color="#ee854a")
        ax.errorbar(
            arms + 0.15, hat, yerr=4 * se, fmt="none", ecolor="black", capsize=3
        )
        ax.set_xticks(arms)
        ax.set_xticklabels([f"arm {t}" for t in arms])
        ax.set_title("Influence second moment: sample vs exact (4 SE bars)")
    else:
        refs = payload["references"]
        names = list(refs.keys())
        ax.bar(
            np.arange(len(names)),
            [refs[k] for k in names],
            0.5,
            color=[REGIME_COLORS[k] for k in names],
        )
        ax.axhline(
            payload["contrast_variance"],
            color="black",
            label="plug-in scaled variance",
        )
        ax.axhspan(
            payload["contrast_variance"] - 2 * payload["contrast_variance_se"],
            payload["contrast_variance"] + 2 * payload["contrast_variance_se"],
            color="black",
            alpha=0.12,
        )
        ax.set_xticks(np.arange(len(names)))
        ax.set_xticklabels(names)
        ax.set_title("Plug-in scaled variance vs exact bounds")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=DPI)
    plt.close(fig)
    return path


def validate_figure(payload: dict, path: str) -> str:
    """Per-point minimum assignment probability against the floor."""
    points = payload["points"]
    labels = [p["label"] for p in points]
    mins = [p["min_prob"] for p in points]
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.bar(np.arange(len(points)), mins, 0.6, color="#4878d0")
    ax.axhline(payload["p_min"], color="#d65f5f", label="overlap floor")
    ax.set_xticks(np.arange(len(points)))
    ax.set_xticklabels(labels)
    ax.set_xlabel("support point")
    ax.set_ylabel("min assignment probability")
    ax.set_title("Overlap check by support point")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=DPI)
    plt.close(fig)
    return path
