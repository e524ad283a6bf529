"""
SVG figures with their data tables embedded in the SVG metadata
"""
import io
import json
from typing import Dict, Optional

import matplotlib
import numpy as np
import pandas as pd
from matplotlib.figure import Figure

matplotlib.use("Agg")

SVG_RC = {"svg.hashsalt": "macrostate-toolkit", "svg.fonttype": "none"}

TREATED_COLOR = "#1f77b4"
CONTROL_COLOR = "#ff7f0e"
GLOBAL_COLOR = "#7f7f7f"


def render_svg(fig: Figure, data: pd.DataFrame, title: str, provenance: Optional[Dict[str, str]] = None) -> bytes:
    """Serialize a figure without timestamps; the plotted table travels in Description"""
    metadata = {
        "Title": title,
        "Date": None,
        "Creator": "macrostate toolkit",
        "Description": data.to_csv(index=False, lineterminator="\n", float_format="%.12g"),
    }
    if provenance:
        metadata["Source"] = json.dumps(provenance, sort_keys=True)
    buf = io.BytesIO()
    with matplotlib.rc_context(SVG_RC):
        fig.savefig(buf, format="svg", metadata=metadata, bbox_inches="tight")
    return buf.getvalue()


def profile_bars(profile, provenance: Optional[Dict[str, str]] = None) -> bytes:
    """Local mean of every covariate per macrostate beside its global mean"""
    local = profile.local_means
    covariates = list(local.columns)
    K = len(local)
    fig = Figure(figsize=(max(4.0, 2.6 * len(covariates)), 3.6))
    axes = fig.subplots(1, len(covariates), squeeze=False)[0]
    positions = np.arange(K + 1)
    labels = [f"C{k}" for k in range(K)] + ["global"]
    for ax, cov in zip(axes, covariates):
        heights = list(local[cov].to_numpy()) + [profile.global_means[cov]]
        colors = [TREATED_COLOR] * K + [GLOBAL_COLOR]
        ax.bar(positions, heights, color=colors)
        ax.set_xticks(positions, labels)
        ax.set_title(cov)
    fig.suptitle("Local vs global covariate means")

    data = local.copy()
    data.loc["global"] = profile.global_means
    data.index.name = "cluster"
    return render_svg(fig, data.reset_index(), "profile_bars", provenance)


def histogram_by_cluster(
    values: np.ndarray,
    labels: np.ndarray,
    treat: Optional[np.ndarray],
    column: str,
    bins: int = 20,
    provenance: Optional[Dict[str, str]] = None,
) -> bytes:
    """One panel per macrostate, treated and control rows stacked"""
    values = np.asarray(values, dtype=float)
    labels = np.asarray(labels)
    edges = np.histogram_bin_edges(values, bins=bins)
    clusters = np.unique(labels)
    fig = Figure(figsize=(max(4.0, 3.2 * clusters.size), 3.2))
    axes = fig.subplots(1, clusters.size, squeeze=False, sharey=True)[0]

    rows = []
    for ax, k in zip(axes, clusters):
        in_cluster = labels == k
        if treat is None:
            counts, _ = np.histogram(values[in_cluster], bins=edges)
            ax.bar(edges[:-1], counts, width=np.diff(edges), align="edge", color=GLOBAL_COLOR)
            rows += [{"cluster": int(k), "arm": "all", "left": l, "count": int(c)} for l, c in zip(edges[:-1], counts)]
        else:
            treated, _ = np.histogram(values[in_cluster & (treat == 1)], bins=edges)
            control, _ = np.histogram(values[in_cluster & (treat == 0)], bins=edges)
            ax.bar(edges[:-1], control, width=np.diff(edges), align="edge", color=CONTROL_COLOR, label="control")
            ax.bar(edges[:-1], treated, width=np.diff(edges), align="edge", bottom=control,
                   color=TREATED_COLOR, label="treated")
            rows += [{"cluster": int(k), "arm": "treated", "left": l, "count": int(c)} for l, c in zip(edges[:-1], treated)]
            rows += [{"cluster": int(k), "arm": "control", "left": l, "count": int(c)} for l, c in zip(edges[:-1], control)]
        ax.set_title(f"cluster {k}")
        ax.set_xlabel(column)
    if treat is not None:
        axes[0].legend()
    fig.suptitle(f"{column} by macrostate")
    return render_svg(fig, pd.DataFrame(rows), "histogram_by_cluster", provenance)


def treatment_counts(labels: np.ndarray, treat: np.ndarray, provenance: Optional[Dict[str, str]] = None) -> bytes:
    """Treated and control counts per macrostate"""
    labels = np.asarray(labels)
    treat = np.asarray(treat)
    clusters = np.unique(labels)
    treated = np.array([int(((labels == k) & (treat == 1)).sum()) for k in clusters])
    control = np.array([int(((labels == k) & (treat == 0)).sum()) for k in clusters])

    fig = Figure(figsize=(max(4.0, 1.2 * clusters.size + 2), 3.4))
    ax = fig.subplots()
    x = np.arange(clusters.size)
    ax.bar(x - 0.2, treated, width=0.4, color=TREATED_COLOR, label="treated")
    ax.bar(x + 0.2, control, width=0.4, color=CONTROL_COLOR, label="control")
    ax.set_xticks(x, [f"C{k}" for k in clusters])
    ax.set_ylabel("rows")
    ax.legend()
    ax.set_title("Treated and control rows per macrostate")
    data = pd.DataFrame({"cluster": clusters, "treated": treated, "control": control})
    return render_svg(fig, data, "treatment_counts", provenance)


def love_plot(balance_frame: pd.DataFrame, threshold: float = 0.1, provenance: Optional[Dict[str, str]] = None) -> bytes:
    """Absolute SMD per covariate before and after matching"""
    frame = balance_frame.reset_index(drop=True)
    y = np.arange(len(frame))
    fig = Figure(figsize=(5.0, max(2.5, 0.45 * len(frame) + 1.2)))
    ax = fig.subplots()
    ax.scatter(frame["smd_before"].abs(), y, marker="o", color=CONTROL_COLOR, label="before")
    ax.scatter(frame["smd_after"].abs(), y, marker="s", color=TREATED_COLOR, label="after")
    ax.axvline(threshold, color=GLOBAL_COLOR, linestyle="--", linewidth=1)
    ax.set_yticks(y, frame["covariate"].tolist())
    ax.set_xlabel("|standardized mean difference|")
    ax.legend()
    ax.set_title("Covariate balance")
    return render_svg(fig, frame, "love_plot", provenance)


def propensity_distribution(
    scores: np.ndarray, treat: np.ndarray, bins: int = 20, provenance: Optional[Dict[str, str]] = None
) -> bytes:
    """Propensity histograms by arm on shared edges"""
    scores = np.asarray(scores, dtype=float)
    treat = np.asarray(treat)
    edges = np.linspace(0.0, 1.0, bins + 1)
    treated, _ = np.histogram(scores[treat == 1], bins=edges)
    control, _ = np.histogram(scores[treat == 0], bins=edges)

    fig = Figure(figsize=(5.0, 3.4))
    ax = fig.subplots()
    ax.stairs(treated, edges, color=TREATED_COLOR, label="treated")
    ax.stairs(control, edges, color=CONTROL_COLOR, label="control")
    ax.set_xlabel("propensity score")
    ax.set_ylabel("rows")
    ax.legend()
    ax.set_title("Propensity score distribution")
    data = pd.DataFrame({"left": edges[:-1], "right": edges[1:], "treated": treated, "control": control})
    return render_svg(fig, data, "propensity_distribution", provenance)
