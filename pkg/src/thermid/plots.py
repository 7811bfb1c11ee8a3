"""SVG figures drawn from report tables, so every plotted value is also in a CSV."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

LABEL_COLORS = {"good": "tab:green", "bad": "tab:red", "excluded": "tab:gray"}


def _legend(ax, **kw) -> None:
    if ax.get_legend_handles_labels()[0]:
        ax.legend(**kw)


def _save(fig, path: Path) -> None:
    with plt.rc_context({"svg.hashsalt": "thermid", "svg.fonttype": "none"}):
        fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def plot_window_errors(report, path: Path, max_packages: int = 6) -> None:
    """Mean cross-validation error per window, one line per package."""
    pkg = np.array(report.column("window_errors", "package"))
    win = np.array(report.column("window_errors", "window"))
    err = np.array(report.column("window_errors", "mean_err_cores"), dtype=float)
    fig, ax = plt.subplots(figsize=(7, 3.5))
    for p in sorted(set(pkg.tolist()))[:max_packages]:
        sel = pkg == p
        ax.plot(win[sel], np.where(np.isfinite(err[sel]), err[sel], np.nan), marker="o", ms=3,
                label=f"package {p}")
    ax.set_xlabel("window")
    ax.set_ylabel("mean |error| over cores (°C)")
    ax.set_yscale("log")
    _legend(ax, fontsize=7, ncol=2)
    _save(fig, path)


def plot_pole_cond(report, path: Path) -> None:
    """Mean error against log10 cond(R) and against the largest pole modulus."""
    label = np.array(report.column("cells", "label"))
    status = np.array(report.column("cells", "status"))
    err = np.array(report.column("cells", "mean_err"), dtype=float)
    cond = np.array(report.column("cells", "log10_cond_r"), dtype=float)
    pole = np.array(report.column("cells", "max_pole_modulus"), dtype=float)
    ok = (status == "ok") & np.isfinite(err)
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.5), sharey=True)
    for lab, color in LABEL_COLORS.items():
        sel = ok & (label == lab)
        axes[0].scatter(cond[sel], err[sel], s=6, c=color, label=lab)
        axes[1].scatter(pole[sel], err[sel], s=6, c=color, label=lab)
    axes[0].set_xlabel("log10 cond(R)")
    axes[1].set_xlabel("largest pole modulus")
    axes[0].set_ylabel("mean |error| (°C)")
    axes[0].set_yscale("log")
    _legend(axes[1], fontsize=7)
    _save(fig, path)


def plot_ecdf(report, path: Path) -> None:
    """ECDF of the true mean error over windows each classifier calls good."""
    model = np.array(report.column("good_error_ecdf", "model"))
    tau = np.array(report.column("good_error_ecdf", "tau"), dtype=float)
    err = np.array(report.column("good_error_ecdf", "mean_err"), dtype=float)
    prob = np.array(report.column("good_error_ecdf", "ecdf"), dtype=float)
    fig, ax = plt.subplots(figsize=(7, 4))
    seen = []
    for m, t in zip(model.tolist(), tau.tolist()):
        if (m, t) not in seen:
            seen.append((m, t))
    for m, t in seen:
        sel = (model == m) & (tau == t) & np.isfinite(err)
        if sel.any():
            ax.step(err[sel], prob[sel], where="post", label=f"{m} τ={t}",
                    linestyle="-" if t == min(tau) else "--")
    ax.set_xscale("log")
    ax.set_xlabel("mean |error| of windows called good (°C)")
    ax.set_ylabel("ECDF")
    _legend(ax, fontsize=7, ncol=2)
    _save(fig, path)
