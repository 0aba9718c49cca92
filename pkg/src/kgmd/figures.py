"""Matplotlib figure rendering for the reporting paths.

Figures are always written to files next to the delimited outputs; nothing
opens a display.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .fields import Field  # noqa: E402


def save_heatmap(path, f: Field, title: str, log_scale: bool = False):
    """|values| over (x, t) for 1-d fields; final-time image for 2-d."""
    fig, ax = plt.subplots(figsize=(7, 4))
    if f.grid.dim == 1:
        data = np.abs(f.values)
        extent = (f.grid.intervals[0][0], f.grid.intervals[0][1],
                  float(f.times[0]), float(f.times[-1]))
        norm = matplotlib.colors.LogNorm() if log_scale else None
        im = ax.imshow(data, origin="lower", aspect="auto", extent=extent,
                       cmap="viridis", norm=norm)
        ax.set_xlabel("x")
        ax.set_ylabel("t")
    else:
        data = np.abs(f.values[-1])
        ia, ib = f.grid.intervals[0], f.grid.intervals[1]
        im = ax.imshow(data.T, origin="lower", aspect="auto",
                       extent=(ia[0], ia[1], ib[0], ib[1]), cmap="viridis")
        ax.set_xlabel("x")
        ax.set_ylabel("y")
        title = f"{title} (t={float(f.times[-1]):g})"
    fig.colorbar(im, ax=ax)
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)


def save_eta_curves(path, curves_by_eps: dict):
    """Limit-model deviation against time, one line per eps and model."""
    fig, axes = plt.subplots(1, 2, figsize=(10, 4))
    for eps, c in sorted(curves_by_eps.items(), reverse=True):
        axes[0].plot(c["times"], c["eta_nlsw"], "o-", label=f"eps={eps:g}")
        axes[1].plot(c["times"], c["eta_nlse"], "s-", label=f"eps={eps:g}")
    for ax, name in zip(axes, ("wave-operator envelope",
                               "limiting Schrodinger")):
        ax.set_xlabel("t")
        ax.set_ylabel("H1 deviation")
        ax.set_yscale("log")
        ax.set_title(name)
        ax.grid(True, alpha=0.3)
        ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)


def save_convergence_fit(path, eps_values, errors, slope: float):
    """Log-log deviation against eps with the fitted slope line."""
    eps_values = np.asarray(eps_values, dtype=np.float64)
    errors = np.asarray(errors, dtype=np.float64)
    fig, ax = plt.subplots(figsize=(5.5, 4.5))
    ax.loglog(eps_values, errors, "ko", ms=8,
              label=f"measured (order {slope:.2f})")
    anchor = errors[0] / eps_values[0] ** slope
    ax.loglog(eps_values, anchor * eps_values ** slope, "k--")
    ax.set_xlabel("eps")
    ax.set_ylabel("H1 deviation")
    ax.grid(True, which="both", alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)


def save_training_curves(path, report_rows, title: str):
    """Loss components and gate shift across iterations."""
    rows = np.asarray([r[:7] for r in report_rows], dtype=np.float64)
    fig, axes = plt.subplots(1, 2, figsize=(10, 4))
    it = rows[:, 0]
    for j, name in ((1, "total"), (2, "residual"), (3, "initial"),
                    (4, "boundary")):
        positive = rows[:, j] > 0
        if positive.any():
            axes[0].semilogy(it[positive], rows[positive, j], label=name)
    axes[0].set_xlabel("iteration")
    axes[0].set_ylabel("loss")
    axes[0].legend()
    axes[0].grid(True, alpha=0.3)
    axes[1].plot(it, rows[:, 5], label="gate shift")
    axes[1].plot(it, rows[:, 6], label="probe correlation")
    axes[1].set_xlabel("iteration")
    axes[1].legend()
    axes[1].grid(True, alpha=0.3)
    fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)
