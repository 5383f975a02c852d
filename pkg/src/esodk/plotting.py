"""Optional figures for traces and the dimension study (Agg backend, files only)."""

from __future__ import annotations

import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.figsize": (7.0, 4.2),
    "axes.grid": True,
    "grid.alpha": 0.3,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "legend.frameon": False,
    "font.size": 9,
}


def _save(fig, out_dir, name):
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, name)
    fig.savefig(path, dpi=120, bbox_inches="tight")
    plt.close(fig)
    return path


def plot_traces(traces, scenario, out_dir) -> list[str]:
    """Path overlay plus e_Y, heading error, steering and speed against time."""
    ref = scenario.path()
    paths = []
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.plot(ref.X, ref.Y, "k--", lw=1, label="reference")
        for tr in traces:
            ax.plot(tr.column("X"), tr.column("Y"), lw=1.2, label=tr.controller)
        ax.set_xlabel("X [m]")
        ax.set_ylabel("Y [m]")
        ax.legend()
        paths.append(_save(fig, out_dir, f"{scenario.name}_path.png"))

        panels = [("eY", "e_Y [m]"), ("dphi", "heading error [rad]"), ("delta_f", "steering [rad]"),
                  ("Vx", "V_x [m/s]")]
        fig, axes = plt.subplots(len(panels), 1, sharex=True, figsize=(7.0, 8.0))
        for ax, (col, label) in zip(axes, panels):
            for tr in traces:
                ax.plot(tr.column("t"), tr.column(col), lw=1.0, label=tr.controller)
            ax.set_ylabel(label)
        if traces and len(traces[0]):
            t = traces[0].column("t")
            axes[-1].plot(t, [scenario.speed_ref(v) for v in t], "k--", lw=1, label="reference")
        axes[0].legend(ncol=4)
        axes[-1].set_xlabel("t [s]")
        paths.append(_save(fig, out_dir, f"{scenario.name}_signals.png"))
    return paths


def plot_dimstudy(rows, out_dir) -> str:
    """Grouped bars of held-out one-step RMSE per channel and encoder width."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        x = np.arange(3)
        width = 0.8 / max(len(rows), 1)
        for i, r in enumerate(rows):
            ax.bar(x + i * width, r.stats[:, 2], width, label=f"p_phi = {r.phi}")
        ax.set_xticks(x + 0.4 - width / 2)
        ax.set_xticklabels(["V_x", "V_y", "omega_r"])
        ax.set_yscale("log")
        ax.set_ylabel("one-step RMSE")
        ax.legend()
        return _save(fig, out_dir, "dimstudy.png")
