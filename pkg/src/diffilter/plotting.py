"""Report figures: DET curves per system and bar charts of SIR / SDR / EER.

Uses the Agg backend so it runs headless; every function writes one PNG and
returns its path.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from scipy.stats import norm  # noqa: E402

from .metrics import DetCurve  # noqa: E402

STYLE = {
    "figure.figsize": (5.5, 4.0),
    "figure.dpi": 120,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "font.size": 9,
    "legend.fontsize": 8,
}


def _probit(p):
    # clip so the 0 and 1 sentinels stay on the axis
    return norm.ppf(np.clip(p, 1e-3, 1 - 1e-3))


def det_plot(curves: dict[str, DetCurve], path, title: str = "DET") -> Path:
    ticks = np.array([0.01, 0.02, 0.05, 0.1, 0.2, 0.4, 0.6, 0.8])
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for name, curve in curves.items():
            ax.plot(_probit(curve.far), _probit(curve.frr), label=name, lw=1.2)
        ax.plot(_probit(ticks), _probit(ticks), color="0.6", lw=0.8, ls=":")
        ax.set_xticks(_probit(ticks), [f"{100 * t:g}" for t in ticks])
        ax.set_yticks(_probit(ticks), [f"{100 * t:g}" for t in ticks])
        ax.set_xlabel("false acceptance rate (%)")
        ax.set_ylabel("false rejection rate (%)")
        ax.set_title(title)
        ax.legend(loc="upper right")
        fig.tight_layout()
        path = Path(path)
        fig.savefig(path)
        plt.close(fig)
    return path


def metric_bars(rows: list[dict], key: str, path, ylabel: str) -> Path:
    names = [r["system"] for r in rows if r.get(key) is not None]
    values = [r[key] for r in rows if r.get(key) is not None]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.bar(range(len(values)), values, color="0.35")
        ax.set_xticks(range(len(values)), names, rotation=30, ha="right")
        ax.set_ylabel(ylabel)
        for x, v in enumerate(values):
            ax.annotate(f"{v:.2f}", (x, v), ha="center", va="bottom", fontsize=7)
        fig.tight_layout()
        path = Path(path)
        fig.savefig(path)
        plt.close(fig)
    return path


def loss_curve(traces: dict[str, list[float]], path, ylabel: str = "loss") -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for name, values in traces.items():
            ax.plot(np.arange(len(values)), values, label=name, lw=1.0)
        ax.set_xlabel("step")
        ax.set_ylabel(ylabel)
        if traces:
            ax.legend()
        fig.tight_layout()
        path = Path(path)
        fig.savefig(path)
        plt.close(fig)
    return path
