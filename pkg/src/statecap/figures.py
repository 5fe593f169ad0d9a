"""Render benchmark suite results as figures next to the CSV.

One PNG per workload: CPU time and wall time against size, tracing on
versus off.  Multi-size workloads get line plots; single-size ones (the
counter workload) get grouped bars.
"""

from __future__ import annotations

import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

_STYLES = {
    ("cpu_time_s", "off"): dict(color="tab:blue", linestyle="--", label="CPU time, trace off"),
    ("cpu_time_s", "on"): dict(color="tab:blue", linestyle="-", label="CPU time, trace on"),
    ("wall_time_s", "off"): dict(color="tab:red", linestyle="--", label="wall time, trace off"),
    ("wall_time_s", "on"): dict(color="tab:red", linestyle="-", label="wall time, trace on"),
}


def _fmt_size(size: int) -> str:
    if size % (1 << 20) == 0:
        return f"{size >> 20}MiB"
    if size % (1 << 10) == 0:
        return f"{size >> 10}KiB"
    return str(size)


def render_suite_figures(rows: list[dict], out_dir: str) -> list[str]:
    """Write one ``<workload>.png`` per workload; returns the paths."""
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    workloads = []
    for row in rows:
        if row["workload"] not in workloads:
            workloads.append(row["workload"])
    for workload in workloads:
        subset = [r for r in rows if r["workload"] == workload]
        sizes = sorted({int(r["size"]) for r in subset})
        fig, ax = plt.subplots(figsize=(6.0, 3.8))
        if len(sizes) > 1:
            _lines(ax, subset, sizes)
            ax.set_xlabel("file size")
        else:
            _bars(ax, subset)
            ax.set_xlabel(f"counter limit {sizes[0]:,}".replace(",", " "))
        ax.set_ylabel("seconds (median)")
        ax.set_title(f"{workload}: tracing overhead")
        ax.legend(fontsize=8)
        fig.tight_layout()
        path = os.path.join(out_dir, f"{workload}.png")
        fig.savefig(path, dpi=120)
        plt.close(fig)
        paths.append(path)
    return paths


def _lines(ax, subset: list[dict], sizes: list[int]) -> None:
    for metric in ("cpu_time_s", "wall_time_s"):
        for trace in ("off", "on"):
            ys = []
            for size in sizes:
                match = [
                    r for r in subset
                    if int(r["size"]) == size and r["trace"] == trace
                ]
                ys.append(float(match[0][metric]) if match else float("nan"))
            ax.plot(range(len(sizes)), ys, marker="o", markersize=3,
                    **_STYLES[(metric, trace)])
    ax.set_xticks(range(len(sizes)))
    ax.set_xticklabels([_fmt_size(s) for s in sizes])


def _bars(ax, subset: list[dict]) -> None:
    width = 0.2
    for i, (metric, trace) in enumerate(
        [("cpu_time_s", "off"), ("cpu_time_s", "on"),
         ("wall_time_s", "off"), ("wall_time_s", "on")]
    ):
        match = [r for r in subset if r["trace"] == trace]
        value = float(match[0][metric]) if match else 0.0
        style = _STYLES[(metric, trace)]
        ax.bar(i * width, value, width=width * 0.9, color=style["color"],
               alpha=0.6 if trace == "off" else 1.0, label=style["label"])
    ax.set_xticks([])
