"""Static figures for run and bench reports (matplotlib, Agg backend)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import matplotlib.tri as mtri  # noqa: E402
import numpy as np  # noqa: E402

from .losses import read_log  # noqa: E402


def loss_curves(log_paths, out_path):
    fig, ax = plt.subplots(figsize=(6, 4))
    for p in log_paths:
        log = read_log(p)
        ax.semilogy(log["epoch"], log["total"], lw=1, label=Path(p).stem.replace("loss_", ""))
    ax.set_xlabel("epoch")
    ax.set_ylabel("total loss")
    ax.legend(fontsize=7, ncol=2)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path


def field_contours(points, fields, out_path, dims=("x", "y"), polygons=None):
    """One filled-contour panel per field over scattered points."""
    tri = mtri.Triangulation(points[:, 0], points[:, 1])
    names = list(fields)
    fig, axes = plt.subplots(1, len(names), figsize=(4.2 * len(names), 3.6), squeeze=False)
    for ax, name in zip(axes[0], names):
        cs = ax.tricontourf(tri, fields[name], levels=40, cmap="viridis")
        fig.colorbar(cs, ax=ax)
        for poly in polygons or []:
            ring = np.vstack([poly, poly[:1]])
            ax.plot(ring[:, 0], ring[:, 1], "w-", lw=0.6)
        ax.set_title(name)
        ax.set_xlabel(dims[0])
        ax.set_ylabel(dims[1])
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path


def scaling_plot(rows, out_path):
    workers = [r["workers"] for r in rows]
    eff = [r["efficiency"] for r in rows]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(workers, eff, "o-", label="measured")
    ax.axhline(1.0, color="grey", ls="--", lw=0.8, label="ideal")
    ax.set_xlabel("workers")
    ax.set_ylabel("weak efficiency" if rows[0]["mode"] == "weak" else "strong efficiency")
    ax.set_xticks(workers)
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path


def subdomain_outlines(specs):
    out = []
    for s in specs:
        if s.polygon is not None:
            out.append(np.asarray(s.polygon))
        else:
            (x0, x1), (y0, y1) = s.cell
            out.append(np.array([[x0, y0], [x1, y0], [x1, y1], [x0, y1]]))
    return out
