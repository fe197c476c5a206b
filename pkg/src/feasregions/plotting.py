"""Static SVG figures: region rasters, analytic boundary, trajectories with violation markers."""

from __future__ import annotations

import io

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.colors import ListedColormap  # noqa: E402
from matplotlib.patches import Circle, Patch  # noqa: E402

from .csvio import atomic_write_bytes  # noqa: E402

# gray = infeasible, blue = initially feasible only, red = endlessly feasible
LABEL_COLORS = ("#b0b0b0", "#4a78c2", "#d2463c")
LABEL_NAMES = ("infeasible", "initially feasible", "endlessly feasible")

matplotlib.rcParams["svg.hashsalt"] = "feasregions"


class PlotError(ValueError):
    pass


def trajectory_arrays(columns, rows, state_names):
    """(states (T, n), violated (T,)) from parsed trajectory CSV rows."""
    try:
        idx = [columns.index(s) for s in state_names]
        vcol = columns.index("violated")
    except ValueError as exc:
        raise PlotError(f"trajectory file lacks column: {exc}") from None
    states = np.array([[float(r[i]) for i in idx] for r in rows]).reshape(-1, len(idx))
    violated = np.array([r[vcol] == "1" for r in rows], dtype=bool)
    return states, violated


def _finish(fig):
    buf = io.BytesIO()
    fig.savefig(buf, format="svg", metadata={"Date": None})
    plt.close(fig)
    return buf.getvalue()


def region_figure(region=None, trajectories=(), axis_names=("x0", "x1"), dims=(0, 1),
                  braking_a_brk=None, obstacle=None, title=""):
    """SVG bytes. ``trajectories`` holds (states, violated) pairs in full state coordinates.

    ``braking_a_brk`` draws the analytic maximum-EFR boundary d = v**2 / (-2 a_brk);
    ``obstacle`` is ((cy, cz), radius).
    """
    fig, ax = plt.subplots(figsize=(5.0, 4.5))
    if region is not None:
        g = region.grid
        if g.ndim != 2:
            raise PlotError("only 2-D region maps can be drawn")
        c0, c1 = g.coords()
        h0 = (c0[1] - c0[0]) / 2
        h1 = (c1[1] - c1[0]) / 2
        ax.imshow(region.labels.T, origin="lower", cmap=ListedColormap(LABEL_COLORS), vmin=0, vmax=2,
                  extent=(c0[0] - h0, c0[-1] + h0, c1[0] - h1, c1[-1] + h1), aspect="auto",
                  interpolation="nearest")
        dims = g.dims
        ax.legend(handles=[Patch(color=c, label=n) for c, n in zip(LABEL_COLORS, LABEL_NAMES)],
                  loc="upper left", fontsize=7, framealpha=0.8)
    if braking_a_brk is not None:
        top = region.grid.coords()[1][-1] if region is not None else 10.0
        v = np.linspace(0.0, top, 200)
        ax.plot(v**2 / (-2.0 * braking_a_brk), v, color="black", lw=1.2, label="max EFR boundary")
    if obstacle is not None:
        (cy, cz), r = obstacle
        ax.add_patch(Circle((cy, cz), r, facecolor="none", edgecolor="black", lw=1.5))
    for states, violated in trajectories:
        s = np.asarray(states)
        ax.plot(s[:, dims[0]], s[:, dims[1]], color="black", lw=0.9)
        ax.plot(s[0, dims[0]], s[0, dims[1]], "o", color="black", ms=3)
        if np.any(violated):
            ax.plot(s[violated, dims[0]], s[violated, dims[1]], "x", color="yellow", ms=5, mew=1.5)
    ax.set_xlabel(axis_names[0])
    ax.set_ylabel(axis_names[1])
    if title:
        ax.set_title(title, fontsize=9)
    fig.tight_layout()
    return _finish(fig)


def write_figure(path, svg):
    atomic_write_bytes(path, svg)
