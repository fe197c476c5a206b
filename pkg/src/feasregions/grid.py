"""Rectangular state grids, possibly embedded as a 2-D slice of a higher-dimensional state."""

from __future__ import annotations

from dataclasses import dataclass
from itertools import product

import numpy as np


class GridError(ValueError):
    pass


def _axis_nodes(lo, hi, n):
    # i*(hi-lo)/(n-1) keeps nodes like 1.8 and 6.0 exact, unlike lo + i*res
    return lo + (np.arange(n) * (hi - lo)) / (n - 1)


@dataclass(frozen=True)
class Axis:
    lo: float
    hi: float
    n: int

    def __post_init__(self):
        if self.n < 2:
            raise GridError("each axis needs at least 2 nodes")
        if not self.hi > self.lo:
            raise GridError("axis upper bound must exceed lower bound")

    @classmethod
    def from_resolution(cls, lo, hi, resolution):
        if resolution <= 0:
            raise GridError("resolution must be positive")
        cells = (hi - lo) / resolution
        n_cells = int(round(cells))
        if abs(cells - n_cells) > 1e-6 * max(1.0, cells):
            raise GridError(f"resolution {resolution} does not divide [{lo}, {hi}]")
        return cls(float(lo), float(hi), n_cells + 1)

    @property
    def resolution(self):
        return (self.hi - self.lo) / (self.n - 1)

    @property
    def nodes(self):
        return _axis_nodes(self.lo, self.hi, self.n)


@dataclass(frozen=True)
class StateGrid:
    """Tensor-product grid over ``dims`` of the state; other components fixed at ``base``."""

    axes: tuple
    dims: tuple
    base: tuple

    def __post_init__(self):
        if len(self.axes) != len(self.dims):
            raise GridError("one state index per axis required")
        if len(set(self.dims)) != len(self.dims):
            raise GridError("duplicate grid dimension")
        if any(d < 0 or d >= len(self.base) for d in self.dims):
            raise GridError("grid dimension outside the state")

    @classmethod
    def regular(cls, bounds, resolution, dims=None, base=None):
        """Grid from ``bounds=[(lo, hi), ...]`` and a scalar or per-axis resolution."""
        res = np.broadcast_to(np.asarray(resolution, dtype=float), (len(bounds),))
        axes = tuple(Axis.from_resolution(lo, hi, r) for (lo, hi), r in zip(bounds, res))
        dims = tuple(range(len(bounds))) if dims is None else tuple(int(d) for d in dims)
        if base is None:
            base = (0.0,) * (max(dims) + 1)
        return cls(axes, dims, tuple(float(b) for b in base))

    @property
    def shape(self):
        return tuple(a.n for a in self.axes)

    @property
    def size(self):
        return int(np.prod(self.shape))

    @property
    def ndim(self):
        return len(self.axes)

    @property
    def state_dim(self):
        return len(self.base)

    @property
    def resolution(self):
        return np.array([a.resolution for a in self.axes])

    def coords(self):
        return [a.nodes for a in self.axes]

    def states(self):
        """All node states, shape (*grid.shape, state_dim)."""
        mesh = np.meshgrid(*self.coords(), indexing="ij")
        out = np.empty(self.shape + (self.state_dim,))
        out[...] = np.asarray(self.base, dtype=float)
        for m, d in zip(mesh, self.dims):
            out[..., d] = m
        return out

    def flat_states(self):
        return self.states().reshape(-1, self.state_dim)

    def same_as(self, other):
        return self.axes == other.axes and self.dims == other.dims and self.base == other.base

    def project(self, x):
        """Grid-axis coordinates of states, shape (..., ndim)."""
        x = np.asarray(x, dtype=float)
        return x[..., list(self.dims)]

    def fractional_index(self, x):
        """Continuous node index per axis; integers at nodes (snapped against round-off)."""
        p = self.project(x)
        lo = np.array([a.lo for a in self.axes])
        span = np.array([a.hi - a.lo for a in self.axes])
        cells = np.array([a.n - 1 for a in self.axes])
        u = (p - lo) / span * cells
        r = np.round(u)
        return np.where(np.abs(u - r) < 1e-9, r, u)

    def contains(self, x, tol=1e-12):
        u = self.fractional_index(x)
        cells = np.array([a.n - 1 for a in self.axes])
        return np.all((u >= -tol) & (u <= cells + tol), axis=-1)

    def nearest_index(self, x):
        """Nearest node multi-index (clipped to the grid), shape (..., ndim) of ints."""
        u = self.fractional_index(x)
        cells = np.array([a.n - 1 for a in self.axes])
        return np.clip(np.rint(u), 0, cells).astype(np.int64)

    def interpolate(self, values, x):
        """Multilinear interpolation of node ``values`` at states ``x``.

        Queries outside the hull are clamped to it. Returns (interpolated, outside_mask).
        """
        values = np.asarray(values, dtype=float)
        if values.shape != self.shape:
            raise GridError(f"values shape {values.shape} != grid shape {self.shape}")
        u = self.fractional_index(x)
        cells = np.array([a.n - 1 for a in self.axes])
        outside = np.any((u < 0) | (u > cells), axis=-1)
        u = np.clip(u, 0, cells)
        i0 = np.minimum(np.floor(u).astype(np.int64), cells - 1)
        t = u - i0
        out = np.zeros(u.shape[:-1])
        for corner in product((0, 1), repeat=self.ndim):
            w = np.ones(u.shape[:-1])
            idx = []
            for ax, c in enumerate(corner):
                w = w * (t[..., ax] if c else 1.0 - t[..., ax])
                idx.append(i0[..., ax] + c)
            # zero weights must not pull in inf/nan from the far corner
            out = out + np.where(w == 0, 0.0, w * values[tuple(idx)])
        return out, outside

    def boundary_band(self, mask):
        """Cells whose 4/6-neighbourhood (one cell) straddles the boundary of ``mask``."""
        mask = np.asarray(mask, dtype=bool)
        band = np.zeros_like(mask)
        for ax in range(mask.ndim):
            diff = mask != np.roll(mask, 1, axis=ax)
            first = [slice(None)] * mask.ndim
            first[ax] = 0
            diff[tuple(first)] = False
            band |= diff
            band |= np.roll(diff, -1, axis=ax)
        return band

    def describe(self):
        return {
            "dims": ",".join(str(d) for d in self.dims),
            "lo": ",".join(repr(a.lo) for a in self.axes),
            "hi": ",".join(repr(a.hi) for a in self.axes),
            "n": ",".join(str(a.n) for a in self.axes),
            "base": ",".join(repr(b) for b in self.base),
        }

    @classmethod
    def from_description(cls, meta):
        try:
            dims = tuple(int(s) for s in meta["dims"].split(","))
            lo = [float(s) for s in meta["lo"].split(",")]
            hi = [float(s) for s in meta["hi"].split(",")]
            n = [int(s) for s in meta["n"].split(",")]
            base = tuple(float(s) for s in meta["base"].split(","))
        except (KeyError, ValueError) as exc:
            raise GridError(f"bad grid metadata: {exc}") from exc
        return cls(tuple(Axis(a, b, c) for a, b, c in zip(lo, hi, n)), dims, base)


def braking_grid(resolution=0.1, d_max=10.0, v_max=10.0):
    return StateGrid.regular([(0.0, d_max), (0.0, v_max)], resolution)


def unicycle_slice(resolution=0.05, extent=3.0, v0=1.0, theta0=np.pi / 2):
    return StateGrid.regular(
        [(-extent, extent), (-extent, extent)],
        resolution,
        dims=(0, 1),
        base=(0.0, 0.0, v0, theta0),
    )
