"""Plain-text artifacts: region maps, tabular fields and trajectories as CSV.

Every file starts with ``# key=value`` metadata lines (sorted keys) followed by a
header row and data rows. Floats are written with ``repr`` so a write/read/write
cycle reproduces the bytes exactly. Files are written atomically.
"""

from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path

import numpy as np

from .fields import TabularField
from .grid import StateGrid
from .regions import RegionMap


class ParseError(ValueError):
    def __init__(self, path, line, msg):
        super().__init__(f"{path}:{line}: {msg}")
        self.line = line


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    s = str(v)
    if "\n" in s:
        raise ValueError("metadata values must be single-line")
    return s


def atomic_write_bytes(path, data):
    """Write to a temp file in the target directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        # mkstemp creates 0600; use the usual umask-derived mode
        mask = os.umask(0)
        os.umask(mask)
        os.chmod(tmp, 0o666 & ~mask)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text):
    atomic_write_bytes(path, text.encode())


def write_json(path, obj):
    atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _header(kind, meta):
    lines = [f"# format={kind}"]
    for k in sorted(meta):
        lines.append(f"# {k}={_fmt(meta[k])}")
    return lines


def _read(path):
    path = Path(path)
    text = path.read_text()
    meta, rows, header = {}, [], None
    for no, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        if line.startswith("#"):
            body = line[1:].strip()
            if "=" not in body:
                raise ParseError(path, no, "metadata line without '='")
            k, v = body.split("=", 1)
            meta[k.strip()] = v
            continue
        if header is None:
            header = line.split(",")
            continue
        parts = line.split(",")
        if len(parts) != len(header):
            raise ParseError(path, no, f"expected {len(header)} fields, got {len(parts)}")
        rows.append((no, parts))
    if header is None:
        raise ParseError(path, 1, "empty file (no header row)")
    return meta, header, rows


def _grid_meta(grid):
    return {f"grid.{k}": v for k, v in grid.describe().items()}


def _grid_from_meta(meta, path):
    try:
        return StateGrid.from_description({k[5:]: v for k, v in meta.items() if k.startswith("grid.")})
    except ValueError as exc:
        raise ParseError(path, 1, str(exc)) from exc


def _node_rows(grid, values, fmt):
    coords = grid.coords()
    idx = np.indices(grid.shape).reshape(grid.ndim, -1).T
    flat = values.reshape(-1)
    out = []
    for row, ix in enumerate(idx):
        c = [repr(float(coords[a][i])) for a, i in enumerate(ix)]
        out.append(",".join(c + [fmt(flat[row])]))
    return out


def region_to_csv(region: RegionMap):
    meta = {f"meta.{k}": v for k, v in region.metadata.items()}
    meta.update(_grid_meta(region.grid))
    lines = _header("region_map", meta)
    lines.append(",".join([f"axis{i}" for i in range(region.grid.ndim)] + ["label"]))
    lines += _node_rows(region.grid, region.labels, lambda v: str(int(v)))
    return "\n".join(lines) + "\n"


def write_region(path, region: RegionMap):
    atomic_write_text(path, region_to_csv(region))


def read_region(path) -> RegionMap:
    meta, header, rows = _read(path)
    if meta.get("format") != "region_map":
        raise ParseError(path, 1, "not a region map file")
    grid = _grid_from_meta(meta, path)
    if len(rows) != grid.size:
        raise ParseError(path, rows[-1][0] if rows else 1, f"expected {grid.size} rows, got {len(rows)}")
    labels = np.empty(grid.size, dtype=np.int8)
    for i, (no, parts) in enumerate(rows):
        try:
            lab = int(parts[-1])
        except ValueError as exc:
            raise ParseError(path, no, f"bad label {parts[-1]!r}") from exc
        if lab not in (0, 1, 2):
            raise ParseError(path, no, f"label {lab} outside {{0, 1, 2}}")
        labels[i] = lab
    md = {k[5:]: v for k, v in meta.items() if k.startswith("meta.")}
    return RegionMap(grid, labels.reshape(grid.shape), md)


def field_to_csv(F: TabularField):
    meta = {f"meta.{k}": v for k, v in F.params.items()}
    meta["meta.name"] = F.name
    meta.update(_grid_meta(F.grid))
    lines = _header("tabular_field", meta)
    lines.append(",".join([f"axis{i}" for i in range(F.grid.ndim)] + ["value"]))
    lines += _node_rows(F.grid, F.values, lambda v: repr(float(v)))
    return "\n".join(lines) + "\n"


def write_field(path, F: TabularField):
    atomic_write_text(path, field_to_csv(F))


def read_field(path) -> TabularField:
    meta, header, rows = _read(path)
    if meta.get("format") != "tabular_field":
        raise ParseError(path, 1, "not a tabular field file")
    grid = _grid_from_meta(meta, path)
    if len(rows) != grid.size:
        raise ParseError(path, 1, f"expected {grid.size} rows, got {len(rows)}")
    vals = np.empty(grid.size)
    for i, (no, parts) in enumerate(rows):
        try:
            vals[i] = float(parts[-1])
        except ValueError as exc:
            raise ParseError(path, no, f"bad value {parts[-1]!r}") from exc
    md = {k[5:]: v for k, v in meta.items() if k.startswith("meta.")}
    name = md.pop("name", "tabular")
    return TabularField(grid, vals.reshape(grid.shape), name=name, params=md)


def trajectory_to_csv(spec, states, actions, g_residual=None, meta=None):
    """One row per real-time step: step, state, action (blank on the last row), h, g_max, violated."""
    from .dynamics import VIOLATION_TOL

    h = np.asarray(spec.h(states))
    lines = _header("trajectory", {f"meta.{k}": v for k, v in (meta or {}).items()})
    cols = ["step"] + list(spec.state_names) + list(spec.action_names) + ["h", "g_max", "violated"]
    lines.append(",".join(cols))
    for t in range(len(states)):
        u = actions[t] if t < len(actions) else [None] * spec.action_dim
        g = "" if g_residual is None or t >= len(g_residual) else repr(float(g_residual[t]))
        row = [str(t)] + [repr(float(v)) for v in states[t]]
        row += ["" if v is None else repr(float(v)) for v in u]
        row += [repr(float(h[t])), g, "1" if h[t] > VIOLATION_TOL else "0"]
        lines.append(",".join(row))
    return "\n".join(lines) + "\n"


def read_trajectory(path):
    """Returns (metadata, columns, rows as list of lists of str)."""
    meta, header, rows = _read(path)
    if meta.get("format") != "trajectory":
        raise ParseError(path, 1, "not a trajectory file")
    return meta, header, [parts for _, parts in rows]
