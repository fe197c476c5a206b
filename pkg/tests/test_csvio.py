import os

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from feasregions.csvio import (
    ParseError,
    read_field,
    read_region,
    read_trajectory,
    region_to_csv,
    trajectory_to_csv,
    write_field,
    write_region,
)
from feasregions.dynamics import ConstantPolicy, braking, rollout
from feasregions.fields import TabularField
from feasregions.grid import StateGrid, braking_grid, unicycle_slice
from feasregions.regions import RegionMap, max_efr_braking


def test_region_roundtrip_bitwise(tmp_path):
    m = max_efr_braking(braking_grid(0.5))
    m.metadata["note"] = "max efr"
    p = tmp_path / "r.csv"
    write_region(p, m)
    back = read_region(p)
    np.testing.assert_array_equal(back.labels, m.labels)
    assert back.grid.same_as(m.grid)
    write_region(tmp_path / "r2.csv", back)
    assert p.read_bytes() == (tmp_path / "r2.csv").read_bytes()


def test_unicycle_slice_roundtrip(tmp_path):
    g = unicycle_slice(1.0)
    m = RegionMap(g, np.arange(g.size) % 3)
    write_region(tmp_path / "u.csv", m)
    back = read_region(tmp_path / "u.csv")
    assert back.grid.base == g.base and back.grid.dims == (0, 1)


def test_two_by_two_grid(tmp_path):
    g = StateGrid.regular([(0.0, 1.0), (0.0, 1.0)], 1.0)
    text = region_to_csv(RegionMap(g, [0, 1, 2, 2]))
    rows = [r for r in text.splitlines() if not r.startswith("#")]
    assert rows[0] == "axis0,axis1,label" and len(rows) == 5


def test_field_roundtrip(tmp_path):
    g = braking_grid(1.0)
    vals = np.random.default_rng(0).normal(size=g.shape)
    write_field(tmp_path / "f.csv", TabularField(g, vals, name="hjr", params={"gamma": 0.99}))
    F = read_field(tmp_path / "f.csv")
    np.testing.assert_array_equal(F.values, vals)
    assert F.name == "hjr" and F.params["gamma"] == "0.99"


def test_trajectory_violation_flag(tmp_path):
    spec = braking()
    tr = rollout(spec, ConstantPolicy(spec), [0.5, 10.0], 3)
    p = tmp_path / "t.csv"
    p.write_text(trajectory_to_csv(spec, tr.states, tr.actions, meta={"system": "braking"}))
    meta, cols, rows = read_trajectory(p)
    assert meta["meta.system"] == "braking"
    viol = [r[cols.index("violated")] for r in rows]
    assert viol[:2] == ["0", "1"]
    assert rows[-1][cols.index("a")] == ""


@pytest.mark.parametrize("body,line", [
    ("", 1),
    ("# format=region_map\n# bogus\n", 2),
    ("# format=trajectory\nstep,d\n0,1\n", 1),
])
def test_parse_errors_carry_line(tmp_path, body, line):
    p = tmp_path / "bad.csv"
    p.write_text(body)
    with pytest.raises(ParseError) as exc:
        read_region(p)
    assert exc.value.line == line
    assert f"bad.csv:{line}:" in str(exc.value)


def test_bad_label_line(tmp_path):
    text = region_to_csv(max_efr_braking(braking_grid(5.0))).splitlines()
    text[-1] = text[-1][:-1] + "7"
    p = tmp_path / "r.csv"
    p.write_text("\n".join(text) + "\n")
    with pytest.raises(ParseError) as exc:
        read_region(p)
    assert exc.value.line == len(text)


def test_atomic_write_leaves_no_temp(tmp_path):
    write_region(tmp_path / "r.csv", max_efr_braking(braking_grid(2.0)))
    assert os.listdir(tmp_path) == ["r.csv"]


@settings(max_examples=30, deadline=None)
@given(labels=st.lists(st.integers(0, 2), min_size=12, max_size=12), lo=st.floats(-5, 5))
def test_region_text_roundtrip(tmp_path_factory, labels, lo):
    g = StateGrid.regular([(lo, lo + 3.0), (0.0, 0.5)], (1.0, 0.25))
    m = RegionMap(g, np.array(labels), {"seed": 3})
    p = tmp_path_factory.mktemp("rt") / "m.csv"
    write_region(p, m)
    assert region_to_csv(read_region(p)) == p.read_text()
