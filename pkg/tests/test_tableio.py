from __future__ import annotations

import numpy as np
import pytest

from fsdg.tableio import format_cell, read_rows, write_dicts, write_matrix, write_rows


def test_format_cell_types():
    assert format_cell("x") == "x"
    assert format_cell(True) == "True"
    assert format_cell(np.bool_(False)) == "False"
    assert format_cell(7) == "7"
    assert format_cell(np.int64(7)) == "7"
    assert format_cell(0.1) == "0.1"
    assert format_cell(np.float64(1 / 3)) == repr(1 / 3)


def test_round_trip_is_byte_stable(tmp_path):
    path = tmp_path / "t.csv"
    rows = [[0, 0.1, "a"], [1, 1 / 3, "b"], [2, 1e-17, "c"]]
    write_rows(path, ["i", "v", "name"], rows)
    first = path.read_bytes()

    header, cells = read_rows(path)
    # re-write what was read: bytes must not change
    write_rows(path, header, cells)
    assert path.read_bytes() == first
    assert header == ["i", "v", "name"]
    assert [float(r[1]) for r in cells] == [0.1, 1 / 3, 1e-17]


def test_floats_survive_exactly(tmp_path):
    path = tmp_path / "t.csv"
    values = [0.1 + 0.2, np.nextafter(1.0, 2.0), 2**-1074]
    write_rows(path, ["v"], [[v] for v in values])
    _, cells = read_rows(path)
    assert [float(r[0]) for r in cells] == values


def test_write_matrix_layout(tmp_path):
    path = tmp_path / "m.csv"
    write_matrix(path, np.array([[1, 2], [3, 4]]), ["a", "b"])
    header, cells = read_rows(path)
    assert header == ["class", "a", "b"]
    assert cells == [["a", "1", "2"], ["b", "3", "4"]]
    assert path.read_text().endswith("\n")
    assert "\r" not in path.read_text()


def test_write_dicts_keeps_first_row_order(tmp_path):
    path = tmp_path / "d.csv"
    write_dicts(path, [{"b": 1, "a": 2}, {"b": 3, "a": 4}])
    header, cells = read_rows(path)
    assert header == ["b", "a"]
    assert cells == [["1", "2"], ["3", "4"]]


def test_write_dicts_rejects_empty():
    with pytest.raises(ValueError):
        write_dicts("unused.csv", [])
