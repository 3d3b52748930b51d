"""CSV and key=value config I/O used by the command-line interface.

Input tables:

``cells.csv``
    ``cell_id, x, y, population`` followed by one ``cov_<name>`` column per
    covariate.
``membership.csv``
    ``area_id, cell_id, coverage``.
``areas.csv``
    ``area_id, count``.

Floats are written with 10 significant digits so a table written, read
back and written again is byte-identical.
"""

from __future__ import annotations

import csv
import math
import os
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import InputError, StructuralError
from .geometry import DisaggregationProblem

FLOAT_DIGITS = 10
COV_PREFIX = "cov_"


def format_value(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        v = float(v)
        if math.isnan(v):
            return "nan"
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        s = format(v, f".{FLOAT_DIGITS}g")
        return "0" if s == "-0" else s
    return str(v)


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([format_value(v) for v in row])


def write_columns(path, columns: Mapping[str, Sequence]) -> None:
    """Write equal-length columns; the mapping order fixes the column order."""
    names = list(columns)
    lengths = {len(columns[k]) for k in names}
    if len(lengths) > 1:
        raise ValueError("columns differ in length")
    write_csv(path, names, zip(*(columns[k] for k in names)))


def _parse(kind, text, path, line, col):
    text = text.strip()
    try:
        if kind == "int":
            return int(text)
        if kind == "float":
            v = float(text)
            return v
        return text
    except ValueError:
        raise InputError(f"expected {kind}, got {text!r}", path, line, col) from None


def read_table(path, required: Mapping[str, str] | None = None, extra_kind: str | None = None,
               extra_prefix: str = "", optional: Mapping[str, str] | None = None
               ) -> tuple[list[str], dict[str, list], list[int]]:
    """Read a CSV with a header row into typed columns.

    ``required`` maps column names to ``"int"``, ``"float"`` or ``"str"``.
    Columns beginning with ``extra_prefix`` are parsed as ``extra_kind``;
    other unknown columns are an error.  ``optional`` columns are typed
    like ``required`` ones but may be absent.  Returns the header, the columns and
    the 1-based line number of each data row.
    """
    path = Path(path)
    required = dict(required or {})
    optional = dict(optional or {})
    if not path.is_file():
        raise InputError("file not found", path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise InputError("empty file (missing header row)", path, 1) from None
        kinds = {}
        for name in header:
            if name in kinds:
                raise InputError(f"duplicate column {name!r}", path, 1, name)
            if name in required or name in optional:
                kinds[name] = required.get(name) or optional[name]
            elif extra_kind is not None and name.startswith(extra_prefix) and len(name) > len(extra_prefix):
                kinds[name] = extra_kind
            else:
                raise InputError(f"unexpected column {name!r}", path, 1, name)
        for name in required:
            if name not in kinds:
                raise InputError(f"missing column {name!r}", path, 1)
        cols = {name: [] for name in header}
        lines = []
        for row in reader:
            line = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise InputError(f"expected {len(header)} fields, found {len(row)}", path, line)
            for name, text in zip(header, row):
                cols[name].append(_parse(kinds[name], text, path, line, name))
            lines.append(line)
    return header, cols, lines


def _check(cond, message, path, line, column=None):
    if not cond:
        raise InputError(message, path, line, column)


def read_problem(cells_path, membership_path, areas_path) -> DisaggregationProblem:
    """Load and validate the three input tables."""
    _, c, c_lines = read_table(cells_path, {"cell_id": "int", "x": "float", "y": "float",
                                            "population": "float"}, "float", COV_PREFIX)
    seen = {}
    for k, (cid, line) in enumerate(zip(c["cell_id"], c_lines)):
        _check(cid not in seen, f"duplicate cell_id {cid} (first on line {seen.get(cid)})",
               cells_path, line, "cell_id")
        seen[cid] = line
        pop = c["population"][k]
        _check(math.isfinite(pop) and pop >= 0, "population must be finite and nonnegative",
               cells_path, line, "population")
        for name in ("x", "y"):
            _check(math.isfinite(c[name][k]), "coordinate must be finite", cells_path, line, name)
    _check(len(seen) > 0, "no cells", cells_path, 2)
    covariates = {name[len(COV_PREFIX):]: np.array(vals) for name, vals in c.items()
                  if name.startswith(COV_PREFIX)}

    _, m, m_lines = read_table(membership_path, {"area_id": "int", "cell_id": "int", "coverage": "float"})
    pairs = {}
    for aid, cid, cov, line in zip(m["area_id"], m["cell_id"], m["coverage"], m_lines):
        _check(cid in seen, f"unknown cell_id {cid}", membership_path, line, "cell_id")
        _check((aid, cid) not in pairs,
               f"duplicate membership (area {aid}, cell {cid}); first on line {pairs.get((aid, cid))}",
               membership_path, line)
        pairs[(aid, cid)] = line
        _check(0 < cov <= 1, "coverage must lie in (0, 1]", membership_path, line, "coverage")

    _, a, a_lines = read_table(areas_path, {"area_id": "int", "count": "int"})
    area_seen = {}
    for aid, y, line in zip(a["area_id"], a["count"], a_lines):
        _check(aid not in area_seen, f"duplicate area_id {aid}", areas_path, line, "area_id")
        area_seen[aid] = line
        _check(y >= 0, "count must be a nonnegative integer", areas_path, line, "count")
    member_areas = set(m["area_id"])
    for aid, line in area_seen.items():
        _check(aid in member_areas, f"area {aid} has no memberships", areas_path, line, "area_id")
    for aid, line in zip(m["area_id"], m_lines):
        _check(aid in area_seen, f"area {aid} has no count in {Path(areas_path).name}",
               membership_path, line, "area_id")

    try:
        return DisaggregationProblem.from_arrays(
            cell_ids=np.array(c["cell_id"]),
            coords=np.column_stack([c["x"], c["y"]]),
            population=np.array(c["population"]),
            covariates=covariates,
            area_ids=np.array(a["area_id"]),
            counts=np.array(a["count"]),
            membership_area=np.array(m["area_id"]),
            membership_cell=np.array(m["cell_id"]),
            membership_coverage=np.array(m["coverage"]),
        )
    except StructuralError as exc:
        raise InputError(str(exc), membership_path) from exc


def read_targets(path):
    """Target membership table (``area_id, cell_id, coverage``) for re-aggregation."""
    _, m, m_lines = read_table(path, {"area_id": "int", "cell_id": "int", "coverage": "float"})
    if not m_lines:
        raise InputError("no target memberships", path, 2)
    for cov, line in zip(m["coverage"], m_lines):
        _check(0 < cov <= 1, "coverage must lie in (0, 1]", path, line, "coverage")
    return np.array(m["area_id"]), np.array(m["cell_id"]), np.array(m["coverage"])


def write_problem(problem: DisaggregationProblem, directory) -> dict:
    """Write the three input tables for ``problem``; returns their paths."""
    d = Path(directory)
    cells = {"cell_id": problem.cell_ids, "x": problem.coords[:, 0], "y": problem.coords[:, 1],
             "population": problem.population}
    for name in problem.covariate_names:
        cells[COV_PREFIX + name] = problem.covariates[name]
    paths = {"cells": d / "cells.csv", "membership": d / "membership.csv", "areas": d / "areas.csv"}
    write_columns(paths["cells"], cells)
    write_columns(paths["membership"], {
        "area_id": problem.area_ids[problem.member_area],
        "cell_id": problem.cell_ids[problem.member_cell],
        "coverage": problem.coverage,
    })
    write_columns(paths["areas"], {"area_id": problem.area_ids, "count": problem.counts})
    return paths


# -- config ------------------------------------------------------------------

def read_config(path) -> dict[str, tuple[str, int]]:
    """Parse ``key=value`` lines; ``#`` starts a comment.  Values keep their line."""
    path = Path(path)
    if not path.is_file():
        raise InputError("config file not found", path)
    out = {}
    with path.open(encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise InputError("expected key=value", path, line_no)
            key, value = (s.strip() for s in line.split("=", 1))
            if not key:
                raise InputError("empty key", path, line_no)
            if key in out:
                raise InputError(f"duplicate key {key!r} (first on line {out[key][1]})", path, line_no)
            out[key] = (value, line_no)
    return out


def resolve_path(value: str, base: Path | None) -> Path:
    p = Path(os.path.expanduser(value))
    return p if p.is_absolute() or base is None else base / p
