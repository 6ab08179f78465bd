"""Accuracy tables in the layout of the classification and prediction results."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import ContractError

MISSING = "—"


@dataclass
class Table:
    header: list[str]
    rows: list[list[str]]

    def __post_init__(self):
        for row in self.rows:
            if len(row) != len(self.header):
                raise ContractError(f"row {row} has {len(row)} fields, header has {len(self.header)}")


def render_accuracy(value: Optional[float]) -> str:
    """``0.9030 -> "90.30"``; a missing value renders as an em dash."""
    if value is None or not np.isfinite(value):
        return MISSING
    return f"{100 * value:.2f}"


def _scale_columns(roi_scales, multi_seed: bool) -> list[str]:
    cols = []
    for r in roi_scales:
        cols.append(f"x{r}")
        if multi_seed:
            cols.append(f"x{r}_sd")
    return cols


def _cell_values(results, multi_seed: bool, **coords) -> list[str]:
    accs = [
        r.accuracy
        for r in results
        if r.status == "ok" and all(getattr(r.cell, k) == v for k, v in coords.items())
    ]
    if not accs:
        return [MISSING, MISSING] if multi_seed else [MISSING]
    mean = float(np.mean(accs))
    if not multi_seed:
        return [render_accuracy(mean)]
    sd = float(np.std(accs, ddof=1)) if len(accs) > 1 else None
    return [render_accuracy(mean), render_accuracy(sd)]


def _table(grid, results, row_axis: str, row_label: str, row_values, fixed: dict) -> Table:
    from .harness import METHOD_LABELS

    multi = len(grid.seeds) > 1
    header = ["Method", row_label] + _scale_columns(grid.roi_scales, multi)
    rows = []
    for method in grid.methods:
        for value in row_values:
            row = [METHOD_LABELS[method], str(value)]
            for r in grid.roi_scales:
                row += _cell_values(results, multi, method=method, roi_scale=r, **{row_axis: value}, **fixed)
            rows.append(row)
    return Table(header, rows)


def classification_table(grid, results) -> Table:
    """Rows method x observation horizon, columns ROI scale, at TTE 0."""
    return _table(grid, results, "horizon", "Obs. Horizon", grid.horizons, {"tte": 0})


def prediction_table(grid, results) -> Table:
    """Rows method x TTE, columns ROI scale, at the prediction horizon."""
    ttes = [t for t in grid.ttes if t > 0]
    return _table(grid, results, "tte", "TTE", ttes, {"horizon": grid.prediction_horizon})


def to_csv(table: Table) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(table.header)
    w.writerows(table.rows)
    return buf.getvalue()


def to_markdown(table: Table) -> str:
    lines = ["| " + " | ".join(table.header) + " |", "|" + "---|" * len(table.header)]
    lines += ["| " + " | ".join(row) + " |" for row in table.rows]
    return "\n".join(lines) + "\n"


def parse_csv(text: str) -> Table:
    rows = list(csv.reader(io.StringIO(text)))
    return Table(rows[0], rows[1:])


def parse_markdown(text: str) -> Table:
    lines = [ln.strip() for ln in text.strip().splitlines()]
    cells = [[c.strip() for c in ln.strip("|").split("|")] for ln in lines if not set(ln) <= set("|-: ")]
    return Table(cells[0], cells[1:])


def write_table(table: Table, path, fmt: Optional[str] = None) -> Path:
    path = Path(path)
    fmt = fmt or ("markdown" if path.suffix == ".md" else "csv")
    if fmt not in ("csv", "markdown"):
        raise ContractError(f"unknown report format {fmt!r}")
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(to_csv(table) if fmt == "csv" else to_markdown(table), encoding="utf-8")
    return path


def emit_report(grid, results: Sequence, out_dir, fmt: str = "csv") -> dict[str, Path]:
    """Write the classification and/or prediction table for ``results``."""
    if not results:
        raise ContractError("no results to report")
    suffix = ".csv" if fmt == "csv" else ".md"
    out_dir = Path(out_dir)
    paths = {}
    if grid.classification_cells():
        paths["classification"] = write_table(classification_table(grid, results), out_dir / f"classification{suffix}", fmt)
    if grid.prediction_cells():
        paths["prediction"] = write_table(prediction_table(grid, results), out_dir / f"prediction{suffix}", fmt)
    return paths
