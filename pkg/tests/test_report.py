import numpy as np
import pytest

from lanecast.errors import ContractError
from lanecast.harness import CellResult, ExperimentGrid, GridCell, MetricsReport
from lanecast.report import (
    Table,
    classification_table,
    emit_report,
    parse_csv,
    parse_markdown,
    render_accuracy,
    to_csv,
    to_markdown,
)


def test_render_two_decimals():
    assert render_accuracy(0.9030) == "90.30"
    assert render_accuracy(0.91945) == "91.94" or render_accuracy(0.91945) == "91.95"
    assert render_accuracy(1.0) == "100.00"


def test_render_missing():
    assert render_accuracy(None) == "—"
    assert render_accuracy(float("nan")) == "—"


def results_for(grid, fail=()):
    out = []
    for i, cell in enumerate(grid.cells()):
        if cell.key in fail:
            out.append(CellResult(cell, "failed", error="x"))
        else:
            cm = np.diag([10 + i, 20, 30]) + 1
            out.append(CellResult(cell, "ok", MetricsReport(cm)))
    return out


def test_markdown_roundtrips_csv(tmp_path):
    grid = ExperimentGrid(horizons=(20, 30, 40), ttes=(0, 10, 20))
    results = results_for(grid, fail={"disjoint_N30_T0_x3_s0"})
    csv_paths = emit_report(grid, results, tmp_path / "csv", "csv")
    md_paths = emit_report(grid, results, tmp_path / "md", "markdown")
    for key in ("classification", "prediction"):
        a = parse_csv(csv_paths[key].read_text())
        b = parse_markdown(md_paths[key].read_text())
        assert a == b
    table = parse_csv(csv_paths["classification"].read_text())
    assert table.rows[1][4] == "—"


def test_stable_column_order():
    grid = ExperimentGrid(horizons=(20,), ttes=(0,), roi_scales=(4, 1, 2, 3))
    table = classification_table(grid, results_for(grid))
    assert table.header == ["Method", "Obs. Horizon", "x4", "x1", "x2", "x3"]


def test_cell_value_matches_accuracy():
    grid = ExperimentGrid(methods=("disjoint",), horizons=(20,), ttes=(0,), roi_scales=(1,))
    cell = GridCell("disjoint", 20, 0, 1, 0)
    table = classification_table(grid, [CellResult(cell, "ok", MetricsReport(np.array([[9030, 970, 0], [0, 0, 0], [0, 0, 0]])))])
    assert table.rows == [["Disjoint", "20", "90.30"]]


def test_empty_reports_rejected(tmp_path):
    with pytest.raises(ContractError):
        emit_report(ExperimentGrid(), [], tmp_path)


def test_table_row_width_checked():
    with pytest.raises(ContractError):
        Table(["a", "b"], [["1"]])


def test_text_formats():
    t = Table(["Method", "x1"], [["ST", "90.30"]])
    assert to_csv(t) == "Method,x1\nST,90.30\n"
    assert to_markdown(t).splitlines()[0] == "| Method | x1 |"
