from __future__ import annotations

import pandas as pd
import pytest


def test_package_imports():
    import egoworld
    from egoworld import cli

    assert callable(egoworld.main)
    assert cli.build_parser().prog == "egoworld"


def test_ui_models_render_reports():
    pytest.importorskip("PyQt6")
    from PyQt6.QtCore import Qt

    from egoworld.ui.models import KeyValueTableModel, LogTableModel, MetricReportTableModel

    logs = LogTableModel()
    logs.extend([{"ts": 0.0, "level": "WARN", "message": "skipped"}])
    assert logs.rowCount() == 1
    assert logs.data(logs.index(0, 2)) == "skipped"

    pairs = KeyValueTableModel()
    pairs.set_pairs({"frames": 24})
    assert pairs.data(pairs.index(0, 1)) == "24"

    table = MetricReportTableModel()
    table.set_frame(pd.DataFrame({"predictor": ["model"], "latent_mse_mean": [float("nan")]}))
    assert table.columnCount() == 2
    assert table.data(table.index(0, 1)) == ""
    assert table.headerData(0, Qt.Orientation.Horizontal) == "predictor"


def test_main_window_imports():
    pytest.importorskip("PyQt6.QtWidgets")
    from egoworld.ui.main_window import MainWindow

    assert MainWindow.__name__ == "MainWindow"
