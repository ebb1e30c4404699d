"""EgoWorld UI: main window (dataset browser, rollout viewer, report table)."""

from __future__ import annotations

import time
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np
import pandas as pd
import torch
from PyQt6.QtCore import Qt
from PyQt6.QtGui import QAction, QFont, QImage, QPixmap, QStandardItem, QStandardItemModel
from PyQt6.QtWidgets import (
    QAbstractItemView, QDockWidget, QDoubleSpinBox, QFileDialog, QFormLayout, QGroupBox, QHBoxLayout, QLabel,
    QListView, QMainWindow, QMessageBox, QSlider, QSpinBox, QSplitter, QStatusBar, QTableView, QTabWidget,
    QToolBar, QVBoxLayout, QWidget,
)

from ..core.checkpoint import read_manifest
from ..core.engine import WorldModel, rollout_frames
from ..core.errors import EgoWorldError
from ..core.evalkit import make_eval_item, psnr
from ..core.formats import DatasetReader
from ..core.models import Trajectory
from ..core.selftests import EgoWorldSelfTests

from .models import KeyValueTableModel, LogTableModel, MetricReportTableModel

FRAME_VIEW_SIZE = 256


def frame_to_pixmap(frame: np.ndarray, size: int = FRAME_VIEW_SIZE) -> QPixmap:
    frame = np.ascontiguousarray(frame, dtype=np.uint8)
    h, w, _ = frame.shape
    image = QImage(frame.data, w, h, 3 * w, QImage.Format.Format_RGB888).copy()
    return QPixmap.fromImage(image).scaled(size, size, Qt.AspectRatioMode.KeepAspectRatio,
                                           Qt.TransformationMode.FastTransformation)


class MainWindow(QMainWindow):
    def __init__(self, dataset: Optional[str] = None, checkpoint: Optional[str] = None,
                 report: Optional[str] = None):
        super().__init__()
        self.setWindowTitle("EgoWorld Viewer")
        self.resize(1200, 720)

        # Session state
        self.reader: Optional[DatasetReader] = None
        self.world: Optional[WorldModel] = None
        self.traj: Optional[Trajectory] = None
        self.predicted: Dict[int, np.ndarray] = {}  # frame index -> predicted frame

        self.setFont(QFont("Consolas", 10))

        self._build_toolbar()
        self._build_central()
        self._build_docks()
        self._build_status()

        self._refresh_actions()
        self._log_info("Ready.", component="ui")

        if dataset:
            self.load_dataset(dataset)
        if checkpoint:
            self.load_checkpoint(checkpoint)
        if report:
            self.load_report(report)

    # ---------------- UI Construction ----------------

    def _build_toolbar(self):
        tb = QToolBar("Main")
        tb.setMovable(False)
        self.addToolBar(tb)

        self.act_open_data = QAction("Open Dataset", self)
        self.act_open_data.triggered.connect(self._open_dataset)

        self.act_open_ckpt = QAction("Open Checkpoint", self)
        self.act_open_ckpt.triggered.connect(self._open_checkpoint)

        self.act_open_report = QAction("Open Report", self)
        self.act_open_report.triggered.connect(self._open_report)

        self.act_rollout = QAction("Rollout", self)
        self.act_rollout.triggered.connect(self.run_rollout)

        self.act_help = QAction("Help", self)
        self.act_help.triggered.connect(self._show_help)

        for a in [self.act_open_data, self.act_open_ckpt, self.act_open_report, self.act_rollout, self.act_help]:
            tb.addAction(a)

    def _build_central(self):
        splitter = QSplitter()
        splitter.setOrientation(Qt.Orientation.Horizontal)

        # Trajectory list
        self.traj_list = QListView()
        self.traj_list.setMinimumWidth(200)
        self.traj_list.setEditTriggers(QAbstractItemView.EditTrigger.NoEditTriggers)
        self.traj_model = QStandardItemModel()
        self.traj_list.setModel(self.traj_model)
        self.traj_list.selectionModel().selectionChanged.connect(self._on_traj_selected)

        # Frames tab
        frames = QWidget()
        layout = QVBoxLayout(frames)
        row = QHBoxLayout()
        self.gt_label, gt_box = self._frame_box("Ground truth")
        self.pred_label, pred_box = self._frame_box("Predicted")
        row.addWidget(gt_box)
        row.addWidget(pred_box)
        layout.addLayout(row)

        self.frame_slider = QSlider(Qt.Orientation.Horizontal)
        self.frame_slider.setRange(0, 0)
        self.frame_slider.valueChanged.connect(self._show_frame)
        self.frame_caption = QLabel("")
        layout.addWidget(self.frame_slider)
        layout.addWidget(self.frame_caption)

        form = QFormLayout()
        self.spn_steps = QSpinBox()
        self.spn_steps.setRange(1, 64)
        self.spn_steps.setValue(8)
        self.spn_step_seconds = QDoubleSpinBox()
        self.spn_step_seconds.setRange(0.25, 16.0)
        self.spn_step_seconds.setSingleStep(0.25)
        self.spn_step_seconds.setValue(1.0)
        self.spn_seed = QSpinBox()
        self.spn_seed.setRange(0, 2 ** 31 - 1)
        form.addRow("Rollout steps", self.spn_steps)
        form.addRow("Step (s)", self.spn_step_seconds)
        form.addRow("Seed", self.spn_seed)
        layout.addLayout(form)
        layout.addStretch(1)

        # Report tab
        self.report_table = QTableView()
        self.report_model = MetricReportTableModel()
        self.report_table.setModel(self.report_model)
        self.report_table.setSelectionBehavior(QAbstractItemView.SelectionBehavior.SelectRows)
        self.report_table.horizontalHeader().setStretchLastSection(True)

        self.tabs = QTabWidget()
        self.tabs.addTab(frames, "Frames")
        self.tabs.addTab(self.report_table, "Report")

        splitter.addWidget(self.traj_list)
        splitter.addWidget(self.tabs)
        splitter.setSizes([220, 980])
        self.setCentralWidget(splitter)

    def _frame_box(self, title: str):
        box = QGroupBox(title)
        lay = QVBoxLayout(box)
        label = QLabel("(none)")
        label.setAlignment(Qt.AlignmentFlag.AlignCenter)
        label.setMinimumSize(FRAME_VIEW_SIZE, FRAME_VIEW_SIZE)
        lay.addWidget(label)
        return label, box

    def _build_docks(self):
        # Bottom dock: Log (hidden by default)
        self.log_dock = QDockWidget("Log", self)
        self.log_dock.setAllowedAreas(Qt.DockWidgetArea.BottomDockWidgetArea)
        self.log_dock.setVisible(False)

        self.log_table = QTableView()
        self.log_model = LogTableModel()
        self.log_table.setModel(self.log_model)
        self.log_table.horizontalHeader().setStretchLastSection(True)
        self.log_table.setWordWrap(False)
        self.log_table.setSelectionBehavior(QAbstractItemView.SelectionBehavior.SelectRows)
        self.log_table.setSelectionMode(QAbstractItemView.SelectionMode.SingleSelection)
        self.log_dock.setWidget(self.log_table)
        self.addDockWidget(Qt.DockWidgetArea.BottomDockWidgetArea, self.log_dock)

        # Right dock: dataset / checkpoint details
        self.info_dock = QDockWidget("Details", self)
        self.info_dock.setAllowedAreas(Qt.DockWidgetArea.RightDockWidgetArea)
        self.info_table = QTableView()
        self.info_model = KeyValueTableModel()
        self.info_table.setModel(self.info_model)
        self.info_table.horizontalHeader().setStretchLastSection(True)
        self.info_dock.setWidget(self.info_table)
        self.addDockWidget(Qt.DockWidgetArea.RightDockWidgetArea, self.info_dock)

        # Help menu with self tests
        self.menu = self.menuBar().addMenu("Help")
        act_selftests = QAction("Run Self Tests", self)
        act_selftests.triggered.connect(self._run_selftests_ui)
        self.menu.addAction(act_selftests)

    def _build_status(self):
        sb = QStatusBar()
        self.setStatusBar(sb)
        self._set_status("No dataset loaded.", state="Idle", warn="")

    # ---------------- Utilities ----------------

    def _set_status(self, summary: str, state: str, warn: str) -> None:
        self.statusBar().showMessage(f"{summary}    |    State: {state}    |    {warn}".strip())

    def _log(self, level: str, message: str, **fields: Any) -> None:
        entry = {"ts": time.time(), "level": level, "message": message}
        entry.update(fields)
        self.log_model.append(entry)
        if level in ("ERROR", "WARN"):
            self.log_dock.setVisible(True)

    def _log_info(self, message: str, **fields: Any) -> None:
        self._log("INFO", message, **fields)

    def _log_warn(self, message: str, **fields: Any) -> None:
        self._log("WARN", message, **fields)

    def _log_error(self, message: str, **fields: Any) -> None:
        self._log("ERROR", message, **fields)

    def _refresh_actions(self):
        self.act_rollout.setEnabled(self.world is not None and self.traj is not None)

    def _details(self) -> Dict[str, Any]:
        out: Dict[str, Any] = {}
        if self.reader is not None:
            info = self.reader.info
            out.update({"dataset": self.reader.path.name, "trajectories": info.count, "fps": info.fps,
                        "resolution": info.resolution, "joints": info.joints, "dataset seed": info.seed})
        if self.world is not None:
            m = self.world.cfg.model
            out.update({"checkpoint step": self.world.step, "context frames": m.context_frames,
                        "conditioning": m.action_conditioning, "codec": m.codec,
                        "schedule": f"{self.world.schedule.n_steps} steps"})
        return out

    # ---------------- Loading ----------------

    def load_dataset(self, path: str) -> bool:
        try:
            reader = DatasetReader(path)
        except EgoWorldError as e:
            self._log_error("Could not open dataset.", path=path, error=str(e))
            QMessageBox.critical(self, "Open Failed", f"Could not open dataset:\n{e}")
            return False
        self.reader = reader
        self.traj = None
        self.predicted = {}
        self.traj_model.clear()
        for i, tid in enumerate(reader.traj_ids()):
            it = QStandardItem(f"#{i}  id {tid}  ({reader.num_frames(i)} frames)")
            it.setEditable(False)
            it.setData(i, Qt.ItemDataRole.UserRole)
            self.traj_model.appendRow(it)
        self.info_model.set_pairs(self._details())
        self._log_info("Loaded dataset.", path=path, trajectories=len(reader))
        self._set_status(f"Dataset: {Path(path).name}", state="Ready", warn="")
        if self.traj_model.rowCount() > 0:
            self.traj_list.setCurrentIndex(self.traj_model.index(0, 0))
        self._refresh_actions()
        return True

    def load_checkpoint(self, path: str) -> bool:
        try:
            world = WorldModel.load(Path(path))
            manifest = read_manifest(Path(path))
        except (EgoWorldError, OSError) as e:
            self._log_error("Could not load checkpoint.", path=path, error=str(e))
            QMessageBox.critical(self, "Open Failed", f"Could not load checkpoint:\n{e}")
            return False
        if self.reader is not None and self.reader.info.resolution != world.cfg.data.resolution:
            self._log_warn("Checkpoint resolution differs from the dataset.",
                           checkpoint=world.cfg.data.resolution, dataset=self.reader.info.resolution)
        self.world = world
        self.info_model.set_pairs(self._details())
        self._log_info("Loaded checkpoint.", path=path, step=world.step, version=manifest.get("version", ""))
        self._refresh_actions()
        return True

    def load_report(self, path: str) -> bool:
        try:
            table = pd.read_csv(path)
        except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
            self._log_error("Could not read report.", path=path, error=str(e))
            QMessageBox.critical(self, "Open Failed", f"Could not read report:\n{e}")
            return False
        self.report_model.set_frame(table)
        self.tabs.setCurrentWidget(self.report_table)
        self._log_info("Loaded report.", path=path, rows=len(table))
        return True

    # ---------------- Actions ----------------

    def _open_dataset(self):
        fn, _ = QFileDialog.getOpenFileName(self, "Open Dataset", "", "Dataset (*.bin);;All Files (*.*)")
        if fn:
            self.load_dataset(fn)

    def _open_checkpoint(self):
        fn = QFileDialog.getExistingDirectory(self, "Select Checkpoint Directory", "")
        if fn:
            self.load_checkpoint(fn)

    def _open_report(self):
        fn, _ = QFileDialog.getOpenFileName(self, "Open Report", "", "CSV (*.csv);;All Files (*.*)")
        if fn:
            self.load_report(fn)

    def run_rollout(self) -> List[int]:
        """Roll out from the frame under the slider; returns the predicted frame indices."""
        if self.world is None or self.traj is None:
            return []
        traj = self.traj
        start = self.frame_slider.value()
        gap = max(1, int(round(self.spn_step_seconds.value() * traj.fps)))
        targets = [t for t in (start + gap * (i + 1) for i in range(self.spn_steps.value())) if t < len(traj)]
        if not targets:
            self._log_warn("No frames left to predict after the selected frame.", frame=start)
            return []
        try:
            item = make_eval_item(traj, self.world, start, targets, "view")
            pred = rollout_frames(self.world, traj.frames[item.context_index], torch.as_tensor(item.actions),
                                  torch.as_tensor(item.timeskips), seed=self.spn_seed.value())
        except EgoWorldError as e:
            self._log_error("Rollout failed.", error=str(e))
            QMessageBox.critical(self, "Rollout", f"Rollout failed:\n{e}")
            return []
        self.predicted = {int(t): pred[i] for i, t in enumerate(targets)}
        scores = [psnr(pred[i], traj.frames[t]) for i, t in enumerate(targets)]
        self._log_info("Rollout done.", start=start, steps=len(targets), mean_psnr=round(float(np.mean(scores)), 3))
        self._set_status(f"Predicted {len(targets)} frames from frame {start}", state="Rollout", warn="")
        self.frame_slider.setValue(targets[0])
        self._show_frame(targets[0])
        return targets

    def _show_help(self):
        QMessageBox.information(
            self,
            "EgoWorld Help",
            "Workflow:\n"
            "1) Open Dataset (dataset.bin from gen-data)\n"
            "2) Open Checkpoint (checkpoints/best from train)\n"
            "3) Pick a trajectory and move the slider to the last context frame\n"
            "4) Rollout (predicted frames appear next to the recorded ones)\n\n"
            "Open Report shows an evaluation CSV in the Report tab."
        )

    def _run_selftests_ui(self):
        ok, report = EgoWorldSelfTests.run()
        if ok:
            QMessageBox.information(self, "Self Tests", "All self tests passed.\n\n" + report)
        else:
            QMessageBox.critical(self, "Self Tests", "One or more self tests failed.\n\n" + report)

    # ---------------- Selection Handling ----------------

    def _on_traj_selected(self):
        idx = self.traj_list.currentIndex()
        if not idx.isValid() or self.reader is None:
            return
        try:
            self.traj = self.reader[int(idx.data(Qt.ItemDataRole.UserRole))]
        except EgoWorldError as e:
            self._log_error("Could not read trajectory.", error=str(e))
            return
        self.predicted = {}
        self.frame_slider.setRange(0, max(0, len(self.traj) - 1))
        self.frame_slider.setValue(min(self.frame_slider.value(), len(self.traj) - 1))
        self._show_frame(self.frame_slider.value())
        self._refresh_actions()

    def _show_frame(self, index: int):
        if self.traj is None or not 0 <= index < len(self.traj):
            return
        self.gt_label.setPixmap(frame_to_pixmap(self.traj.frames[index]))
        if index in self.predicted:
            self.pred_label.setPixmap(frame_to_pixmap(self.predicted[index]))
            caption = f"PSNR {psnr(self.predicted[index], self.traj.frames[index]):.2f} dB"
        else:
            self.pred_label.clear()
            self.pred_label.setText("(no prediction)")
            caption = ""
        t = self.traj.poses[index].timestamp
        self.frame_caption.setText(f"Trajectory {self.traj.traj_id}  frame {index}/{len(self.traj) - 1}  t={t:.2f}s  {caption}")
