"""Structural validation of an exported teacher-tap dataset."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tensorfile import TensorFileError, read_tensor

ROW_SUM_TOL = 1e-4


@dataclass
class VerifyReport:
    checked: int = 0
    problems: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.problems

    def __str__(self) -> str:
        status = "ok" if self.ok else f"{len(self.problems)} problem(s)"
        lines = [f"verified {self.checked} utterance(s): {status}"]
        lines.extend(f"  - {p}" for p in self.problems)
        return "\n".join(lines)


def verify_export(dataset_dir) -> VerifyReport:
    """Check shapes, attention row-stochasticity and manifest completeness."""
    root = Path(dataset_dir)
    report = VerifyReport()
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        report.problems.append(f"missing manifest.json under {root}")
        return report
    doc = json.loads(manifest_path.read_text())
    teacher = doc.get("teacher", {})
    layers = [str(l) for l in teacher.get("layers", [])]
    d_model = int(teacher.get("d_model", 0))
    if not layers:
        report.problems.append("manifest declares no teacher layers")

    for u in doc.get("utterances", []):
        uid = u.get("id", "<missing-id>")
        report.checked += 1
        length = int(u.get("teacher_len", 0))
        taps = u.get("taps", {})
        missing = [l for l in layers if l not in taps]
        if missing:
            report.problems.append(f"{uid}: missing taps for layer(s) {missing}")
        for layer, files in taps.items():
            for kind in ("att", "hid"):
                if kind not in files:
                    report.problems.append(f"{uid}: layer {layer} lacks {kind} file")
                    continue
                path = root / files[kind]
                if not path.exists():
                    report.problems.append(f"{uid}: {files[kind]} does not exist")
                    continue
                try:
                    arr = read_tensor(path)
                except TensorFileError as err:
                    report.problems.append(f"{uid}: {err}")
                    continue
                if kind == "att":
                    if arr.shape != (length, length):
                        report.problems.append(
                            f"{uid}: layer {layer} attention shape {arr.shape}, "
                            f"expected ({length}, {length})")
                    elif not np.allclose(arr.sum(axis=1), 1.0, atol=ROW_SUM_TOL):
                        worst = float(np.abs(arr.sum(axis=1) - 1.0).max())
                        report.problems.append(
                            f"{uid}: layer {layer} attention rows deviate from "
                            f"sum 1 by {worst:.2e}")
                else:
                    if arr.shape != (length, d_model):
                        report.problems.append(
                            f"{uid}: layer {layer} hidden shape {arr.shape}, "
                            f"expected ({length}, {d_model})")
    return report
