"""Evaluation reports: (metric, condition, value) rows with a metadata
header, serialized as CSV. Content is fully determined by inputs and seed,
so identical runs produce byte-identical files."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Optional

REPORT_HEADER = ("metric", "condition", "value")
FORMAT_TAG = "crossdense_report_v1"


@dataclass
class EvalReport:
    config_hash: str
    seed: int
    version: str
    baseline_id: Optional[str] = None
    rows: list[tuple[str, str, float]] = field(default_factory=list)

    def add(self, metric: str, condition: str, value: float) -> None:
        self.rows.append((metric, condition, float(value)))

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(f"# {FORMAT_TAG}\n")
        buf.write(f"# config_hash={self.config_hash}\n")
        buf.write(f"# seed={self.seed}\n")
        buf.write(f"# version={self.version}\n")
        if self.baseline_id is not None:
            buf.write(f"# baseline={self.baseline_id}\n")
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(REPORT_HEADER)
        for metric, condition, value in self.rows:
            writer.writerow([metric, condition, repr(value)])
        return buf.getvalue()

    def write(self, path) -> None:
        with open(path, "w", newline="") as f:
            f.write(self.to_csv())
