"""Per-epoch metrics CSV."""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Iterable, List

from esdnet.errors import DataError
from esdnet.training import EpochMetrics

HEADER = EpochMetrics.columns()


def emit_metrics(rows: Iterable[EpochMetrics], path) -> None:
    """Append ``rows`` to ``path``, writing the header first if the file is new or empty."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fresh = not path.exists() or path.stat().st_size == 0
    with open(path, "a", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        if fresh:
            writer.writerow(HEADER)
        for row in rows:
            writer.writerow([row.epoch] + [f"{getattr(row, c):.9g}" for c in HEADER[1:]])


def read_metrics(path) -> List[EpochMetrics]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != HEADER:
            raise DataError(f"{path}: unexpected metrics header {header}")
        return [EpochMetrics(int(r[0]), *(float(v) for v in r[1:])) for r in reader]
