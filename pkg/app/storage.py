# app/storage.py
"""
Result-tree persistence.

Layout of one experiment directory:
  config.ini          fully-resolved run configuration
  ceiling.csv         accuracy ceilings of the dataset
  reps.csv            one row per repetition (status + final metrics)
  summary.csv         Min / Median / IQR / Max per metric across repetitions
  rep_000/metrics.csv per-epoch (sslgan) or per-generation (cesslgan) trace
  rep_000/run.json    seed, status, timing
  rep_000/generator.json, rep_000/discriminator.json   final checkpoints

Every float goes through FLOAT_FMT (9 significant digits).
"""
from __future__ import annotations

import csv
import json
import math
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

from app.data import FLOAT_FMT
from core.exceptions import ResultsIOError
from core.logging import get_logger

logger = get_logger(__name__)

WRITE_CHECK_NAME = ".write-check"


def format_value(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float):
        return FLOAT_FMT.format(value)
    return str(value)


def rounded(value: float | None) -> float | None:
    """The value as it reads back from a result CSV."""
    if value is None:
        return None
    return float(FLOAT_FMT.format(value))


def parse_value(text: str) -> float | None:
    if text == "":
        return None
    value = float(text)
    return value if not math.isnan(value) else None


class ResultStore:
    """File access for one result directory; all paths are relative to ``root``."""

    def __init__(self, root: str | Path) -> None:
        self.root = Path(root)

    def path(self, *parts: str) -> Path:
        return self.root.joinpath(*parts)

    def rep_dir(self, rep: int) -> Path:
        return self.path(f"rep_{rep:03d}")

    # ── Preconditions ─────────────────────────────────────────────────────────

    def ensure_writable(self) -> None:
        """Create the root and prove a file can be written there."""
        marker = self.path(WRITE_CHECK_NAME)
        try:
            self.root.mkdir(parents=True, exist_ok=True)
            marker.write_text("ok", encoding="utf-8")
            marker.unlink()
        except OSError as exc:
            raise ResultsIOError(f"output directory is not writable: {exc}", path=str(self.root)) from exc

    # ── Writers ───────────────────────────────────────────────────────────────

    def _open_for_write(self, rel: str | Path):
        target = self.path(str(rel))
        try:
            target.parent.mkdir(parents=True, exist_ok=True)
            return target, target.open("w", encoding="utf-8", newline="")
        except OSError as exc:
            raise ResultsIOError(f"cannot open result file: {exc}", path=str(target)) from exc

    def write_csv(self, rel: str | Path, header: Sequence[str],
                  rows: Iterable[Mapping[str, Any]]) -> Path:
        target, handle = self._open_for_write(rel)
        with handle:
            writer = csv.writer(handle, lineterminator="\n")
            writer.writerow(header)
            count = 0
            for row in rows:
                writer.writerow([format_value(row.get(col)) for col in header])
                count += 1
        logger.debug("CSV written", extra={"path": str(target), "rows": count})
        return target

    def write_json(self, rel: str | Path, payload: Mapping[str, Any]) -> Path:
        target, handle = self._open_for_write(rel)
        with handle:
            json.dump(payload, handle, indent=2, sort_keys=True, default=str)
            handle.write("\n")
        return target

    def write_text(self, rel: str | Path, text: str) -> Path:
        target, handle = self._open_for_write(rel)
        with handle:
            handle.write(text)
        return target

    # ── Readers ───────────────────────────────────────────────────────────────

    def read_csv(self, rel: str | Path) -> list[dict[str, str]]:
        target = self.path(str(rel))
        try:
            with target.open(encoding="utf-8", newline="") as handle:
                return list(csv.DictReader(handle))
        except OSError as exc:
            raise ResultsIOError(f"cannot read result file: {exc}", path=str(target)) from exc

    def read_column(self, rel: str | Path, column: str) -> list[float | None]:
        return [parse_value(row[column]) for row in self.read_csv(rel)]
