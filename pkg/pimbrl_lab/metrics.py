"""Metrics rows and the append-only CSV streams that back every performance curve."""

import csv
import logging
import math
from pathlib import Path
from typing import List, Optional, Sequence, Union

from pydantic import BaseModel, Field, field_validator

from pimbrl_lab.errors import MetricsOrderError

logger = logging.getLogger(__name__)

METRICS_FILENAME = "metrics.csv"
MODEL_LOSSES_FILENAME = "model_losses.csv"


class MetricsRow(BaseModel):
    """One evaluation point of a run."""

    real_steps: int = Field(..., ge=0, description="True-environment steps so far")
    episode: int = Field(..., ge=0, description="Completed training episodes")
    eval_mean: Optional[float] = Field(None, description="Mean evaluation return")
    eval_min: Optional[float] = Field(None, description="Lowest evaluation return")
    eval_max: Optional[float] = Field(None, description="Highest evaluation return")
    model_L_D: Optional[float] = Field(None, description="Latest data loss of the model")
    model_L_E: Optional[float] = Field(None, description="Latest physics loss of the model")
    gate_open: bool = Field(False, description="Model passed the accuracy gate")
    fine_tune: bool = Field(False, description="Model-free fine-tuning latched")
    wall_seconds: Optional[float] = Field(None, description="Elapsed wall time, if recorded")

    @field_validator(
        "eval_mean", "eval_min", "eval_max", "model_L_D", "model_L_E", "wall_seconds"
    )
    @classmethod
    def _finite_or_empty(cls, value: Optional[float]) -> Optional[float]:
        if value is not None and not math.isfinite(value):
            raise ValueError("must be finite or empty")
        return value


class ModelLossRow(BaseModel):
    """Model losses after one update cycle."""

    real_steps: int
    data_updates: int
    physics_updates: int
    model_L_D: Optional[float] = None
    model_L_E: Optional[float] = None
    gate_open: bool = False


def _format(value: object) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return str(int(value))
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse(raw: str, annotation: str) -> object:
    if raw == "":
        return None
    if annotation == "bool":
        return raw == "1"
    if annotation == "int":
        return int(raw)
    return float(raw)


class CsvStream:
    """
    Append-only CSV file of pydantic rows: header written once, flushed per row.

    Reopening an existing file continues it, so resumed runs keep one stream.
    """

    def __init__(self, path: Union[str, Path], row_type=MetricsRow, strictly_increasing=True):
        self.path = Path(path)
        self.row_type = row_type
        self.columns = list(row_type.model_fields)
        self.strictly_increasing = strictly_increasing
        self.last_real_steps: Optional[int] = None
        if self.path.exists() and self.path.stat().st_size > 0:
            existing = read_rows(self.path, row_type)
            if existing:
                self.last_real_steps = existing[-1].real_steps

    def append(self, row: BaseModel) -> None:
        if (
            self.strictly_increasing
            and self.last_real_steps is not None
            and row.real_steps <= self.last_real_steps
        ):
            raise MetricsOrderError(
                f"real_steps {row.real_steps} does not follow {self.last_real_steps} in {self.path}"
            )
        self.path.parent.mkdir(parents=True, exist_ok=True)
        write_header = not self.path.exists() or self.path.stat().st_size == 0
        with self.path.open("a", newline="") as stream:
            writer = csv.writer(stream, lineterminator="\n")
            if write_header:
                writer.writerow(self.columns)
            writer.writerow([_format(getattr(row, c)) for c in self.columns])
            stream.flush()
        self.last_real_steps = row.real_steps

    def ensure_header(self) -> None:
        """Create the file with its header line if it does not exist yet."""
        if self.path.exists() and self.path.stat().st_size > 0:
            return
        write_table(self.path, self.columns, [])


def record_metrics(stream: CsvStream, row: MetricsRow) -> None:
    """
    Append one row to a metrics stream.

    Raises:
        MetricsOrderError: If ``row.real_steps`` does not exceed the previous row
    """
    stream.append(row)


def _annotation_names(row_type) -> List[str]:
    names = []
    for info in row_type.model_fields.values():
        text = str(info.annotation)
        names.append("bool" if "bool" in text else "int" if "int" in text else "float")
    return names


def read_rows(path: Union[str, Path], row_type=MetricsRow) -> List:
    """Parse a CSV stream back into rows."""
    annotations = _annotation_names(row_type)
    with Path(path).open(newline="") as stream:
        reader = csv.reader(stream)
        header = next(reader, None)
        if header is None:
            return []
        fields = list(row_type.model_fields)
        if header != fields:
            raise ValueError(f"{path}: unexpected columns {header}")
        return [
            row_type(**{f: _parse(raw, a) for f, raw, a in zip(fields, values, annotations)})
            for values in reader
            if values
        ]


def read_metrics(path: Union[str, Path]) -> List[MetricsRow]:
    return read_rows(path, MetricsRow)


def write_table(path: Union[str, Path], columns: Sequence[str], rows: Sequence[Sequence]) -> Path:
    """Write a plot-ready comma-delimited table with one header line."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as stream:
        writer = csv.writer(stream, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_format(v) for v in row])
    return path


def truncate_after(path: Union[str, Path], real_steps: int, row_type=MetricsRow) -> int:
    """Drop rows recorded past ``real_steps`` (a resumed run rewrites them); returns rows kept."""
    path = Path(path)
    if not path.exists() or path.stat().st_size == 0:
        return 0
    rows = read_rows(path, row_type)
    kept = [row for row in rows if row.real_steps <= real_steps]
    if len(kept) != len(rows):
        logger.info("Discarding %d rows of %s past step %d", len(rows) - len(kept), path, real_steps)
        columns = list(row_type.model_fields)
        write_table(path, columns, [[getattr(row, c) for c in columns] for row in kept])
    return len(kept)
