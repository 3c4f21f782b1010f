"""Architecture factors, correlation matrices and front export."""

from __future__ import annotations

import csv
import io
import json
import math
from collections.abc import Iterable, Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .coordinator import OK, EvalRecord, _id_order, read_journal, replay_entries
from .pareto import ParetoArchive, nondominated_sort
from .space import BackboneEncoding, ModularCandidate

FACTOR_NAMES = (
    "depth",
    "width",
    "DC_1",
    "DC_2",
    "DC_3",
    "DC_4",
    "len_2",
    "len_3",
    "len_4",
    "len_5",
    "accuracy",
    "flops",
)
FRONT_COLUMNS = ("id", "spec", "cost", "accuracy", "rank")


class AnalysisError(ValueError):
    pass


@dataclass(frozen=True)
class FactorVector:
    depth: int
    width: int
    dc: tuple[float | None, ...]
    lens: tuple[float, ...]
    accuracy: float
    flops: float

    def values(self) -> list[float]:
        dc = [math.nan if v is None else v for v in self.dc]
        return [float(self.depth), float(self.width), *dc, *self.lens, self.accuracy, self.flops]

    def to_dict(self) -> dict:
        return dict(zip(FACTOR_NAMES, [self.depth, self.width, *self.dc, *self.lens, self.accuracy, self.flops]))


def encoding_factors(enc: BackboneEncoding, accuracy: float = math.nan, flops: float = math.nan) -> FactorVector:
    depth = enc.depth
    positions = [i + 1 for i, c in enumerate(enc.codes) if c == 2]
    dc = tuple(positions[i] / depth if i < len(positions) else None for i in range(4))
    lens = tuple(len(s) / depth for s in enc.stages)
    return FactorVector(depth, enc.base, dc, lens, accuracy, flops)


def extract_factors(rec: EvalRecord) -> FactorVector:
    """Factors of a modular record: DC positions are 1-based block indices over depth."""
    if not isinstance(rec.payload, ModularCandidate):
        raise AnalysisError(f"record {rec.id} is not a modular candidate")
    if rec.status != OK or rec.objective is None:
        raise AnalysisError(f"record {rec.id} has status {rec.status}")
    flops = rec.objective.cost
    return encoding_factors(rec.payload.encoding, rec.objective.accuracy, flops)


@dataclass(frozen=True)
class CorrelationMatrix:
    names: tuple[str, ...]
    values: np.ndarray  # NaN where a factor is undefined or has zero variance
    undefined: tuple[str, ...]

    def get(self, a: str, b: str) -> float:
        return float(self.values[self.names.index(a), self.names.index(b)])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["factor", *self.names])
        for name, row in zip(self.names, self.values):
            w.writerow([name, *("" if math.isnan(v) else repr(float(v)) for v in row)])
        return buf.getvalue()


def pearson(x: Sequence[float], y: Sequence[float]) -> float:
    """Two-pass Pearson coefficient; NaN when either input has zero variance."""
    xa, ya = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
    dx, dy = xa - xa.mean(), ya - ya.mean()
    sxx, syy = float(dx @ dx), float(dy @ dy)
    if sxx == 0.0 or syy == 0.0:
        return math.nan
    return float(np.clip((dx @ dy) / math.sqrt(sxx * syy), -1.0, 1.0))


def correlation_matrix(
    records: Sequence[FactorVector] | np.ndarray, names: Sequence[str] = FACTOR_NAMES
) -> CorrelationMatrix:
    """Pearson matrix over factor columns.

    Missing values (absent DC positions) are handled pairwise. Entries
    involving a column that is constant or has fewer than 3 observations
    over the pair are NaN.
    """
    if isinstance(records, np.ndarray):
        data = np.asarray(records, dtype=float)
    else:
        data = np.array([r.values() for r in records], dtype=float)
    if data.ndim != 2 or data.shape[0] < 3:
        raise AnalysisError("correlation needs at least 3 records")
    if data.shape[1] != len(names):
        raise AnalysisError(f"expected {len(names)} columns, got {data.shape[1]}")
    if np.all(np.isnan(data) | (data == data[0])):
        raise AnalysisError("all records are identical")
    n = data.shape[1]
    out = np.full((n, n), math.nan)
    for i in range(n):
        for j in range(i, n):
            mask = ~(np.isnan(data[:, i]) | np.isnan(data[:, j]))
            if mask.sum() < 3:
                continue
            r = 1.0 if i == j else pearson(data[mask, i], data[mask, j])
            if i == j and np.ptp(data[mask, i]) == 0:
                r = math.nan
            out[i, j] = out[j, i] = r
    undefined = tuple(names[i] for i in range(n) if math.isnan(out[i, i]))
    return CorrelationMatrix(tuple(names), out, undefined)


# --------------------------------------------------------------------------
# Journal access


def journal_records(path: str | Path, stage: str | None = None) -> list[EvalRecord]:
    """Committed records from a journal, latest version per id, in id order.

    ``stage`` keeps only records of that search stage.
    """
    state = replay_entries(read_journal(path))
    recs = sorted(state.records.values(), key=lambda r: _id_order(r.id))
    if stage is not None:
        recs = [r for r in recs if r.stage == stage]
    return recs


def factor_table(records: Iterable[EvalRecord]) -> list[FactorVector]:
    return [
        extract_factors(r)
        for r in records
        if r.status == OK and isinstance(r.payload, ModularCandidate) and r.objective is not None
    ]


def write_correlation_csv(matrix: CorrelationMatrix, path: str | Path):
    Path(path).write_text(matrix.to_csv(), encoding="utf-8", newline="")


# --------------------------------------------------------------------------
# Front export


def front_rows(archive: ParetoArchive | Sequence[EvalRecord], include_dominated: bool = False) -> list[dict]:
    """Front members sorted by cost, tagged with their nondominated rank.

    With ``include_dominated`` every evaluated record is listed and ``rank``
    says which successive front it falls on.
    """
    if isinstance(archive, ParetoArchive):
        history, front = archive.history, archive.front
    else:
        history = [r for r in archive if r.status == OK and r.objective is not None]
        front = nondominated_sort(history)[0] if history else []
    ranks = {}
    for rank, layer in enumerate(nondominated_sort(history)):
        for r in layer:
            ranks[r.id] = rank
    rows = [
        {
            "id": r.id,
            "spec": r.key,
            "cost": float(r.objective.cost),
            "accuracy": float(r.objective.accuracy),
            "rank": ranks.get(r.id, 0),
        }
        for r in (history if include_dominated else front)
    ]
    rows.sort(key=lambda row: (row["cost"], -row["accuracy"], row["id"]))
    return rows


def render_front(rows: list[dict], fmt: str) -> str:
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=FRONT_COLUMNS, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({**row, "cost": repr(row["cost"]), "accuracy": repr(row["accuracy"])})
        return buf.getvalue()
    if fmt == "json":
        return json.dumps(rows, indent=2, sort_keys=True) + "\n"
    raise ValueError(f"unknown format {fmt!r}")


def export_front(
    archive: ParetoArchive | Sequence[EvalRecord], path: str | Path, fmt: str = "csv", include_dominated: bool = False
) -> Path:
    path = Path(path)
    text = render_front(front_rows(archive, include_dominated), fmt)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)
    return path


def read_front(path: str | Path, fmt: str | None = None) -> list[dict]:
    path = Path(path)
    fmt = fmt or path.suffix.lstrip(".")
    text = path.read_text(encoding="utf-8")
    if fmt == "json":
        return json.loads(text)
    return [
        {"id": r["id"], "spec": r["spec"], "cost": float(r["cost"]), "accuracy": float(r["accuracy"]), "rank": int(r["rank"])}
        for r in csv.DictReader(io.StringIO(text))
    ]
