"""Per-iteration convergence records and their CSV form."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional

TRACE_COLUMNS = ("phase", "cycle", "grad_norm", "objective", "seconds", "work_units")
TRACE_FORMAT_VERSION = 1

CONVERGED = "converged"
ITERATION_LIMIT = "iteration-limit"
ERROR = "error"


@dataclass
class TraceRecord:
    phase: str
    cycle: int
    grad_norm: float
    objective: float
    seconds: float
    work_units: float


@dataclass
class ConvergenceTrace:
    """Iteration history of one solve.

    ``seconds`` and ``work_units`` are cumulative.  The optional ``initial``
    record describes the starting iterate and is not counted as an iteration.
    """

    seed: Optional[int] = None
    records: list[TraceRecord] = field(default_factory=list)
    initial: Optional[TraceRecord] = None
    outcome: Optional[str] = None
    message: str = ""
    counters: dict = field(default_factory=dict)

    def set_initial(self, grad_norm: float, objective: float) -> TraceRecord:
        self.initial = TraceRecord("init", 0, float(grad_norm), float(objective), 0.0, 0.0)
        return self.initial

    def append(self, phase: str, cycle: int, grad_norm: float, objective: float,
               seconds: float, work_units: float) -> TraceRecord:
        rec = TraceRecord(phase, int(cycle), float(grad_norm), float(objective),
                          float(seconds), float(work_units))
        self.records.append(rec)
        return rec

    def __len__(self) -> int:
        return len(self.records)

    def count(self, *phases: str) -> int:
        if not phases:
            return len(self.records)
        return sum(1 for r in self.records if r.phase in phases)

    @property
    def final_grad_norm(self) -> float:
        if self.records:
            return self.records[-1].grad_norm
        return self.initial.grad_norm if self.initial else float("nan")

    @property
    def seconds(self) -> float:
        return self.records[-1].seconds if self.records else 0.0

    @property
    def work_units(self) -> float:
        return self.records[-1].work_units if self.records else 0.0

    @property
    def converged(self) -> bool:
        return self.outcome == CONVERGED

    def rows(self) -> Iterable[TraceRecord]:
        if self.initial is not None:
            yield self.initial
        yield from self.records

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(TRACE_COLUMNS)
            for rec in self.rows():
                writer.writerow([rec.phase, rec.cycle, repr(rec.grad_norm),
                                 repr(rec.objective), repr(rec.seconds),
                                 repr(rec.work_units)])

    @classmethod
    def from_csv(cls, path) -> "ConvergenceTrace":
        trace = cls()
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if tuple(reader.fieldnames or ()) != TRACE_COLUMNS:
                raise ValueError(f"{path}: unexpected trace columns {reader.fieldnames}")
            for row in reader:
                rec = TraceRecord(row["phase"], int(row["cycle"]),
                                  float(row["grad_norm"]), float(row["objective"]),
                                  float(row["seconds"]), float(row["work_units"]))
                if rec.phase == "init":
                    trace.initial = rec
                else:
                    trace.records.append(rec)
        return trace

    def summary(self) -> dict:
        return {
            "seed": self.seed,
            "outcome": self.outcome,
            "message": self.message,
            "iterations": len(self.records),
            "final_grad_norm": self.final_grad_norm,
            "seconds": self.seconds,
            "work_units": self.work_units,
            "counters": dict(self.counters),
        }
