"""Timing breakdowns and experiment reports (report.json + series.csv)."""

from __future__ import annotations

import csv
import io
import json
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .learner import MetricsReport

PHASES = ("init", "train", "exchange", "aggregate")
SERIES_COLUMNS = ("round", "loss", "accuracy", "precision", "recall", "f1",
                  "t_init", "t_train", "t_exchange", "t_aggregate")
TIMING_COLUMNS = ("t_init", "t_train", "t_exchange", "t_aggregate")


@dataclass
class TimingBreakdown:
    t_init: float = 0.0
    t_train: float = 0.0
    t_exchange: float = 0.0
    t_aggregate: float = 0.0
    t_total: float = 0.0

    @property
    def components(self) -> float:
        return self.t_init + self.t_train + self.t_exchange + self.t_aggregate

    def is_additive(self) -> bool:
        """Total matches the component sum within max(1 %, 10 ms)."""
        return abs(self.t_total - self.components) <= max(0.01 * self.t_total, 0.010)

    def to_dict(self) -> dict:
        return {"t_init": self.t_init, "t_train": self.t_train, "t_exchange": self.t_exchange,
                "t_aggregate": self.t_aggregate, "t_total": self.t_total}

    @classmethod
    def from_dict(cls, d: dict) -> "TimingBreakdown":
        return cls(**{k: float(d[k]) for k in ("t_init", "t_train", "t_exchange", "t_aggregate", "t_total")})

    @classmethod
    def mean(cls, items: list["TimingBreakdown"]) -> "TimingBreakdown":
        if not items:
            return cls()
        n = len(items)
        return cls(*(sum(getattr(t, f) for t in items) / n
                     for f in ("t_init", "t_train", "t_exchange", "t_aggregate", "t_total")))

    def __sub__(self, other: "TimingBreakdown") -> "TimingBreakdown":
        return TimingBreakdown(self.t_init - other.t_init, self.t_train - other.t_train,
                               self.t_exchange - other.t_exchange, self.t_aggregate - other.t_aggregate,
                               self.t_total - other.t_total)


class PhaseTimer:
    """Attributes wall-clock time to phases.

    Time spent inside :meth:`excluded` (evaluation, reporting) counts towards
    neither the phases nor the total.
    """

    def __init__(self):
        self._start = time.perf_counter()
        self._spent = dict.fromkeys(PHASES, 0.0)
        self._excluded = 0.0
        self._excluding_since: float | None = None

    @contextmanager
    def phase(self, name: str):
        t0 = time.perf_counter()
        try:
            yield
        finally:
            self._spent[name] += time.perf_counter() - t0

    @contextmanager
    def excluded(self):
        if self._excluding_since is not None:  # nested: the outer block already covers it
            yield
            return
        t0 = self._excluding_since = time.perf_counter()
        try:
            yield
        finally:
            self._excluded += time.perf_counter() - t0
            self._excluding_since = None

    def snapshot(self) -> TimingBreakdown:
        """Totals so far; an excluded block still in progress is left out too."""
        now = time.perf_counter()
        total = now - self._start - self._excluded
        if self._excluding_since is not None:
            total -= now - self._excluding_since
        s = self._spent
        return TimingBreakdown(s["init"], s["train"], s["exchange"], s["aggregate"], total)


@dataclass
class RoundRecord:
    round: int
    loss: float
    metrics: MetricsReport
    timing: TimingBreakdown = field(default_factory=TimingBreakdown)
    grad_norm_sq: float | None = None
    node_metrics: dict[int, MetricsReport] = field(default_factory=dict)

    def to_dict(self, include_timing: bool = True) -> dict:
        d = {"round": self.round, "loss": self.loss, "metrics": self.metrics.to_dict(),
             "grad_norm_sq": self.grad_norm_sq,
             "node_metrics": {str(k): m.to_dict() for k, m in sorted(self.node_metrics.items())}}
        if include_timing:
            d["timing"] = self.timing.to_dict()
        return d


@dataclass
class ExperimentReport:
    mode: str
    seed: int
    config: dict = field(default_factory=dict)
    rounds: list[RoundRecord] = field(default_factory=list)
    final_metrics: MetricsReport | None = None
    timing: TimingBreakdown = field(default_factory=TimingBreakdown)
    nodes: dict[int, dict] = field(default_factory=dict)
    epoch_losses: list[float] = field(default_factory=list)
    response_times: dict[str, Any] = field(default_factory=dict)
    diagnostics: dict[str, Any] = field(default_factory=dict)
    baselines: dict[str, "ExperimentReport"] = field(default_factory=dict)
    stopped_early_at: int | None = None
    error: str | None = None
    # in-memory results, never serialized
    final_params: Any = field(default=None, repr=False, compare=False)
    node_results: Any = field(default=None, repr=False, compare=False)
    received: Any = field(default=None, repr=False, compare=False)

    @property
    def executed_rounds(self) -> int:
        return len(self.rounds)

    def loss_series(self) -> list[float]:
        return [r.loss for r in self.rounds]

    def accuracy_series(self) -> list[float]:
        return [r.metrics.accuracy for r in self.rounds]

    def to_dict(self, include_timing: bool = True) -> dict:
        d = {
            "mode": self.mode,
            "seed": self.seed,
            "config": self.config,
            "executed_rounds": self.executed_rounds,
            "stopped_early_at": self.stopped_early_at,
            "error": self.error,
            "final_metrics": self.final_metrics.to_dict(counts=True) if self.final_metrics else None,
            "rounds": [r.to_dict(include_timing) for r in self.rounds],
            "epoch_losses": self.epoch_losses,
            "diagnostics": self.diagnostics,
            "nodes": {str(k): _strip_timing(v, include_timing) for k, v in sorted(self.nodes.items())},
            "baselines": {k: b.to_dict(include_timing) for k, b in sorted(self.baselines.items())},
        }
        if include_timing:
            d["timing"] = self.timing.to_dict()
            d["response_times"] = self.response_times
        return d

    def to_json(self, include_timing: bool = True) -> str:
        return json.dumps(self.to_dict(include_timing), indent=2, sort_keys=True)

    def series_csv(self, include_timing: bool = True) -> str:
        cols = [c for c in SERIES_COLUMNS if include_timing or c not in TIMING_COLUMNS]
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(cols)
        for r in self.rounds:
            row = {"round": r.round, "loss": r.loss, **r.metrics.to_dict(), **r.timing.to_dict()}
            w.writerow([repr(row[c]) if isinstance(row[c], float) else row[c] for c in cols])
        return buf.getvalue()

    def write(self, out_dir) -> tuple[Path, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        js, sc = out / "report.json", out / "series.csv"
        js.write_text(self.to_json() + "\n")
        sc.write_text(self.series_csv())
        return js, sc


def _strip_timing(node: dict, include_timing: bool) -> dict:
    if include_timing:
        return node
    return {k: v for k, v in node.items() if k not in ("timing", "round_timing", "response_time")}


def strip_timing_columns(series_csv: str) -> str:
    rows = list(csv.reader(io.StringIO(series_csv)))
    if not rows:
        return ""
    keep = [i for i, c in enumerate(rows[0]) if c not in TIMING_COLUMNS]
    return "\n".join(",".join(r[i] for i in keep) for r in rows) + "\n"
