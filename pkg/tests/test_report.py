from __future__ import annotations

import json
import time

import pytest

from fedcrop.learner import MetricsReport
from fedcrop.report import (SERIES_COLUMNS, ExperimentReport, PhaseTimer, RoundRecord, TimingBreakdown,
                            strip_timing_columns)


def test_timer_is_additive():
    timer = PhaseTimer()
    with timer.phase("init"):
        time.sleep(0.01)
    with timer.phase("train"):
        time.sleep(0.02)
    with timer.excluded():
        time.sleep(0.05)
    with timer.phase("exchange"):
        time.sleep(0.01)
    t = timer.snapshot()
    assert t.is_additive()
    assert t.t_total < 0.05 + 0.04
    assert t.t_train >= 0.02


def test_additivity_tolerance():
    assert TimingBreakdown(1.0, 1.0, 1.0, 1.0, 4.03).is_additive()
    assert not TimingBreakdown(1.0, 1.0, 1.0, 1.0, 4.2).is_additive()
    assert TimingBreakdown(0.001, 0, 0, 0, 0.009).is_additive()


def test_timing_arithmetic():
    a = TimingBreakdown(1, 2, 3, 4, 10)
    b = TimingBreakdown(0.5, 1, 1, 1, 3.5)
    assert (a - b).to_dict() == {"t_init": 0.5, "t_train": 1, "t_exchange": 2, "t_aggregate": 3, "t_total": 6.5}
    assert TimingBreakdown.mean([a, b]).t_init == 0.75
    assert TimingBreakdown.from_dict(a.to_dict()) == a


def make_report():
    rep = ExperimentReport(mode="cfl", seed=3, config={"rounds": 2})
    for r in (1, 2):
        m = MetricsReport(0.5 * r, 0.4, 0.3, 0.2, 1.0 / r)
        rep.rounds.append(RoundRecord(r, 1.0 / r, m, TimingBreakdown(0.1, 0.2, 0.3, 0.4, 1.0)))
    rep.final_metrics = rep.rounds[-1].metrics
    return rep


def test_series_csv_columns_and_length():
    lines = make_report().series_csv().splitlines()
    assert lines[0].split(",") == list(SERIES_COLUMNS)
    assert len(lines) == 3
    assert lines[1].startswith("1,1.0,0.5,")


def test_strip_timing():
    rep = make_report()
    assert strip_timing_columns(rep.series_csv()) == rep.series_csv(include_timing=False)
    assert "t_train" not in rep.to_json(include_timing=False)


def test_write(tmp_path):
    js, sc = make_report().write(tmp_path / "out")
    doc = json.loads(js.read_text())
    assert doc["executed_rounds"] == 2 and len(doc["rounds"]) == 2
    assert sc.read_text() == make_report().series_csv()


def test_json_is_deterministic():
    assert make_report().to_json() == make_report().to_json()


@pytest.mark.parametrize("attr", ["loss_series", "accuracy_series"])
def test_series_length_matches_rounds(attr):
    rep = make_report()
    assert len(getattr(rep, attr)()) == rep.executed_rounds


def test_snapshot_inside_excluded_block_ignores_it():
    timer = PhaseTimer()
    with timer.phase("train"):
        time.sleep(0.01)
    with timer.excluded():
        time.sleep(0.05)
        inside = timer.snapshot()
        with timer.excluded():
            time.sleep(0.01)
    after = timer.snapshot()
    assert inside.t_total < 0.04
    assert after.t_total < 0.04
    assert inside.is_additive() and after.is_additive()
