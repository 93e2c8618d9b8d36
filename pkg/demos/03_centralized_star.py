"""Centralized federated learning: one server, five clients, in-process.

Each client holds a stratified shard of the crop table and trains locally;
the server averages the returned parameters (FedAvg) and evaluates the
result on a held-out set after every round. Links are modelled at 1 ms
latency and 100 Mbit/s so the exchange phase has a realistic cost.

Epochs are cut to 20 to keep the demo short. Pass --full for the default 100.

    python3 demos/03_centralized_star.py [--full]
"""

from __future__ import annotations

import sys

from fedcrop.data import load_crop_dataset
from fedcrop.learner import LearnerConfig
from fedcrop.orchestration import RoundConfig, simulate

epochs = 100 if "--full" in sys.argv else 20
config = RoundConfig(rounds=10, learner=LearnerConfig(epochs=epochs))
report = simulate("star", 5, load_crop_dataset(), config, seed=0)

for r in report.rounds:
    print(f"round {r.round:2d}  loss {r.loss:.4f}  accuracy {r.metrics.accuracy:.4f}")
if report.stopped_early_at:
    print("stopped early: accuracy gain fell below", config.stop_delta)

t = report.timing
print(f"\ntotal {t.t_total:.2f}s = init {t.t_init:.2f} + train {t.t_train:.2f} "
      f"+ exchange {t.t_exchange:.3f} + aggregate {t.t_aggregate:.4f}")
print("additive:", t.is_additive())
