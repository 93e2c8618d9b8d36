"""Where does the time go? Federated training against a cloud-only setup.

In the cloud-only setup clients upload their raw rows and the cloud trains
one model on the union and answers prediction requests. The federated setup
ships only parameters. Both report a mean response time per client, and the
two reports can be joined into one comparison.

    python3 demos/05_cloud_vs_federated.py
"""

from __future__ import annotations

import json

from fedcrop.data import load_crop_dataset
from fedcrop.learner import LearnerConfig
from fedcrop.orchestration import RoundConfig, join_reports, run_cloud_baseline, simulate

crop = load_crop_dataset()
config = RoundConfig(rounds=3, learner=LearnerConfig(epochs=20))

federated = simulate("star", 5, crop, config, seed=0)
cloud = run_cloud_baseline(crop, config, 5, seed=0)

joined = join_reports(federated, cloud)
print(json.dumps({k: joined[k] for k in ("response_time_ratio", "response_time_reduction")}, indent=2))
print("federated accuracy", round(federated.final_metrics.accuracy, 4),
      "| cloud accuracy", round(cloud.final_metrics.accuracy, 4))
