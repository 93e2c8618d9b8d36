"""Train the LSTM classifier on one shard and verify its gradient numerically.

The classifier treats each 7-feature soil/weather row as a single LSTM
timestep, then applies two ReLU dense layers and a softmax over crop labels.
Backpropagation is hand written, so the first thing worth seeing is that it
agrees with central finite differences.

    python3 demos/01_learner_gradcheck.py
"""

from __future__ import annotations

import numpy as np

from fedcrop.data import load_crop_dataset, preprocess, train_test_split
from fedcrop.learner import LearnerConfig, backward, evaluate, forward, init_model, loss, train_local

cfg = LearnerConfig(input_dim=7, num_classes=4, hidden_size=3, dense_sizes=(5, 4))
rng = np.random.default_rng(0)
# Biases start at zero, which can park a ReLU exactly on its kink where a
# finite difference is meaningless. A small jitter moves us off it.
params = init_model(cfg, seed=1)
params = params.with_vector(params.to_vector() + 0.1 * rng.standard_normal(params.size))
X, y = rng.normal(size=(6, 7)), rng.integers(0, 4, 6)

analytic = backward(params, X, y).to_vector()
theta = params.to_vector()
numeric = np.empty_like(theta)
for i in range(theta.size):
    step = np.zeros_like(theta)
    step[i] = 1e-5
    up = loss(forward(params.with_vector(theta + step), X), y)
    down = loss(forward(params.with_vector(theta - step), X), y)
    numeric[i] = (up - down) / 2e-5
rel = np.linalg.norm(analytic - numeric) / (np.linalg.norm(analytic) + np.linalg.norm(numeric))
print(f"{theta.size} parameters, relative gradient error {rel:.2e}")

# Now a real fit: the bundled crop table, 80/20 split, 30 epochs of Adam.
data, _ = preprocess(load_crop_dataset())
train, test = train_test_split(data, 0.2, seed=0)
full = LearnerConfig(num_classes=data.num_classes, epochs=30)
fit = train_local(init_model(full, seed=0), train, full)
print(f"epoch 1 loss {fit.epoch_losses[0]:.3f}, epoch 30 loss {fit.epoch_losses[-1]:.3f}")
print(f"held-out accuracy {evaluate(fit.params, test).accuracy:.3f}")
