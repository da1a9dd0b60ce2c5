"""Train the logistic switch on synthetic criteria scores and inspect it.

Each fake instance gets ten criteria scores. Synthesis wins when the tenth
score (does code help?) and the first score are both high, with some label
noise. We train, look at calibration, then hold out one task at a time.

    python3 demos/switch_training.py
"""

import numpy as np

from instsynth.switch import (
    CriteriaVector,
    Decision,
    accuracy,
    calibration_curve,
    calibration_csv,
    decide,
    lodo_csv,
    lodo_eval,
    train_switch,
    zero_shot_decide,
)

rng = np.random.default_rng(7)


def fake_task(n, shift):
    X = rng.random((n, 10))
    logits = 6 * (X[:, 9] - 0.5) + 2 * (X[:, 0] - 0.5) + shift
    y = rng.random(n) < 1 / (1 + np.exp(-logits))
    return [(CriteriaVector(tuple(x.tolist())), bool(label)) for x, label in zip(X, y)]


grouped = {"arithmetic": fake_task(120, 0.5), "puzzles": fake_task(120, 0.0), "trivia": fake_task(120, -1.0)}
samples = [s for task in grouped for s in grouped[task]]

model = train_switch(samples)
print("weights:", np.round(model.weights, 2))
print("bias:", round(model.bias, 2), " converged in", model.training_meta.steps, "steps")
print("training accuracy:", round(accuracy(model, samples), 3))

# how often the zero-shot rule (tenth score >= 0.5) agrees with the trained model
agree = np.mean([decide(model, v)[1] is zero_shot_decide(v) for v, _ in samples])
print("zero-shot agreement:", round(float(agree), 3))

# reliability table
preds = [(decide(model, v)[0], y) for v, y in samples]
print()
print(calibration_csv(calibration_curve(preds, n_bins=5)))

# leave one task out
print(lodo_csv(lodo_eval(grouped)))

v = CriteriaVector((0.9, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5, 0.95))
prob, route = decide(model, v)
print(f"a clearly algorithmic instance: p={prob:.2f} -> {route.value}")
assert route is Decision.SYNTHESIS
