"""Class-gated metrics on perfect masks with a classifier of fixed accuracy.

Every ascending aggregate equals the classification accuracy and cMAE equals
one minus it.
"""
import numpy as np

from ovcos import engine
from ovcos.metrics import METRIC_LABELS, METRIC_ORDER, GroundTruth, evaluate
from ovcos.recognizer import SamplePrediction

n, num_classes, accuracy = 1000, 10, 0.703
rng = np.random.default_rng(0)
truth = rng.integers(0, num_classes, size=n).tolist()
labels = engine.synthetic_classifier(truth, num_classes, accuracy, seed=1)
gts, preds = [], []
for i in range(n):
    mask = np.zeros((16, 16), bool)
    y, x = rng.integers(0, 10, size=2)
    mask[y : y + 6, x : x + 6] = True
    gts.append(GroundTruth(str(i), mask, truth[i]))
    preds.append(SamplePrediction(str(i), mask.astype(float), labels[i], np.zeros(num_classes), np.zeros(num_classes)))

report = evaluate(preds, gts)
for k in METRIC_ORDER:
    print(f"{METRIC_LABELS[k]:>10}  {report.aggregate[k]:.4f}")
print(f"{'accuracy':>10}  {report.accuracy:.4f}")
