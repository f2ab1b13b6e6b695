"""Confusion-matrix metrics, kappa and ranking scores for a small set of
predictions."""
import numpy as np

from fedmemetic.metrics import classification_report, cohens_kappa, confusion_matrix, evaluate_predictions

# %% Binary case: rows are true classes, columns predictions
cm = np.array([[900, 10],
               [40, 50]])
rep = classification_report(cm)
print("positive class P/R/F1:", rep.precision[1].round(4), rep.recall[1].round(4), rep.f1[1].round(4))
print("accuracy:", rep.accuracy, " kappa:", round(cohens_kappa(cm), 4))

# %% Multiclass scores from a noisy scorer
rng = np.random.default_rng(3)
labels = rng.integers(0, 4, 200)
scores = rng.normal(size=(200, 4)) + 1.5 * np.eye(4)[labels]
report = evaluate_predictions(scores, labels, 4, class_names=["healthy", "rust", "blight", "mildew"])
print(confusion_matrix(scores.argmax(1), labels, 4))
print(report.to_json())
