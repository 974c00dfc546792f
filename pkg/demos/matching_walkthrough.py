"""Walk through how the two set losses assign targets to queries.

Run: python demos/matching_walkthrough.py
"""
import numpy as np

from poq.assignment import align_targets, aligned_loss, decode_predictions, exhaustive_loss, hungarian

# four queries, three classes plus the empty slot (last column)
probs = np.array([
    [0.70, 0.10, 0.10, 0.10],   # confident on class 0
    [0.60, 0.20, 0.10, 0.10],   # also leans to class 0
    [0.10, 0.10, 0.20, 0.60],   # mostly empty
    [0.15, 0.45, 0.30, 0.10],   # leans to class 1
])
logits = np.log(probs)
labels = {0, 2}

print("image labels:", sorted(labels))
print("argmax per query:", probs.argmax(1).tolist(), "(3 = empty)")

assign = align_targets(logits, labels)
print("aligned targets:", assign.tolist())
print(f"aligned loss:    {aligned_loss(logits, labels).item():.4f}")

# the exhaustive loss needs one query per class, so drop the fourth query
print(f"exhaustive loss (first three queries): {exhaustive_loss(logits[:3], labels).item():.4f}")

# the Hungarian solver on its own: rows are queries, columns are targets
cost = -logits[:, sorted(labels)]
rows, cols = hungarian(cost)
print("min-cost matching of labels to queries:", dict(zip(cols.tolist(), rows.tolist())))

pred, scores = decode_predictions(logits)
print("decoded label set:", sorted(pred), "scores:", np.round(scores, 2).tolist())
