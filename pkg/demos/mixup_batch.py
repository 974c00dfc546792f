"""Show what each mixup mode does to a small batch of label sets.

Run: python demos/mixup_batch.py
"""
import numpy as np

from poq.data import DatasetSpec, generate_split
from poq.mixup import Batch, MixupConfig, apply_mixup

spec = DatasetSpec(train_size=8, val_size=1, test_size=1)
split = generate_split(spec, "train")
rng = np.random.default_rng(0)

for mode in ("none", "hard", "restricted_hard", "soft"):
    cfg = MixupConfig(mode)
    for epoch in (0, 1):
        batch = Batch(split.images[:4], list(split.labels[:4]), spec.num_classes, epoch)
        out = apply_mixup(batch, cfg, rng)
        sets = [sorted(s) for s in out.labels]
        print(f"{mode:>15} epoch {epoch}: {sets}")
    if out.weights is not None:
        print(" " * 17, "soft target rows sum to", np.round(out.weights.sum(1), 2).tolist())
