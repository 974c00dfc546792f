"""Train a small primal-query model for a few epochs and print its metrics.

This uses a reduced dataset so it finishes in about a minute; the full
setup is ``poq train --epochs 30 --out runs/primal``.

Run: python demos/quick_train.py
"""
from poq.data import DatasetSpec, generate
from poq.experiment import ExperimentConfig, class_concentration, query_specialization, train

spec = DatasetSpec(train_size=1000, val_size=200, test_size=200)
cfg = ExperimentConfig(data=spec, epochs=5)
ds = generate(spec)
log = train(cfg, ds)

for epoch, cf1 in enumerate(log.series("val"), 1):
    print(f"epoch {epoch}: val C-F1 {cf1:.3f}")
t = log.test
print(f"test: C-F1 {t.cf1:.3f}  O-F1 {t.of1:.3f}  mAP {t.map:.3f}")

counts, _ = query_specialization(log.model, ds, "test")
conc = class_concentration(counts)
print("share of each class's predictions made by its busiest query:")
print("  ", " ".join(f"{v:.2f}" for v in conc))
