"""Composite pseudo-labels for unlabelled images.

Run: python demos/03_label_packages.py

A briefly trained network labels several perturbed copies ("frames") of each
image. Unreliable frames are dropped by normalized entropy, the remaining
soft labels are blended with confidence weights, and the packages are
written to a JSONL store that can regenerate the frames from their seeds.
"""

import tempfile

import torch

from stagedistill import packager as P
from stagedistill.data import make_synthetic
from stagedistill.models import NetworkSpec, build
from stagedistill.training import TrainingSchedule, supervised_loss, train

train_set, val_set = make_synthetic(1200, 64, seed=1)
spec = NetworkSpec("residual_cnn", depth=8, width_multiplier=0.5)
model, _ = train(build(spec, 0), supervised_loss, train_set,
                 TrainingSchedule(epochs=10, decay_epochs=(7,), batch_size=32))

gen = P.FrameGenerator("stochastic_perturbation", {"magnitude": 1.0})
print("generator:", gen.describe())

image = val_set.x[0]
for threshold in (1.0, 0.6):
    pkg = P.build_package(image, model, count=8, gen=gen, seed=7, threshold=threshold)
    print(f"threshold {threshold}: kept {len(pkg)}/8 frames, "
          f"blend top class {pkg.aggregated.top_class} (true {int(val_set.y[0])}), "
          f"uncertainty {pkg.aggregated.uncertainty:.3f}")

# Injected anomalies swap the top class with an unlikely one. They stay as
# peaked as the clean labels, so confidence weighting cannot single them out.
for scheme in ("uniform", "confidence"):
    pkg = P.build_package(image, model, 8, gen, seed=7, weight_scheme=scheme, anomaly_rate=0.25)
    print(f"{scheme:>10} weights with anomalies -> {[round(p, 3) for p in pkg.aggregated.probs]}")

# Training signal: cross-entropy of each frame's logits against the blend.
pkg = P.build_package(image, model, 8, gen, seed=7)
logits = torch.randn(len(pkg), spec.num_classes, dtype=torch.float64)
print("package loss for random logits:", float(P.package_loss(pkg, logits)))

with tempfile.TemporaryDirectory() as tmp:
    store = P.PackageStore(tmp)
    agree = 0
    for i in range(32):
        pkg = P.build_package(val_set.x[i], model, 8, gen, seed=i, source_id=f"val-{i}")
        store.add(pkg)
        agree += int(pkg.aggregated.top_class == int(val_set.y[i]))
    frames = P.regenerate_frames(store.get("val-3"), val_set.x[3], gen)
    print(f"stored {len(store.records())} packages; regenerated {len(frames)} frames of val-3; "
          f"top-class agreement {agree}/32")
