# coding: utf-8

# # A short training run and a 2-fold cross-validation
#
# Small settings so the script finishes in seconds on one core:
# 64x64 phantoms, base width 8, a handful of epochs.

import numpy as np

from slimunet.data import PhantomSpec, generate_phantoms, make_folds
from slimunet.training import TrainingConfig, cross_validate, evaluate, format_history, train_model

samples, _ = generate_phantoms(PhantomSpec(count=12, image_size=64, subjects=6, seed=1))
config = TrainingConfig(base_filters=8, input_size=64, max_epochs=6, seed=0)

net, result, (train_set, val_set) = train_model(samples, config)
print(len(train_set), "training images (with flips),", len(val_set), "validation images")
print(format_history(result.history))
print("best epoch", result.best_epoch)

# Scores at the restored best weights.

report = evaluate(net, samples, config)
print({k: round(v, 2) for k, v in report.mean.items()})

# Cross-validation keeps every subject on one side of each split.

plan = make_folds(samples, k=2, seed=0)
cv = cross_validate(samples, plan, TrainingConfig(base_filters=8, input_size=64, max_epochs=3))
for r in cv.reports:
    print("fold", r.fold_id, {k: round(v, 2) for k, v in r.mean.items()})
s = cv.summary
print("mean DC", round(s.mean["DC"], 2), "+-", round(s.std["DC"], 2), "best fold", s.best_fold)
