# coding: utf-8

# # Losses and metrics on tiny examples

import numpy as np

from slimunet.losses import LossSpec, bce_loss, composite_loss, dice_loss, jaccard_loss
from slimunet.metrics import confusion, metrics_from_counts

y_t = np.array([1.0, 1.0, 0.0, 0.0])
y_p = np.array([1.0, 0.0, 0.0, 0.0])

print("dice   ", dice_loss(y_p, y_t))
print("jaccard", jaccard_loss(y_p, y_t))
print("bce    ", bce_loss(y_p, y_t))

# The three training objectives are plain sums of those terms.

for kind in ("d", "dj", "djb"):
    value, grad = composite_loss(LossSpec(kind), y_p, y_t)
    print(kind, round(value, 6), np.round(grad, 4))

# Softer predictions: the Jaccard term always sits at or above the Dice term.

rng = np.random.default_rng(0)
for _ in range(3):
    p = rng.random(6)
    t = (rng.random(6) < 0.5).astype(float)
    print(f"dice {dice_loss(p, t):.3f}  jaccard {jaccard_loss(p, t):.3f}")

# Pixel metrics come from confusion counts and are reported in percent.

gt = np.zeros((4, 4), np.uint8)
gt[0] = 1
pred = np.zeros((4, 4), np.uint8)
pred[0, :3] = 1
pred[1, 0] = 1
counts = confusion(pred, gt)
print(counts)
print(metrics_from_counts(counts))
