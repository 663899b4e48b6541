"""Fixed phantom benchmark shared by the learning and ablation acceptance checks.

24 phantoms at 64x64 from 12 subjects: the first 16 (8 subjects) form the
training pool, the last 8 (4 subjects) are held out. Slim U-Net, base 16,
at most 50 epochs, all other settings at their defaults.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np
from scipy import ndimage

from slimunet.data import PhantomSpec, generate_phantoms, with_masks
from slimunet.metrics import binarize
from slimunet.training import TrainingConfig, evaluate, train_model

SIZE = 64
MARGIN = 2
SPEC = PhantomSpec(count=24, image_size=SIZE, subjects=12, margin_px=MARGIN, seed=2024)
N_TRAIN = 16
REPEATS = (0, 1, 2)


@lru_cache(maxsize=None)
def phantoms():
    samples, _ = generate_phantoms(SPEC)
    return samples[:N_TRAIN], samples[N_TRAIN:]


def config(loss="djb", seed=0, **overrides) -> TrainingConfig:
    return TrainingConfig(loss=loss, seed=seed, base_filters=16, input_size=SIZE,
                          max_epochs=50, **overrides)


def boundary_ring(tight: np.ndarray, width: int = MARGIN) -> np.ndarray:
    """Foreground pixels within ``width`` (Euclidean) of the background."""
    dist = ndimage.distance_transform_edt(tight.astype(bool))
    return (tight > 0) & (dist <= width)


def boundary_recall(net, samples, cfg) -> float:
    """Percent of tight-region boundary-ring pixels predicted as foreground, per image mean."""
    from slimunet.data import stack
    from slimunet.training import predict

    images, _ = stack(samples)
    probs = predict(net, images)[:, 0]
    recalls = []
    for prob, s in zip(probs, samples):
        ring = boundary_ring(s.tight_mask)
        pred = binarize(prob, cfg.threshold).astype(bool)
        recalls.append(100.0 * np.count_nonzero(pred & ring) / max(np.count_nonzero(ring), 1))
    return float(np.mean(recalls))


@lru_cache(maxsize=None)
def run(loss: str = "djb", seed: int = 0, margin: int = MARGIN):
    """Train once; returns a dict of train/held-out metrics (cached per args)."""
    train_pool, held_out = phantoms()
    train_pool, held_out = with_masks(train_pool, margin), with_masks(held_out, margin)
    cfg = config(loss, seed)
    net, result, _ = train_model(train_pool, cfg)
    return {
        "net": net,
        "config": cfg,
        "epochs": len(result.history),
        "train": evaluate(net, train_pool, cfg).mean,
        "held_out": evaluate(net, held_out, cfg).mean,
        "boundary_recall": boundary_recall(net, held_out, cfg),
    }
