"""Shared builders for CLI and pipeline tests."""

from __future__ import annotations

import numpy as np
import torch

from longiseg.dataio import write_dataset
from longiseg.nets import TINY_BACKBONE, build_model, save_checkpoint
from longiseg.synthgen import make_split
from longiseg.volumes import LongitudinalSample, Volume3D, brain_region, normalize_sample

LESION_LEVEL = 3.0


def blob_sample(idx: int, shape=(16, 16, 16), seed: int = 0) -> LongitudinalSample:
    """Noise-free phantom: FLAIR is 1 in the brain box and LESION_LEVEL on lesion cubes."""
    rng = np.random.default_rng([seed, idx])
    d, h, w = shape
    brain = np.zeros(shape, dtype=bool)
    brain[2:d - 2, 2:h - 2, 2:w - 2] = True
    masks = []
    for _ in range(2):
        m = np.zeros(shape, dtype=np.uint8)
        for _ in range(2):
            z, y, x = rng.integers(3, np.array(shape) - 6)
            m[z:z + 3, y:y + 3, x:x + 3] = 1
        masks.append(m)
    ramp = np.linspace(0.8, 1.2, w)[None, None, :] * np.ones(shape)
    scans = {}
    for tp, m in zip(("ti", "tj"), masks):
        scans[(tp, "T1")] = Volume3D(np.where(brain, ramp, 0.0))
        scans[(tp, "FLAIR")] = Volume3D(np.where(m > 0, LESION_LEVEL, np.where(brain, 1.0, 0.0)))
    return LongitudinalSample(f"sub-{idx:03d}", scans, Volume3D(masks[0], is_mask=True),
                              Volume3D(masks[1], is_mask=True), np.zeros((3, *shape)))


def blob_dataset(root, n_subjects: int = 7, shape=(16, 16, 16), seed: int = 0):
    samples = [blob_sample(i, shape, seed) for i in range(n_subjects)]
    split = make_split([s.subject_id for s in samples], seed)
    write_dataset(root, samples, split)
    return samples, split


def flair_threshold(sample: LongitudinalSample) -> float:
    """Midpoint between normalized brain and lesion FLAIR levels of ``sample``."""
    flair = normalize_sample(sample).scan("ti", "FLAIR").data
    region = brain_region(sample)
    lesion = sample.gt_mask_ti.data > 0
    return 0.5 * (flair[lesion].min() + flair[region & ~lesion].max())


def threshold_stub(variant: str = "static", threshold: float = 1.0, gain: float = 40.0):
    """Tiny model hand-set to output sigmoid(gain * (FLAIR@ti - threshold)).

    Only first-conv channel 0 (centre tap of FLAIR@ti) and head weight 0
    are non-zero; that channel reaches the head through the skip concatenations.
    """
    model = build_model(variant, TINY_BACKBONE)
    with torch.no_grad():
        for p in model.parameters():
            p.zero_()
        first = model.encoder.down.first_conv
        first.weight[0, 1, 1, 1] = 1.0
        head = model.decoder.head
        head.weight[0, 0, 0, 0] = gain
        head.bias[0] = -gain * threshold
    model.eval()
    return model


def write_stub_checkpoint(path, threshold: float, variant: str = "static"):
    model = threshold_stub(variant, threshold)
    save_checkpoint(path, model, None, epoch=0, step=0, extra={"stub": True})
    return path
