"""2.5D volumetric inference.

Every voxel is predicted from the axial, coronal and sagittal slices through
it; the three probabilities are averaged and the mean is thresholded with a
strict ``>``, so a tie at the threshold is background.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
import torch

from .nets import predict_prob
from .volumes import PLANES, LongitudinalSample, SlicePlane, Volume3D, padded_extent, put_slice, take_slice

DEFAULT_THRESHOLD = 0.5
DEFAULT_SLICE_BATCH = 16


@dataclass(frozen=True)
class ProbabilityVolume:
    data: np.ndarray
    orientation: str

    def __post_init__(self):
        if self.data.ndim != 3:
            raise ValueError(f"probability volume must be 3D, got {self.data.shape}")
        if self.data.size and (self.data.min() < 0 or self.data.max() > 1):
            raise ValueError("probabilities must lie in [0, 1]")


@dataclass
class Segmentation:
    mask: Volume3D
    prob: ProbabilityVolume
    timing: dict


def _slice_batches(n, batch):
    for start in range(0, n, batch):
        yield range(start, min(start + batch, n))


def predict_orientation(model, sample: LongitudinalSample, plane: SlicePlane | str,
                        batch_size: int = DEFAULT_SLICE_BATCH, write_counter: np.ndarray | None = None
                        ) -> ProbabilityVolume:
    """Slice the sample along ``plane``, predict every slice, reassemble the volume.

    ``write_counter``, if given, is incremented at each voxel written.
    """
    plane = SlicePlane(plane)
    volumes = sample.channel_volumes(model.layout)
    n = sample.shape[plane.axis]
    h, w = take_slice(volumes[0], plane, 0).shape
    ph, pw = padded_extent(h, w, model.downsample_factor)
    out = np.zeros(sample.shape, dtype=np.float64)
    param = next(iter(model.parameters()), None)
    dtype = param.dtype if param is not None else torch.float32
    device = param.device if param is not None else torch.device("cpu")
    with torch.no_grad():
        for idx in _slice_batches(n, batch_size):
            x = np.zeros((len(idx), len(volumes), ph, pw), dtype=np.float64)
            for b, k in enumerate(idx):
                for c, vol in enumerate(volumes):
                    x[b, c, :h, :w] = take_slice(vol, plane, k)
            prob = predict_prob(model, torch.as_tensor(x, dtype=dtype, device=device)).double().cpu().numpy()
            for b, k in enumerate(idx):
                put_slice(out, plane, k, prob[b, 0, :h, :w])
                if write_counter is not None:
                    sl = [slice(None)] * 3
                    sl[plane.axis] = k
                    write_counter[tuple(sl)] += 1
    return ProbabilityVolume(np.clip(out, 0.0, 1.0), plane.value)


def fuse_and_threshold(pa: ProbabilityVolume, pc: ProbabilityVolume, ps: ProbabilityVolume,
                       tau: float = DEFAULT_THRESHOLD) -> tuple[Volume3D, ProbabilityVolume]:
    if not pa.data.shape == pc.data.shape == ps.data.shape:
        raise ValueError(f"shape mismatch: {pa.data.shape}, {pc.data.shape}, {ps.data.shape}")
    # sorted order makes the mean exactly permutation invariant; averaging the
    # offsets from the minimum returns identical inputs unchanged
    lo, mid, hi = np.sort(np.stack([pa.data, pc.data, ps.data]), axis=0)
    fused = lo + ((mid - lo) + (hi - lo)) / 3
    mask = Volume3D((fused > tau).astype(np.uint8), is_mask=True)
    return mask, ProbabilityVolume(np.clip(fused, 0.0, 1.0), "fused")


def segment_subject(model, sample: LongitudinalSample, tau: float = DEFAULT_THRESHOLD,
                    batch_size: int = DEFAULT_SLICE_BATCH) -> Segmentation:
    model.eval()
    per_plane = {}
    timing = {"seconds_per_orientation": {}}
    start = time.perf_counter()
    for plane in PLANES:
        t0 = time.perf_counter()
        per_plane[plane] = predict_orientation(model, sample, plane, batch_size)
        timing["seconds_per_orientation"][plane.value] = time.perf_counter() - t0
    mask, fused = fuse_and_threshold(*(per_plane[p] for p in PLANES), tau=tau)
    timing["seconds_total"] = time.perf_counter() - start
    return Segmentation(mask, fused, timing)
