"""Volume and slice data model.

Axis convention, used everywhere in the package: volumes are (D, H, W);
the axial plane fixes D, the coronal plane fixes H, the sagittal plane
fixes W.

Channel layouts for network input stacks:

* static:       [T1@t_i, FLAIR@t_i]
* longitudinal: [T1@t_i, FLAIR@t_i, T1@t_j, FLAIR@t_j]
"""

from __future__ import annotations

import enum
import gzip
import io
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

MODALITIES = ("T1", "FLAIR")
TIMEPOINTS = ("ti", "tj")


class SlicePlane(str, enum.Enum):
    AXIAL = "axial"
    CORONAL = "coronal"
    SAGITTAL = "sagittal"

    @property
    def axis(self) -> int:
        return _PLANE_AXIS[self]


_PLANE_AXIS = {SlicePlane.AXIAL: 0, SlicePlane.CORONAL: 1, SlicePlane.SAGITTAL: 2}
PLANES = (SlicePlane.AXIAL, SlicePlane.CORONAL, SlicePlane.SAGITTAL)


class Layout(str, enum.Enum):
    STATIC = "static"
    LONGITUDINAL = "longitudinal"

    @property
    def channel_order(self) -> tuple[str, ...]:
        if self is Layout.STATIC:
            return ("T1@ti", "FLAIR@ti")
        return ("T1@ti", "FLAIR@ti", "T1@tj", "FLAIR@tj")

    @property
    def n_channels(self) -> int:
        return len(self.channel_order)


@dataclass(frozen=True)
class Volume3D:
    """A scalar 3D grid: one modality of one scan, or a binary mask."""

    data: np.ndarray
    spacing: tuple[float, float, float] | None = None
    is_mask: bool = False

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise ValueError(f"Volume3D needs a 3D array, got shape {data.shape}")
        if min(data.shape) < 1:
            raise ValueError(f"every axis must have length >= 1, got {data.shape}")
        if self.is_mask:
            if not np.isin(data, (0, 1)).all():
                raise ValueError("mask volume must contain only 0 and 1")
            data = data.astype(np.uint8)
        elif not np.isfinite(data).all():
            raise ValueError("volume contains non-finite values")
        object.__setattr__(self, "data", data)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape


@dataclass
class LongitudinalSample:
    """Two rigidly aligned time-points with T1 and FLAIR each, plus masks.

    ``scans`` maps ``(timepoint, modality)`` to a volume, with timepoint in
    ``("ti", "tj")``; ``ti`` is the reference whose mask is segmented.
    ``gt_field`` (3, D, H, W), when present, is the voxel displacement with
    ``scan_ti(x) ~= scan_tj(x + gt_field(x))``.
    """

    subject_id: str
    scans: dict[tuple[str, str], Volume3D]
    gt_mask_ti: Volume3D
    gt_mask_tj: Volume3D | None = None
    gt_field: np.ndarray | None = None

    def __post_init__(self):
        shapes = {v.shape for v in self.scans.values()} | {self.gt_mask_ti.shape}
        if self.gt_mask_tj is not None:
            shapes.add(self.gt_mask_tj.shape)
        if len(shapes) != 1:
            raise ValueError(f"all volumes of {self.subject_id} must share one shape, got {sorted(shapes)}")
        if self.gt_field is not None and self.gt_field.shape != (3, *self.shape):
            raise ValueError(f"gt_field must have shape (3, *{self.shape}), got {self.gt_field.shape}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.gt_mask_ti.shape

    def scan(self, timepoint: str, modality: str) -> Volume3D:
        return self.scans[(timepoint, modality)]

    def channel_volumes(self, layout: Layout | str) -> list[np.ndarray]:
        layout = Layout(layout)
        tps = ("ti",) if layout is Layout.STATIC else ("ti", "tj")
        return [self.scans[(tp, m)].data for tp in tps for m in MODALITIES]


@dataclass(frozen=True)
class SliceStack:
    """Multi-channel 2D network input (C, h, w).

    ``crop_record`` is the (h, w) extent before any padding.
    """

    data: np.ndarray
    channel_order: tuple[str, ...]
    plane: SlicePlane
    index: int
    crop_record: tuple[int, int] = field(default=(0, 0))

    def __post_init__(self):
        if self.data.ndim != 3:
            raise ValueError(f"SliceStack data must be (C, h, w), got {self.data.shape}")
        if len(self.channel_order) != self.data.shape[0]:
            raise ValueError("channel_order length does not match channel count")
        if self.crop_record == (0, 0):
            object.__setattr__(self, "crop_record", tuple(self.data.shape[1:]))


def take_slice(volume: np.ndarray, plane: SlicePlane | str, index: int) -> np.ndarray:
    plane = SlicePlane(plane)
    n = volume.shape[plane.axis]
    if not 0 <= index < n:
        raise IndexError(f"{plane.value} slice index {index} out of range [0, {n})")
    return np.take(volume, index, axis=plane.axis)


def put_slice(volume: np.ndarray, plane: SlicePlane | str, index: int, values: np.ndarray) -> None:
    plane = SlicePlane(plane)
    sl = [slice(None)] * 3
    sl[plane.axis] = index
    volume[tuple(sl)] = values


def extract_slice(sample: LongitudinalSample, plane: SlicePlane | str, index: int,
                  layout: Layout | str) -> SliceStack:
    layout = Layout(layout)
    plane = SlicePlane(plane)
    channels = [take_slice(v, plane, index) for v in sample.channel_volumes(layout)]
    return SliceStack(np.stack(channels).astype(np.float32), layout.channel_order, plane, index)


def normalize_volume(v: Volume3D, region: np.ndarray | None = None) -> Volume3D:
    """Z-score ``v``.

    Statistics come from ``region`` (a boolean brain mask) when given, with
    voxels outside it set to 0; otherwise from the whole volume.
    """
    if v.is_mask:
        raise ValueError("cannot normalize a mask volume")
    data = v.data.astype(np.float64)
    region = np.ones(data.shape, dtype=bool) if region is None else np.asarray(region, dtype=bool)
    if region.shape != data.shape:
        raise ValueError(f"region shape {region.shape} does not match volume shape {data.shape}")
    vals = data[region]
    if vals.size == 0 or np.ptp(vals) == 0:
        raise ValueError("zero variance: volume is constant over the normalization region")
    out = np.zeros_like(data)
    out[region] = (vals - vals.mean()) / vals.std()
    return replace(v, data=out)


def brain_region(sample: LongitudinalSample) -> np.ndarray:
    """Voxels that are nonzero in any scan of the sample (skull-stripped input)."""
    region = np.zeros(sample.shape, dtype=bool)
    for v in sample.scans.values():
        region |= v.data != 0
    return region


def normalize_sample(sample: LongitudinalSample) -> LongitudinalSample:
    region = brain_region(sample)
    scans = {k: normalize_volume(v, region) for k, v in sample.scans.items()}
    return replace(sample, scans=scans)


def pad_to_multiple(s: SliceStack, m: int) -> SliceStack:
    """Zero-pad bottom/right so both spatial dims are multiples of ``m``."""
    if m < 1:
        raise ValueError(f"multiple must be >= 1, got {m}")
    c, h, w = s.data.shape
    ph = -(-h // m) * m
    pw = -(-w // m) * m
    if (ph, pw) == (h, w):
        return s
    out = np.zeros((c, ph, pw), dtype=s.data.dtype)
    out[:, :h, :w] = s.data
    return SliceStack(out, s.channel_order, s.plane, s.index, crop_record=s.crop_record)


def pad_array(x: np.ndarray, h: int, w: int) -> np.ndarray:
    """Zero-pad the last two axes of ``x`` to (h, w)."""
    pad = [(0, 0)] * (x.ndim - 2) + [(0, h - x.shape[-2]), (0, w - x.shape[-1])]
    return np.pad(x, pad)


def crop(s: SliceStack) -> SliceStack:
    h, w = s.crop_record
    return SliceStack(s.data[:, :h, :w], s.channel_order, s.plane, s.index, crop_record=(h, w))


def padded_extent(h: int, w: int, m: int) -> tuple[int, int]:
    return -(-h // m) * m, -(-w // m) * m


# ---------------------------------------------------------------------------
# I/O: NIfTI via nibabel, plus raw float32 + JSON sidecar


def _is_nifti(path: Path) -> bool:
    return path.name.endswith(".nii") or path.name.endswith(".nii.gz")


def save_array(path: str | Path, data: np.ndarray, spacing=None, is_mask: bool = False) -> Path:
    """Write ``data`` as NIfTI (by extension) or raw ``.raw`` + ``.json`` sidecar.

    NIfTI gzip output is written with a zero mtime so identical arrays give
    identical files.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = np.asarray(data)
    if _is_nifti(path):
        import nibabel as nib

        dtype = np.uint8 if is_mask else np.float32
        affine = np.diag([*(spacing or (1.0, 1.0, 1.0))[-3:], 1.0]) if data.ndim >= 3 else np.eye(4)
        img = nib.Nifti1Image(data.astype(dtype), affine)
        if spacing is not None and data.ndim == 3:
            img.header.set_zooms(tuple(float(s) for s in spacing))
        raw = img.to_bytes()
        if path.name.endswith(".gz"):
            buf = io.BytesIO()
            with gzip.GzipFile(fileobj=buf, mode="wb", mtime=0) as gz:
                gz.write(raw)
            raw = buf.getvalue()
        path.write_bytes(raw)
        return path
    raw_path = path.with_suffix(".raw")
    meta = {
        "shape": list(data.shape),
        "spacing": list(spacing) if spacing is not None else None,
        "dtype": "float32",
        "is_mask": bool(is_mask),
    }
    raw_path.write_bytes(data.astype("<f4").tobytes())
    raw_path.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    return raw_path


def load_array(path: str | Path) -> tuple[np.ndarray, dict]:
    path = Path(path)
    if _is_nifti(path):
        import nibabel as nib

        img = nib.load(str(path))
        data = np.asarray(img.dataobj)
        zooms = tuple(float(z) for z in img.header.get_zooms()[:3])
        return data, {"spacing": zooms, "is_mask": data.dtype == np.uint8}
    raw_path = path.with_suffix(".raw")
    meta = json.loads(raw_path.with_suffix(".json").read_text())
    if meta.get("dtype", "float32") != "float32":
        raise ValueError(f"unsupported raw dtype {meta['dtype']!r} in {raw_path}")
    data = np.frombuffer(raw_path.read_bytes(), dtype="<f4").reshape(meta["shape"]).copy()
    return data, meta


def save_volume(path: str | Path, v: Volume3D) -> Path:
    return save_array(path, v.data, spacing=v.spacing, is_mask=v.is_mask)


def load_volume(path: str | Path, is_mask: bool | None = None) -> Volume3D:
    data, meta = load_array(path)
    mask = meta.get("is_mask", False) if is_mask is None else is_mask
    spacing = meta.get("spacing")
    spacing = tuple(spacing) if spacing is not None else None
    if mask:
        return Volume3D(np.rint(data).astype(np.uint8), spacing, is_mask=True)
    return Volume3D(data.astype(np.float64), spacing)
