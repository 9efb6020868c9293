"""On-disk dataset layout.

    <root>/dataset.json                       manifest: subjects, split, generator config
    <root>/<subject_id>/t0/{T1,FLAIR}.nii.gz  reference time-point t_i
    <root>/<subject_id>/t0/mask.nii.gz
    <root>/<subject_id>/t1/{T1,FLAIR}.nii.gz  follow-up t_j
    <root>/<subject_id>/t1/mask.nii.gz
    <root>/<subject_id>/gt_field.raw + .json  (3, D, H, W) float32, component axis first
"""

from __future__ import annotations

import json
from pathlib import Path

from .trainer import Dataset
from .volumes import MODALITIES, LongitudinalSample, load_array, load_volume, normalize_sample, save_array, save_volume

TP_DIRS = {"ti": "t0", "tj": "t1"}
MANIFEST = "dataset.json"


def write_sample(root: Path, sample: LongitudinalSample) -> list[Path]:
    base = Path(root) / sample.subject_id
    written = []
    for tp, sub in TP_DIRS.items():
        for modality in MODALITIES:
            written.append(save_volume(base / sub / f"{modality}.nii.gz", sample.scan(tp, modality)))
    written.append(save_volume(base / "t0" / "mask.nii.gz", sample.gt_mask_ti))
    if sample.gt_mask_tj is not None:
        written.append(save_volume(base / "t1" / "mask.nii.gz", sample.gt_mask_tj))
    if sample.gt_field is not None:
        written.append(save_array(base / "gt_field", sample.gt_field))
    return written


def write_dataset(root, samples: list[LongitudinalSample], split: dict, extra: dict | None = None) -> Path:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for sample in samples:
        write_sample(root, sample)
    manifest = {
        "format": "longiseg-dataset/1",
        "subjects": [s.subject_id for s in samples],
        "split": split,
        "timepoint_dirs": TP_DIRS,
        **(extra or {}),
    }
    path = root / MANIFEST
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def read_sample(root, subject_id: str) -> LongitudinalSample:
    base = Path(root) / subject_id
    scans = {(tp, m): load_volume(base / sub / f"{m}.nii.gz", is_mask=False)
             for tp, sub in TP_DIRS.items() for m in MODALITIES}
    mask_tj_path = base / "t1" / "mask.nii.gz"
    field_path = base / "gt_field.raw"
    return LongitudinalSample(
        subject_id=subject_id,
        scans=scans,
        gt_mask_ti=load_volume(base / "t0" / "mask.nii.gz", is_mask=True),
        gt_mask_tj=load_volume(mask_tj_path, is_mask=True) if mask_tj_path.exists() else None,
        gt_field=load_array(field_path)[0].astype("float64") if field_path.exists() else None,
    )


def read_manifest(root) -> dict:
    path = Path(root) / MANIFEST
    if not path.exists():
        raise FileNotFoundError(f"no dataset manifest at {path}")
    return json.loads(path.read_text())


def load_dataset(root, splits=("train", "val", "test"), normalize: bool = True) -> Dataset:
    """Read the subjects of ``splits``, z-scored over the brain region."""
    manifest = read_manifest(root)
    split = {k: list(v) for k, v in manifest["split"].items()}
    wanted = sorted({sid for name in splits for sid in split.get(name, [])})
    samples = {}
    for sid in wanted:
        sample = read_sample(root, sid)
        samples[sid] = normalize_sample(sample) if normalize else sample
    return Dataset(samples, split)


def dataset_from_samples(samples: list[LongitudinalSample], split: dict, normalize: bool = True) -> Dataset:
    prepared = {s.subject_id: normalize_sample(s) if normalize else s for s in samples}
    return Dataset(prepared, {k: list(v) for k, v in split.items()})
