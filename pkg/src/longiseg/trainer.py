"""Training loop shared by all variants.

One model instance serves all three slice orientations. Each step draws a
batch of slices mixed over subjects and planes, computes the variant's loss
and takes an Adam step with the AMSGrad correction. For the multitask
variant the registration pair is the (T1, FLAIR) channel group of t_i
(fixed) and of t_j (moving) from the same slice stack.

Determinism: with a fixed seed, one device and in-process data loading,
runs are bit-for-bit reproducible on CPU.
"""

from __future__ import annotations

import csv
import enum
import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch

from . import metrics as M
from .infer import DEFAULT_THRESHOLD, segment_subject
from .losses import LossConfig, LossParts, multitask_loss, seg_loss
from .nets import BackboneConfig, ModelVariant, build_model, load_checkpoint, save_checkpoint, set_rng_state
from .volumes import PLANES, LongitudinalSample, Layout, padded_extent, take_slice

log = logging.getLogger(__name__)

HISTORY_COLUMNS = ("step", "epoch", "L_total", "L_seg", "L_sim", "L_smooth")
VALIDATION_COLUMNS = ("step", "epoch", *M.METRIC_NAMES)


class SliceSampling(str, enum.Enum):
    ALL = "all"
    LESION_BIASED = "lesion_biased"


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    variant: ModelVariant = ModelVariant.MULTITASK
    backbone: BackboneConfig = BackboneConfig()
    loss: LossConfig = LossConfig()
    learning_rate: float = 1e-4
    batch_size: int = 8
    epochs: int = 10
    steps_per_epoch: int = 50
    seed: int = 0
    val_every: int = 1
    slice_sampling: SliceSampling = SliceSampling.LESION_BIASED
    lesion_fraction: float = 0.5
    threshold: float = DEFAULT_THRESHOLD
    checkpoint_steps: tuple[int, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "variant", ModelVariant(self.variant))
        object.__setattr__(self, "slice_sampling", SliceSampling(self.slice_sampling))
        object.__setattr__(self, "checkpoint_steps", tuple(int(s) for s in self.checkpoint_steps))
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0 or self.steps_per_epoch < 1 or self.val_every < 1:
            raise ValueError("epochs must be >= 0, steps_per_epoch and val_every >= 1")
        if not 0 <= self.lesion_fraction <= 1:
            raise ValueError("lesion_fraction must be in [0, 1]")

    @property
    def total_steps(self) -> int:
        return self.epochs * self.steps_per_epoch

    def to_dict(self) -> dict:
        d = asdict(self)
        d["variant"] = self.variant.value
        d["slice_sampling"] = self.slice_sampling.value
        d["loss"]["seg_loss_kind"] = self.loss.seg_loss_kind.value
        d["checkpoint_steps"] = list(self.checkpoint_steps)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train config fields: {sorted(unknown)}")
        if isinstance(d.get("backbone"), dict):
            d["backbone"] = BackboneConfig.from_dict(d["backbone"])
        if isinstance(d.get("loss"), dict):
            d["loss"] = LossConfig(**d["loss"])
        if "learning_rate" in d:
            d["learning_rate"] = float(d["learning_rate"])
        return cls(**d)


@dataclass
class Dataset:
    """Normalized samples keyed by subject id, plus the split membership."""

    samples: dict[str, LongitudinalSample]
    split: dict[str, list[str]]

    def subset(self, name: str) -> list[LongitudinalSample]:
        return [self.samples[sid] for sid in self.split.get(name, [])]


@dataclass
class Batch:
    x: torch.Tensor
    gt: torch.Tensor
    keys: list[tuple[int, str, int]]

    def registration_pair(self):
        return self.x[:, 0:2], self.x[:, 2:4]

    def to(self, device) -> "Batch":
        return Batch(self.x.to(device), self.gt.to(device), self.keys)


class SliceSampler:
    """Infinite stream of slice batches over (subject, plane, index).

    In ``lesion_biased`` mode each draw is, with probability
    ``lesion_fraction``, restricted to slices whose t_i mask has foreground.
    Batches are zero-padded to the largest padded extent among their slices.
    Only t_i masks and the channels of ``layout`` are read.
    """

    def __init__(self, samples: list[LongitudinalSample], layout: Layout, batch_size: int,
                 multiple: int, seed: int, mode: SliceSampling = SliceSampling.ALL,
                 lesion_fraction: float = 0.5):
        if not samples:
            raise ValueError("cannot sample slices from an empty dataset")
        self.samples = samples
        self.layout = Layout(layout)
        self.batch_size = batch_size
        self.multiple = multiple
        self.mode = SliceSampling(mode)
        self.lesion_fraction = lesion_fraction
        self.rng = np.random.default_rng(seed)
        self.domain = [(s, p, k) for s, sample in enumerate(samples)
                       for p in PLANES for k in range(sample.shape[p.axis])]
        self.lesion_domain = [key for key in self.domain if self._has_lesion(key)]

    def _has_lesion(self, key) -> bool:
        s, plane, k = key
        return bool(take_slice(self.samples[s].gt_mask_ti.data, plane, k).any())

    @property
    def domain_size(self) -> int:
        return len(self.domain)

    def draw_key(self):
        biased = self.mode is SliceSampling.LESION_BIASED and self.lesion_domain
        if biased and self.rng.random() < self.lesion_fraction:
            return self.lesion_domain[int(self.rng.integers(len(self.lesion_domain)))]
        return self.domain[int(self.rng.integers(len(self.domain)))]

    def make_batch(self, keys) -> Batch:
        slices, masks = [], []
        for s, plane, k in keys:
            sample = self.samples[s]
            slices.append(np.stack([take_slice(v, plane, k) for v in sample.channel_volumes(self.layout)]))
            masks.append(take_slice(sample.gt_mask_ti.data, plane, k)[None])
        ph = max(padded_extent(*a.shape[1:], self.multiple)[0] for a in slices)
        pw = max(padded_extent(*a.shape[1:], self.multiple)[1] for a in slices)
        x = np.zeros((len(keys), self.layout.n_channels, ph, pw), dtype=np.float32)
        gt = np.zeros((len(keys), 1, ph, pw), dtype=np.float32)
        for b, (a, m) in enumerate(zip(slices, masks)):
            x[b, :, :a.shape[1], :a.shape[2]] = a
            gt[b, :, :m.shape[1], :m.shape[2]] = m
        return Batch(torch.from_numpy(x), torch.from_numpy(gt), list(keys))

    def next_batch(self) -> Batch:
        return self.make_batch([self.draw_key() for _ in range(self.batch_size)])

    def __iter__(self):
        while True:
            yield self.next_batch()

    def get_state(self) -> dict:
        return self.rng.bit_generator.state

    def set_state(self, state: dict) -> None:
        self.rng.bit_generator.state = state


def make_slice_sampler(samples, cfg: TrainConfig) -> SliceSampler:
    return SliceSampler(samples, cfg.variant.layout, cfg.batch_size, cfg.backbone.downsample_factor,
                        cfg.seed, cfg.slice_sampling, cfg.lesion_fraction)


def compute_loss(model, batch: Batch, cfg: TrainConfig) -> LossParts:
    out = model(batch.x)
    if cfg.variant is ModelVariant.MULTITASK:
        x_i, x_j = batch.registration_pair()
        return multitask_loss(out.prob, batch.gt, x_i, x_j, out.field, cfg.loss)
    l_seg = seg_loss(out, batch.gt, cfg.loss)
    zero = l_seg.new_zeros(())
    return LossParts(l_seg, l_seg, zero, zero)


def validate(model, samples: list[LongitudinalSample], tau: float = DEFAULT_THRESHOLD
             ) -> tuple[M.MetricReport, dict[str, M.MetricReport]]:
    """2.5D-segment every subject; return the per-subject mean and the per-subject reports."""
    if not samples:
        raise ValueError("validation split is empty")
    per_subject = {}
    for sample in samples:
        seg = segment_subject(model, sample, tau)
        per_subject[sample.subject_id] = M.evaluate(seg.mask, sample.gt_mask_ti)
    return M.mean_report(list(per_subject.values())), per_subject


@dataclass
class TrainHistory:
    steps: list[dict] = field(default_factory=list)
    validations: list[dict] = field(default_factory=list)
    wall_clock: list[tuple[int, float]] = field(default_factory=list)

    def write(self, out_dir: Path) -> None:
        _write_csv(out_dir / "history.csv", HISTORY_COLUMNS, self.steps)
        _write_csv(out_dir / "validation.csv", VALIDATION_COLUMNS, self.validations)
        _write_csv(out_dir / "timing.csv", ("step", "seconds"),
                   [{"step": s, "seconds": t} for s, t in self.wall_clock])


def _fmt(v):
    if v is None or v == "":
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _write_csv(path: Path, columns, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_fmt(row.get(c)) for c in columns])


def read_history(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@dataclass
class TrainResult:
    model: object
    history: TrainHistory
    best_checkpoint: Path | None
    last_checkpoint: Path | None
    best_score: float


def seed_everything(seed: int) -> None:
    torch.manual_seed(seed)
    np.random.seed(seed % 2**32)
    import random

    random.seed(seed)


def device_from_env() -> torch.device:
    return torch.device(os.environ.get("LONGISEG_DEVICE", "cpu"))


def _make_optimizer(model, cfg: TrainConfig):
    return torch.optim.Adam(model.parameters(), lr=cfg.learning_rate, amsgrad=True)


def train(dataset: Dataset, cfg: TrainConfig, out_dir: str | Path | None = None,
          resume: str | Path | None = None) -> TrainResult:
    """Optimize a fresh (or resumed) model; write checkpoints and logs under ``out_dir``."""
    train_samples = dataset.subset("train")
    val_samples = dataset.subset("val")
    if not train_samples:
        raise ValueError("dataset has no training subjects")
    if not val_samples:
        raise ValueError("dataset has no validation subjects")
    out_dir = Path(out_dir) if out_dir is not None else None
    ckpt_dir = None
    if out_dir is not None:
        ckpt_dir = out_dir / "checkpoints"
        ckpt_dir.mkdir(parents=True, exist_ok=True)

    seed_everything(cfg.seed)
    device = device_from_env()
    model = build_model(cfg.variant, cfg.backbone).to(device)
    optimizer = _make_optimizer(model, cfg)
    sampler = make_slice_sampler(train_samples, cfg)
    history = TrainHistory()
    step = 0
    start_epoch = 0
    best = -math.inf

    if resume is not None:
        model, payload = load_checkpoint(resume, cfg.variant, cfg.backbone)
        model.to(device)
        optimizer = _make_optimizer(model, cfg)
        optimizer.load_state_dict(payload["optimizer"])
        sampler.set_state(payload["extra"]["sampler_state"])
        set_rng_state(payload["rng_state"])
        step = payload["step"]
        start_epoch = payload["epoch"]
        best = payload["extra"].get("best_score", -math.inf)
        prior = payload["extra"].get("history")
        if prior:
            history.steps = list(prior["steps"])
            history.validations = list(prior["validations"])

    best_path = ckpt_dir / "best.pt" if ckpt_dir else None
    last_path = ckpt_dir / "last.pt" if ckpt_dir else None

    def checkpoint(path, epoch):
        extra = {"sampler_state": sampler.get_state(), "best_score": best,
                 "history": {"steps": history.steps, "validations": history.validations},
                 "train_config": cfg.to_dict()}
        save_checkpoint(path, model, optimizer, epoch=epoch, step=step, extra=extra)

    t_start = time.perf_counter()
    for epoch in range(start_epoch, cfg.epochs):
        model.train()
        done_in_epoch = max(0, step - epoch * cfg.steps_per_epoch)
        for _ in range(cfg.steps_per_epoch - done_in_epoch):
            if ckpt_dir is not None and step in cfg.checkpoint_steps:
                checkpoint(ckpt_dir / f"step_{step:06d}.pt", epoch)
            batch = sampler.next_batch().to(device)
            parts = compute_loss(model, batch, cfg)
            if not torch.isfinite(parts.total):
                if ckpt_dir is not None:
                    checkpoint(ckpt_dir / "last_finite.pt", epoch)
                raise TrainingDiverged(f"non-finite loss at step {step} (epoch {epoch})")
            optimizer.zero_grad()
            parts.total.backward()
            optimizer.step()
            row = {"step": step, "epoch": epoch, **parts.as_floats()}
            if cfg.variant is not ModelVariant.MULTITASK:
                row["L_sim"] = row["L_smooth"] = ""
            history.steps.append(row)
            history.wall_clock.append((step, time.perf_counter() - t_start))
            step += 1

        if (epoch + 1) % cfg.val_every == 0 or epoch + 1 == cfg.epochs:
            report, _ = validate(model, val_samples, cfg.threshold)
            history.validations.append({"step": step, "epoch": epoch, **report.scores()})
            log.info("epoch %d step %d val overall %.4f", epoch, step, report.overall)
            if report.overall > best:
                best = report.overall
                if best_path is not None:
                    checkpoint(best_path, epoch + 1)
        if last_path is not None:
            checkpoint(last_path, epoch + 1)
        if out_dir is not None:
            history.write(out_dir)

    model.eval()
    return TrainResult(model, history, best_path, last_path, best)


def recompute_step_loss(checkpoint_path, dataset: Dataset, cfg: TrainConfig) -> dict[str, float]:
    """Re-run the loss of the step that starts at ``checkpoint_path`` (saved via ``checkpoint_steps``)."""
    model, payload = load_checkpoint(checkpoint_path, cfg.variant, cfg.backbone)
    sampler = make_slice_sampler(dataset.subset("train"), cfg)
    sampler.set_state(payload["extra"]["sampler_state"])
    set_rng_state(payload["rng_state"])
    model.train()
    batch = sampler.next_batch()
    with torch.no_grad():
        return compute_loss(model, batch, cfg).as_floats()


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, default=str) + "\n")
