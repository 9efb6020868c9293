"""Deterministic synthetic longitudinal brain phantoms.

Each subject is a scene defined over continuous voxel coordinates: an
ellipsoidal brain with smooth tissue texture and spherical lesions. The
reference time-point ``ti`` renders the scene on the voxel grid. The
follow-up ``tj`` renders the scene with per-lesion changes at coordinates
moved by a smooth displacement, so that ``ti(x) ~= tj(x + gt_field(x))``.
Masks are evaluated analytically at the same coordinates and are therefore
exact.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from .kernels import sample_trilinear
from .volumes import LongitudinalSample, Volume3D

CHANGE_KINDS = ("grow", "shrink", "appear", "disappear", "static")
GROW_FACTOR = 1.4
SHRINK_FACTOR = 0.6
PLACEMENT_RETRIES = 200
LESION_GAP_VOX = 1.5
EDGE_WIDTH = 4.0
TEXTURE_WAVES = 6
TEXTURE_WAVELENGTH_VOX = (14.0, 32.0)


class SynthConfigError(ValueError):
    """Invalid synthetic-data configuration; ``field`` names the culprit."""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


class LesionPlacementError(RuntimeError):
    pass


def _default_profile():
    return {"grow": 0.25, "shrink": 0.15, "appear": 0.15, "disappear": 0.1, "static": 0.35}


@dataclass(frozen=True)
class SynthConfig:
    shape: tuple[int, int, int] = (64, 64, 64)
    n_subjects: int = 7
    lesion_count_range: tuple[int, int] = (6, 12)
    lesion_radius_range_vox: tuple[float, float] = (2.0, 5.0)
    change_profile: dict = field(default_factory=_default_profile)
    background_level: float = 1.0
    tissue_contrast: float = 0.3
    lesion_hyperintensity: float = 0.3
    lesion_t1_hypointensity: float = 0.1
    noise_sigma: float = 0.2
    warp_amplitude_vox: float = 0.75
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "shape", tuple(int(s) for s in self.shape))
        object.__setattr__(self, "lesion_count_range", tuple(int(c) for c in self.lesion_count_range))
        object.__setattr__(self, "lesion_radius_range_vox",
                           tuple(float(r) for r in self.lesion_radius_range_vox))
        object.__setattr__(self, "change_profile", {k: float(v) for k, v in self.change_profile.items()})
        self.validate()

    def validate(self):
        if len(self.shape) != 3 or min(self.shape) < 8:
            raise SynthConfigError("shape", f"needs three axes of length >= 8, got {self.shape}")
        if self.n_subjects < 1:
            raise SynthConfigError("n_subjects", f"must be >= 1, got {self.n_subjects}")
        lo, hi = self.lesion_count_range
        if lo < 0 or hi < lo:
            raise SynthConfigError("lesion_count_range", f"need 0 <= min <= max, got {(lo, hi)}")
        rlo, rhi = self.lesion_radius_range_vox
        if rlo < 1 or rhi < rlo:
            raise SynthConfigError("lesion_radius_range_vox", f"need 1 <= min <= max, got {(rlo, rhi)}")
        unknown = set(self.change_profile) - set(CHANGE_KINDS)
        if unknown:
            raise SynthConfigError("change_profile", f"unknown change kinds {sorted(unknown)}")
        fractions = [self.change_profile.get(k, 0.0) for k in CHANGE_KINDS]
        if min(fractions) < 0:
            raise SynthConfigError("change_profile", "fractions must be >= 0")
        if abs(sum(fractions) - 1.0) > 1e-9:
            raise SynthConfigError("change_profile", f"fractions must sum to 1, got {sum(fractions):.6g}")
        if self.noise_sigma < 0:
            raise SynthConfigError("noise_sigma", "must be >= 0")
        if self.warp_amplitude_vox < 0:
            raise SynthConfigError("warp_amplitude_vox", "must be >= 0")

    def profile_probabilities(self) -> np.ndarray:
        return np.array([self.change_profile.get(k, 0.0) for k in CHANGE_KINDS])

    def to_dict(self) -> dict:
        d = asdict(self)
        d["shape"] = list(self.shape)
        d["lesion_count_range"] = list(self.lesion_count_range)
        d["lesion_radius_range_vox"] = list(self.lesion_radius_range_vox)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise SynthConfigError(sorted(unknown)[0], "unknown configuration field")
        try:
            return cls(**d)
        except TypeError as exc:
            raise SynthConfigError("config", str(exc)) from exc


@dataclass(frozen=True)
class Lesion:
    center: tuple[float, float, float]
    radius_ti: float
    radius_tj: float
    change: str


@dataclass
class SynthSubject:
    """A generated sample plus the noiseless renderings behind it."""

    sample: LongitudinalSample
    lesions: list[Lesion]
    clean: dict[tuple[str, str], np.ndarray]
    anatomy: dict[tuple[str, str], np.ndarray]


def grid_coords(shape) -> np.ndarray:
    return np.stack(np.meshgrid(*(np.arange(n, dtype=np.float64) for n in shape), indexing="ij"))


def warp_volume(vol: np.ndarray, disp: np.ndarray) -> np.ndarray:
    """Trilinear sample of ``vol`` at ``x + disp(x)`` with border clamping."""
    return sample_trilinear(vol, grid_coords(vol.shape) + disp)


def _upsampled_noise(rng, low_shape, out_coords, full_shape, components=1):
    """Smooth random field: random values on a coarse grid, trilinearly upsampled.

    ``out_coords`` are points in full-resolution voxel units.
    """
    scale = [(ls - 1) / (n - 1) for ls, n in zip(low_shape, full_shape)]
    low_coords = out_coords * np.array(scale).reshape(3, *([1] * (out_coords.ndim - 1)))
    out = []
    for _ in range(components):
        low = rng.standard_normal(low_shape)
        out.append(sample_trilinear(low, low_coords))
    return np.stack(out)


def _smooth_displacement(rng, shape, amplitude):
    if amplitude == 0:
        return np.zeros((3, *shape))
    u = _upsampled_noise(rng, (4, 4, 4), grid_coords(shape), shape, components=3)
    peak = np.sqrt((u ** 2).sum(axis=0)).max()
    return u * (amplitude / peak) if peak > 0 else u


def invert_displacement(u: np.ndarray, iterations: int = 20) -> np.ndarray:
    """Fixed-point inverse: v(y) = -u(y + v(y))."""
    coords = grid_coords(u.shape[1:])
    v = -u
    for _ in range(iterations):
        pts = coords + v
        v = -np.stack([sample_trilinear(u[k], pts) for k in range(3)])
    return v


def _texture_waves(rng):
    directions = rng.standard_normal((TEXTURE_WAVES, 3))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    wavelengths = rng.uniform(*TEXTURE_WAVELENGTH_VOX, TEXTURE_WAVES)
    phases = rng.uniform(0, 2 * np.pi, TEXTURE_WAVES)
    return directions * (2 * np.pi / wavelengths)[:, None], phases


def _texture(pts, waves):
    """Smooth tissue texture: sum of random plane waves, unit RMS."""
    k, phases = waves
    tex = np.zeros(pts.shape[1:])
    for kk, ph in zip(k, phases):
        tex += np.cos(np.tensordot(kk, pts, axes=1) + ph)
    return tex * np.sqrt(2.0 / len(phases))


def _ellipsoid(shape):
    center = (np.array(shape, dtype=np.float64) - 1) / 2
    semi = 0.42 * np.array(shape, dtype=np.float64)
    return center, semi


def _brain_weight(pts, shape):
    center, semi = _ellipsoid(shape)
    rho = np.sqrt((((pts - center.reshape(3, 1, 1, 1)) / semi.reshape(3, 1, 1, 1)) ** 2).sum(axis=0))
    # raised-cosine ramp EDGE_WIDTH voxels wide at the surface, exactly 0 outside
    t = np.clip((1.0 - rho) * semi.mean() / EDGE_WIDTH + 0.5, 0.0, 1.0)
    return 0.5 - 0.5 * np.cos(np.pi * t)


def _place_lesions(cfg: SynthConfig, rng) -> list[Lesion]:
    lo, hi = cfg.lesion_count_range
    n = int(rng.integers(lo, hi + 1))
    rlo, rhi = cfg.lesion_radius_range_vox
    center0, semi = _ellipsoid(cfg.shape)
    probs = cfg.profile_probabilities()
    lesions: list[Lesion] = []
    for _ in range(n):
        radius = float(rng.uniform(rlo, rhi))
        change = CHANGE_KINDS[int(rng.choice(len(CHANGE_KINDS), p=probs))]
        r_tj = {"grow": radius * GROW_FACTOR, "shrink": max(1.0, radius * SHRINK_FACTOR)}.get(change, radius)
        reach = max(radius, r_tj)
        # keep the displaced sphere inside the full-intensity core of the brain
        margin = reach + cfg.warp_amplitude_vox + EDGE_WIDTH / 2
        for _attempt in range(PLACEMENT_RETRIES):
            c = np.round(center0 + rng.uniform(-1, 1, 3) * semi).astype(np.float64)
            rho = np.sqrt((((c - center0) / semi) ** 2).sum())
            if rho > 1.0 - margin / semi.min():
                continue
            if all(np.linalg.norm(c - np.array(o.center)) >= reach + max(o.radius_ti, o.radius_tj) + LESION_GAP_VOX
                   for o in lesions):
                break
        else:
            raise LesionPlacementError(f"cannot place lesions after {PLACEMENT_RETRIES} retries; config: {cfg}")
        r_ti = 0.0 if change == "appear" else radius
        r_tj = 0.0 if change == "disappear" else r_tj
        lesions.append(Lesion(tuple(c.tolist()), r_ti, r_tj, change))
    return lesions


def _lesion_mask(pts, lesions, timepoint):
    mask = np.zeros(pts.shape[1:], dtype=bool)
    for les in lesions:
        r = les.radius_ti if timepoint == "ti" else les.radius_tj
        if r <= 0:
            continue
        c = np.array(les.center).reshape(3, 1, 1, 1)
        mask |= ((pts - c) ** 2).sum(axis=0) <= r * r
    return mask


def _render(cfg, pts, texture, lesion_mask):
    brain = _brain_weight(pts, cfg.shape)
    base = cfg.background_level + cfg.tissue_contrast * texture
    t1_anat = brain * base
    flair_anat = brain * (cfg.background_level - 0.5 * cfg.tissue_contrast * texture)
    t1 = t1_anat - brain * cfg.lesion_t1_hypointensity * lesion_mask
    flair = flair_anat + brain * cfg.lesion_hyperintensity * lesion_mask
    return brain, {"T1": t1_anat, "FLAIR": flair_anat}, {"T1": t1, "FLAIR": flair}


def synthesize_subject(cfg: SynthConfig, subject_index: int) -> SynthSubject:
    rng = np.random.default_rng([cfg.seed, subject_index])
    shape = cfg.shape
    lesions = _place_lesions(cfg, rng)
    u = _smooth_displacement(rng, shape, cfg.warp_amplitude_vox)
    v = invert_displacement(u) if cfg.warp_amplitude_vox > 0 else np.zeros_like(u)

    waves = _texture_waves(rng)

    grid = grid_coords(shape)
    coords = {"ti": grid, "tj": grid + v}
    scans, clean, anatomy, masks = {}, {}, {}, {}
    for tp, pts in coords.items():
        texture = _texture(pts, waves)
        masks[tp] = _lesion_mask(pts, lesions, tp)
        brain, anat, img = _render(cfg, pts, texture, masks[tp])
        inside = brain > 0
        for modality in ("T1", "FLAIR"):
            noise = rng.standard_normal(shape) * cfg.noise_sigma
            vol = img[modality] + np.where(inside, noise, 0.0)
            clean[(tp, modality)] = img[modality]
            anatomy[(tp, modality)] = anat[modality]
            scans[(tp, modality)] = Volume3D(vol, (1.0, 1.0, 1.0))

    sample = LongitudinalSample(
        subject_id=f"sub-{subject_index:03d}",
        scans=scans,
        gt_mask_ti=Volume3D(masks["ti"].astype(np.uint8), (1.0, 1.0, 1.0), is_mask=True),
        gt_mask_tj=Volume3D(masks["tj"].astype(np.uint8), (1.0, 1.0, 1.0), is_mask=True),
        gt_field=u,
    )
    return SynthSubject(sample, lesions, clean, anatomy)


def generate_subject(cfg: SynthConfig, subject_index: int) -> LongitudinalSample:
    return synthesize_subject(cfg, subject_index).sample


def split_counts(n: int) -> tuple[int, int, int]:
    """Train/val/test sizes in proportion 3:1:3."""
    if n < 3:
        raise ValueError(f"need at least 3 subjects for a train/val/test split, got {n}")
    n_val = max(1, round(n / 7))
    n_train = max(1, round(3 * n / 7))
    n_test = n - n_train - n_val
    if n_test < 1:
        raise ValueError(f"{n} subjects are too few for a 3:1:3 split")
    return n_train, n_val, n_test


def make_split(subject_ids: list[str], seed: int) -> dict[str, list[str]]:
    n_train, n_val, _ = split_counts(len(subject_ids))
    order = np.random.default_rng([seed, 7]).permutation(len(subject_ids))
    ids = [subject_ids[i] for i in order]
    return {
        "train": sorted(ids[:n_train]),
        "val": sorted(ids[n_train:n_train + n_val]),
        "test": sorted(ids[n_train + n_val:]),
    }


def generate_dataset(cfg: SynthConfig) -> tuple[list[LongitudinalSample], dict[str, list[str]]]:
    split_counts(cfg.n_subjects)
    samples = [generate_subject(cfg, i) for i in range(cfg.n_subjects)]
    return samples, make_split([s.subject_id for s in samples], cfg.seed)


def with_overrides(cfg: SynthConfig, **kw) -> SynthConfig:
    return replace(cfg, **kw)
