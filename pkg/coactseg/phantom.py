"""
Synthetic MS-like phantoms.

Single-time-point phantoms carry all-lesion labels; two-time-point phantoms
carry new-lesion labels and keep the all-lesion masks of both scans hidden for
evaluation. A per-sample seed fully determines every output.
"""

import os
from dataclasses import dataclass, replace
from typing import List, Optional, Tuple

import numpy as np
import pandas as pd
from scipy import ndimage

from coactseg import config
from coactseg.utils import ConfigError, PhantomError, check_range, derive_seed, logger
from coactseg.volume import (
    LabelVolume, Sample, SampleKind, Volume3D, load_sample, load_volume,
    make_sample_single, make_sample_two, save_sample, save_volume,
)

MAX_PLACEMENT_TRIES = 500
BRAIN_SEMI_AXIS_FRACTION = 0.44
TEXTURE_SIGMA_VOX = 2.0
STRUCTURE_26 = np.ones((3, 3, 3), dtype=bool)

MANIFEST_COLUMNS = [
    "sample_id", "kind", "split", "seed",
    "baseline", "follow_up", "difference", "label", "brain_mask",
    "baseline_all", "follow_up_all",
]


@dataclass(frozen=True)
class PhantomConfig:
    dims: Tuple[int, int, int] = config.PHANTOM_DIMS
    spacing_mm: Tuple[float, float, float] = config.PHANTOM_SPACING_MM
    background_level: float = config.BACKGROUND_LEVEL
    noise_std: float = config.NOISE_STD
    lesion_count_range: Tuple[int, int] = config.LESION_COUNT_RANGE
    lesion_radius_range_vox: Tuple[int, int] = config.LESION_RADIUS_RANGE_VOX
    new_lesion_count_range: Tuple[int, int] = config.NEW_LESION_COUNT_RANGE
    lesion_contrast: float = config.LESION_CONTRAST
    seed: int = config.DEFAULT_SEED
    texture_std: float = config.TEXTURE_STD

    def validate(self) -> None:
        if len(self.dims) != 3 or min(self.dims) < 1:
            raise ConfigError(f"dims must be three positive extents, got {self.dims}")
        if len(self.spacing_mm) != 3 or min(self.spacing_mm) <= 0:
            raise ConfigError(f"spacing_mm must be three positive values, got {self.spacing_mm}")
        check_range(self.lesion_count_range, "lesion_count_range")
        check_range(self.new_lesion_count_range, "new_lesion_count_range")
        check_range(self.lesion_radius_range_vox, "lesion_radius_range_vox", minimum=1)
        if self.noise_std < 0 or self.texture_std < 0:
            raise ConfigError("noise_std and texture_std must be non-negative")
        if not self.lesion_contrast > self.noise_std:
            raise ConfigError(
                f"lesion_contrast {self.lesion_contrast} must exceed noise_std {self.noise_std}")


@dataclass
class Subject:
    """Lesion-free anatomy shared by the scans of one subject."""

    anatomy: np.ndarray
    brain_mask: np.ndarray


@dataclass
class ScanPair:
    """Raw (un-normalized) baseline/follow-up scans and their lesion masks."""

    subject: Subject
    baseline: np.ndarray
    follow_up: np.ndarray
    baseline_lesions: np.ndarray
    follow_up_lesions: np.ndarray

    @property
    def new_lesions(self) -> np.ndarray:
        return self.follow_up_lesions & ~self.baseline_lesions


@dataclass
class TwoTimePointTruth:
    """Hidden all-lesion ground truth of a two-time-point phantom."""

    baseline_all: LabelVolume
    follow_up_all: LabelVolume


def brain_ellipsoid(dims) -> np.ndarray:
    grid = np.indices(dims, dtype=np.float64)
    radius = np.zeros(dims)
    for axis, extent in enumerate(dims):
        centre = (extent - 1) / 2.0
        semi = max(BRAIN_SEMI_AXIS_FRACTION * extent, 1.0)
        radius += ((grid[axis] - centre) / semi) ** 2
    return radius <= 1.0


def ellipsoid_support(dims, centre, radii) -> np.ndarray:
    grid = np.indices(dims, dtype=np.float64)
    radius = np.zeros(dims)
    for axis in range(3):
        radius += ((grid[axis] - centre[axis]) / radii[axis]) ** 2
    return radius <= 1.0


def simulate_subject(cfg: PhantomConfig, rng: np.random.Generator) -> Subject:
    """Ellipsoidal brain with smooth texture; zero outside the brain."""
    mask = brain_ellipsoid(cfg.dims)
    texture = ndimage.gaussian_filter(rng.standard_normal(cfg.dims), sigma=TEXTURE_SIGMA_VOX)
    spread = texture[mask].std() if mask.any() else 0.0
    if spread > 0:
        texture = texture / spread
    anatomy = np.where(mask, cfg.background_level + cfg.texture_std * texture, 0.0)
    return Subject(anatomy=anatomy, brain_mask=mask)


def place_lesions(cfg: PhantomConfig, rng: np.random.Generator, brain_mask: np.ndarray,
                  count: int, occupied: Optional[np.ndarray] = None) -> np.ndarray:
    """
    Place ``count`` ellipsoidal lesions inside the brain.

    New lesions never touch (26-adjacency) each other or ``occupied``, so every
    lesion is its own connected component.
    """
    lesions = np.zeros(cfg.dims, dtype=bool)
    blocked = np.zeros(cfg.dims, dtype=bool) if occupied is None else occupied.copy()
    low, high = cfg.lesion_radius_range_vox
    inside = np.argwhere(brain_mask)
    if count > 0 and inside.size == 0:
        raise PhantomError("brain mask is empty; cannot place lesions")
    for index in range(count):
        for _ in range(MAX_PLACEMENT_TRIES):
            radii = rng.integers(low, high + 1, size=3)
            centre = inside[rng.integers(len(inside))]
            support = ellipsoid_support(cfg.dims, centre, radii)
            if not np.all(brain_mask[support]):
                continue
            if np.any(support & ndimage.binary_dilation(blocked, STRUCTURE_26)):
                continue
            lesions |= support
            blocked |= support
            break
        else:
            raise PhantomError(
                f"could not place lesion {index + 1}/{count} after {MAX_PLACEMENT_TRIES} tries")
    return lesions


def render_scan(subject: Subject, lesions: np.ndarray, cfg: PhantomConfig,
                rng: np.random.Generator) -> np.ndarray:
    """Anatomy plus additive lesion contrast plus independent noise inside the brain."""
    noise = rng.normal(0.0, cfg.noise_std, size=cfg.dims) if cfg.noise_std > 0 else 0.0
    scan = subject.anatomy + cfg.lesion_contrast * lesions + noise
    return np.where(subject.brain_mask, scan, 0.0)


def _draw_count(rng, count_range) -> int:
    return int(rng.integers(count_range[0], count_range[1] + 1))


def simulate_single(cfg: PhantomConfig):
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    subject = simulate_subject(cfg, rng)
    lesions = place_lesions(cfg, rng, subject.brain_mask, _draw_count(rng, cfg.lesion_count_range))
    return subject, lesions, render_scan(subject, lesions, cfg, rng)


def simulate_pair(cfg: PhantomConfig) -> ScanPair:
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    subject = simulate_subject(cfg, rng)
    old = place_lesions(cfg, rng, subject.brain_mask, _draw_count(rng, cfg.lesion_count_range))
    new = place_lesions(cfg, rng, subject.brain_mask,
                        _draw_count(rng, cfg.new_lesion_count_range), occupied=old)
    baseline = render_scan(subject, old, cfg, rng)
    follow_up = render_scan(subject, old | new, cfg, rng)
    return ScanPair(subject, baseline, follow_up, old, old | new)


def gen_single(cfg: PhantomConfig, sample_id: str = "") -> Sample:
    """Single-time-point phantom labelled with all lesions."""
    subject, lesions, scan = simulate_single(cfg)
    mask = LabelVolume.from_array(subject.brain_mask, cfg.spacing_mm)
    return make_sample_single(Volume3D(scan, cfg.spacing_mm),
                              LabelVolume.from_array(lesions, cfg.spacing_mm), mask,
                              sample_id=sample_id)


def gen_two(cfg: PhantomConfig, sample_id: str = "") -> Tuple[Sample, TwoTimePointTruth]:
    """Two-time-point phantom labelled with new lesions only."""
    pair = simulate_pair(cfg)
    mask = LabelVolume.from_array(pair.subject.brain_mask, cfg.spacing_mm)
    sample = make_sample_two(
        Volume3D(pair.baseline, cfg.spacing_mm),
        Volume3D(pair.follow_up, cfg.spacing_mm),
        LabelVolume.from_array(pair.new_lesions, cfg.spacing_mm),
        mask,
        sample_id=sample_id,
    )
    truth = TwoTimePointTruth(
        baseline_all=LabelVolume.from_array(pair.baseline_lesions, cfg.spacing_mm),
        follow_up_all=LabelVolume.from_array(pair.follow_up_lesions, cfg.spacing_mm),
    )
    return sample, truth


KIND_STREAM = {SampleKind.SINGLE: 0, SampleKind.TWO: 1}


def gen_dataset(cfg: PhantomConfig, n_single: int, n_two: int, out_dir: str,
                val_single: int = 0, val_two: int = 0) -> pd.DataFrame:
    """
    Generate a phantom dataset and its manifest.

    Args:
        cfg: Phantom configuration; its seed is the root of every sample seed
        n_single: Single-time-point training samples
        n_two: Two-time-point training samples
        out_dir: Output directory for COACTVOL files and manifest.tsv
        val_single: Single-time-point validation samples
        val_two: Two-time-point validation samples

    Returns:
        The manifest as a DataFrame (paths relative to ``out_dir``)
    """
    cfg.validate()
    os.makedirs(out_dir, exist_ok=True)
    records = []
    plan = [
        (SampleKind.SINGLE, "train", n_single),
        (SampleKind.SINGLE, "val", val_single),
        (SampleKind.TWO, "train", n_two),
        (SampleKind.TWO, "val", val_two),
    ]
    counters = {SampleKind.SINGLE: 0, SampleKind.TWO: 0}
    for kind, split, count in plan:
        for _ in range(count):
            index = counters[kind]
            counters[kind] += 1
            seed = derive_seed(cfg.seed, KIND_STREAM[kind], index)
            sample_id = f"{kind.value}_{index:03d}"
            sample_cfg = replace(cfg, seed=seed)
            record = {"sample_id": sample_id, "kind": kind.value, "split": split, "seed": seed,
                      "baseline_all": "", "follow_up_all": ""}
            if kind is SampleKind.SINGLE:
                sample = gen_single(sample_cfg, sample_id)
            else:
                sample, truth = gen_two(sample_cfg, sample_id)
                for part in ("baseline_all", "follow_up_all"):
                    name = f"{sample_id}_{part}.cvol"
                    save_volume(getattr(truth, part), os.path.join(out_dir, name))
                    record[part] = name
            record.update(save_sample(sample, out_dir, sample_id))
            records.append(record)
            logger.info(f"Generated {sample_id} ({split}, {sample.label.count()} label voxels)")

    manifest = pd.DataFrame(records, columns=MANIFEST_COLUMNS)
    write_manifest(manifest, os.path.join(out_dir, "manifest.tsv"))
    return manifest


def write_manifest(manifest: pd.DataFrame, path: str) -> None:
    manifest.to_csv(path, sep="\t", index=False)


def read_manifest(path: str) -> pd.DataFrame:
    """Load a manifest; the directory of ``path`` becomes the base of its relative paths."""
    if not os.path.exists(path):
        raise FileNotFoundError(f"manifest not found: {path}")
    manifest = pd.read_csv(path, sep="\t", dtype=str, keep_default_na=False)
    missing = [c for c in MANIFEST_COLUMNS if c not in manifest.columns]
    if missing:
        raise ValueError(f"{path}: manifest lacks columns {missing}")
    manifest.attrs["base_dir"] = os.path.dirname(os.path.abspath(path))
    return manifest


def load_manifest_sample(manifest: pd.DataFrame, row) -> Tuple[Sample, Optional[TwoTimePointTruth]]:
    """Load one manifest record (a row of ``manifest``) with its hidden truth, if any."""
    base = manifest.attrs.get("base_dir", "")
    paths = {part: row[part] for part in ("baseline", "follow_up", "difference", "label", "brain_mask")}
    sample = load_sample(row["kind"], paths, base, sample_id=row["sample_id"])
    truth = None
    if row["baseline_all"] and row["follow_up_all"]:
        truth = TwoTimePointTruth(
            baseline_all=load_volume(os.path.join(base, row["baseline_all"])),
            follow_up_all=load_volume(os.path.join(base, row["follow_up_all"])),
        )
    return sample, truth


def load_split(manifest: pd.DataFrame, split: str) -> List[Tuple[Sample, Optional[TwoTimePointTruth]]]:
    rows = manifest[manifest["split"] == split]
    return [load_manifest_sample(manifest, row) for _, row in rows.iterrows()]
