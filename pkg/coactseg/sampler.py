"""
Weighted 3D patch extraction, right-angle augmentation and mixed batches.
"""

from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from coactseg import config
from coactseg.utils import SamplerError, as_triple
from coactseg.volume import Sample, SampleKind

CHANNELS = ("baseline", "follow_up", "difference", "label")


@dataclass
class Patch:
    origin: Tuple[int, int, int]
    size: Tuple[int, int, int]
    baseline: np.ndarray
    follow_up: np.ndarray
    difference: np.ndarray
    label: np.ndarray
    kind: SampleKind

    def transformed(self, transform) -> "Patch":
        arrays = {name: np.ascontiguousarray(transform(getattr(self, name))) for name in CHANNELS}
        return Patch(origin=self.origin, size=tuple(arrays["label"].shape), kind=self.kind, **arrays)


@dataclass
class Batch:
    patches: List[Patch]

    @property
    def kinds(self) -> List[SampleKind]:
        return [p.kind for p in self.patches]

    def __len__(self) -> int:
        return len(self.patches)

    def stack(self, channel: str) -> np.ndarray:
        """Channel of every patch as an (N, 1, p, p, p) array."""
        return np.stack([getattr(p, channel) for p in self.patches])[:, None].astype(np.float64)

    def indices(self, kind: SampleKind) -> List[int]:
        return [i for i, p in enumerate(self.patches) if p.kind is kind]


def crop(sample: Sample, origin, size) -> Patch:
    window = tuple(slice(o, o + s) for o, s in zip(origin, size))
    return Patch(
        origin=tuple(int(o) for o in origin),
        size=tuple(size),
        baseline=sample.baseline.data[window].copy(),
        follow_up=sample.follow_up.data[window].copy(),
        difference=sample.difference.data[window].copy(),
        label=sample.label.data[window].copy(),
        kind=sample.kind,
    )


def crop_weighted(sample: Sample, patch_size, shift_margin: int,
                  rng: np.random.Generator) -> Patch:
    """
    Foreground-weighted crop.

    A random foreground voxel, shifted by up to ``shift_margin`` per axis,
    becomes the patch centre; the patch is clamped into the volume. Samples
    without foreground are cropped uniformly.
    """
    size = as_triple(patch_size, "patch_size")
    dims = np.array(sample.dims)
    if np.any(np.array(size) > dims):
        raise SamplerError(f"patch {size} does not fit in volume {tuple(dims)}")
    highest = dims - np.array(size)

    foreground = np.argwhere(sample.label.data > 0)
    if len(foreground):
        centre = foreground[rng.integers(len(foreground))]
        shift = rng.integers(-shift_margin, shift_margin + 1, size=3)
        origin = centre + shift - np.array(size) // 2
        origin = np.clip(origin, 0, highest)
    else:
        origin = np.array([rng.integers(0, h + 1) for h in highest])
    return crop(sample, origin, size)


def flip_patch(patch: Patch, axis: int) -> Patch:
    return patch.transformed(lambda a: np.flip(a, axis=axis))


def rotate_patch(patch: Patch, k: int, axes: Tuple[int, int]) -> Patch:
    return patch.transformed(lambda a: np.rot90(a, k=k, axes=axes))


AXIS_PAIRS = ((0, 1), (0, 2), (1, 2))


def augment(patch: Patch, rng: np.random.Generator) -> Patch:
    """Identity, a flip about a random axis, or a random right-angle rotation."""
    if len(set(patch.size)) != 1:
        raise SamplerError(f"augmentation needs a cubic patch, got {patch.size}")
    choice = int(rng.integers(3))
    if choice == 1:
        return flip_patch(patch, int(rng.integers(3)))
    if choice == 2:
        axes = AXIS_PAIRS[int(rng.integers(3))]
        return rotate_patch(patch, int(rng.integers(1, 4)), axes)
    return patch


def make_batch(single_pool: Sequence[Sample], two_pool: Sequence[Sample],
               n_single: int, n_two: int, rng: np.random.Generator,
               patch_size=config.PATCH_SIZE, shift_margin: int = config.SHIFT_MARGIN) -> Batch:
    """
    Heterogeneous batch: ``n_two`` two-time-point then ``n_single`` single-time-point patches.
    """
    if n_single < 0 or n_two < 0:
        raise SamplerError("batch counts must be non-negative")
    if n_single > 0 and not single_pool:
        raise SamplerError(f"{n_single} single-time-point patches requested from an empty pool")
    if n_two > 0 and not two_pool:
        raise SamplerError(f"{n_two} two-time-point patches requested from an empty pool")
    patches = []
    for pool, count in ((two_pool, n_two), (single_pool, n_single)):
        for _ in range(count):
            sample = pool[int(rng.integers(len(pool)))]
            patches.append(augment(crop_weighted(sample, patch_size, shift_margin, rng), rng))
    return Batch(patches)
