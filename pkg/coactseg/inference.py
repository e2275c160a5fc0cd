"""
Sliding-window whole-volume prediction.

Patches on a regular grid (last origin clamped to the volume edge) are
predicted independently; per-voxel probabilities are the mean over every
covering patch.
"""

import os
from dataclasses import dataclass
from typing import Dict, List

import numpy as np

from coactseg import config
from coactseg.network import HEADS, SegNet, forward
from coactseg.tensor import no_grad
from coactseg.utils import ConfigError, InferenceError, as_triple, logger
from coactseg.volume import LabelVolume, Sample, Volume3D, save_volume


@dataclass(frozen=True)
class InferenceConfig:
    patch_size: int = config.PATCH_SIZE
    stride: int = config.PATCH_SIZE // 4
    threshold: float = config.THRESHOLD

    def validate(self) -> None:
        patch = as_triple(self.patch_size, "patch_size")
        stride = as_triple(self.stride, "stride")
        if any(s < 1 or s > p for s, p in zip(stride, patch)):
            raise ConfigError(f"stride {stride} must lie in [1, patch_size {patch}]")
        if not 0 < self.threshold < 1:
            raise ConfigError(f"threshold must lie in (0, 1), got {self.threshold}")


@dataclass
class InferenceResult:
    probabilities: Dict[str, Volume3D]
    labels: Dict[str, LabelVolume]
    coverage: np.ndarray


def window_origins(extent: int, patch: int, stride: int) -> List[int]:
    """Regular origins along one axis; the final origin abuts the edge."""
    if patch > extent:
        raise InferenceError(f"patch {patch} exceeds volume extent {extent}")
    origins = list(range(0, extent - patch + 1, stride))
    if origins[-1] != extent - patch:
        origins.append(extent - patch)
    return origins


def patch_grid(dims, patch_size, stride) -> List[tuple]:
    patch = as_triple(patch_size, "patch_size")
    step = as_triple(stride, "stride")
    axes = [window_origins(d, p, s) for d, p, s in zip(dims, patch, step)]
    return [(z, y, x) for z in axes[0] for y in axes[1] for x in axes[2]]


def coverage_count(dims, patch_size, stride) -> np.ndarray:
    patch = as_triple(patch_size, "patch_size")
    counts = np.zeros(dims, dtype=np.int64)
    for origin in patch_grid(dims, patch, stride):
        counts[tuple(slice(o, o + p) for o, p in zip(origin, patch))] += 1
    return counts


def sliding_window_predict(net: SegNet, sample: Sample, cfg: InferenceConfig) -> InferenceResult:
    """
    Predict every head over the whole volume.

    Returns:
        Mean probabilities, binarized labels (probability > threshold) and the
        per-voxel coverage count; everything outside the brain mask is 0
    """
    cfg.validate()
    patch = as_triple(cfg.patch_size, "patch_size")
    dims = sample.dims
    if any(p > d for p, d in zip(patch, dims)):
        raise InferenceError(f"volume {dims} is smaller than patch {patch}")

    sums = {head: np.zeros(dims) for head in HEADS}
    counts = np.zeros(dims, dtype=np.int64)
    with no_grad():
        for origin in patch_grid(dims, patch, cfg.stride):
            window = tuple(slice(o, o + p) for o, p in zip(origin, patch))
            outputs = forward(net, sample.baseline.data[window], sample.follow_up.data[window],
                              sample.difference.data[window])
            for head, tensor in outputs.as_dict().items():
                sums[head][window] += tensor.values[0, 0]
            counts[window] += 1

    brain = sample.brain_mask.data > 0
    probabilities, labels = {}, {}
    for head in HEADS:
        mean = np.where(brain, sums[head] / counts, 0.0)
        probabilities[head] = Volume3D(mean, sample.baseline.spacing_mm)
        labels[head] = LabelVolume.from_array(mean > cfg.threshold, sample.baseline.spacing_mm)
    return InferenceResult(probabilities=probabilities, labels=labels, coverage=counts)


def predict_new_lesions(net: SegNet, sample: Sample, cfg: InferenceConfig) -> LabelVolume:
    """Binarized new-lesion head of a two-time-point sample."""
    return sliding_window_predict(net, sample, cfg).labels["p_nl"]


def write_predictions(result: InferenceResult, out_dir: str, stem: str) -> Dict[str, str]:
    """Write probability and label volumes of every head; returns the written paths."""
    os.makedirs(out_dir, exist_ok=True)
    paths = {}
    for head in HEADS:
        paths[f"{head}_prob"] = os.path.join(out_dir, f"{stem}_{head}_prob.cvol")
        paths[f"{head}_label"] = os.path.join(out_dir, f"{stem}_{head}_label.cvol")
        save_volume(result.probabilities[head], paths[f"{head}_prob"])
        save_volume(result.labels[head], paths[f"{head}_label"])
    logger.info(f"Wrote predictions for {stem} to {out_dir}")
    return paths
