"""
Evaluation protocol: Dice, Jaccard, 95HD, ASD and lesion-wise F1.

Distance metrics return None when exactly one mask is empty (reported as
N/A); aggregation excludes those cases.
"""

import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy import ndimage

from coactseg import config
from coactseg.inference import InferenceConfig, InferenceResult, sliding_window_predict
from coactseg.network import load_checkpoint
from coactseg.phantom import TwoTimePointTruth, load_manifest_sample
from coactseg.utils import ShapeError, logger, markdown_table, write_table
from coactseg.volume import LabelVolume, Sample, SampleKind

STRUCTURE_26 = np.ones((3, 3, 3), dtype=bool)
STRUCTURE_6 = ndimage.generate_binary_structure(3, 1)
METRIC_COLUMNS = ["dice", "jaccard", "hd95", "asd", "f1"]
REPORT_COLUMNS = ["case_id", "kind", "head", "target"] + METRIC_COLUMNS + ["head_gap"]


@dataclass(frozen=True)
class MetricOptions:
    min_lesion_size: int = config.MIN_LESION_SIZE
    use_mm: bool = False


@dataclass
class LesionInstance:
    component_id: int
    voxels: np.ndarray
    size: int


def _arrays(pred, gt) -> Tuple[np.ndarray, np.ndarray]:
    p = pred.data if isinstance(pred, LabelVolume) else np.asarray(pred)
    g = gt.data if isinstance(gt, LabelVolume) else np.asarray(gt)
    if p.shape != g.shape:
        raise ShapeError(f"prediction {p.shape} and ground truth {g.shape} differ in shape")
    return p > 0, g > 0


def dice(pred, gt) -> float:
    p, g = _arrays(pred, gt)
    total = int(p.sum()) + int(g.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((p & g).sum()) / total


def jaccard(pred, gt) -> float:
    p, g = _arrays(pred, gt)
    union = int((p | g).sum())
    if union == 0:
        return 1.0
    return int((p & g).sum()) / union


def connected_components_26(mask) -> List[LesionInstance]:
    """26-connected components ordered by their first voxel in row-major order."""
    array = mask.data if isinstance(mask, LabelVolume) else np.asarray(mask)
    labelled, count = ndimage.label(array > 0, structure=STRUCTURE_26)
    if count == 0:
        return []
    flat = labelled.ravel()
    ids, first = np.unique(flat, return_index=True)
    order = [int(i) for _, i in sorted(zip(first[ids > 0], ids[ids > 0]))]
    instances = []
    for component_id, label in enumerate(order):
        voxels = np.argwhere(labelled == label)
        instances.append(LesionInstance(component_id, voxels, len(voxels)))
    return instances


def surface_voxels(mask: np.ndarray) -> np.ndarray:
    """Mask voxels with a 6-neighbour outside the mask or on the volume boundary."""
    mask = mask > 0
    return mask & ~ndimage.binary_erosion(mask, structure=STRUCTURE_6, border_value=0)


def directed_surface_distances(source: np.ndarray, target: np.ndarray,
                               spacing=(1.0, 1.0, 1.0)) -> np.ndarray:
    """Distance from every surface voxel of ``source`` to the nearest surface voxel of ``target``."""
    target_surface = surface_voxels(target)
    distance = ndimage.distance_transform_edt(~target_surface, sampling=spacing)
    return distance[surface_voxels(source)]


def _surface_distances(pred, gt, options: MetricOptions):
    p, g = _arrays(pred, gt)
    if not p.any() and not g.any():
        return "both-empty"
    if not p.any() or not g.any():
        return None
    spacing = (1.0, 1.0, 1.0)
    if options.use_mm and isinstance(gt, LabelVolume):
        spacing = gt.spacing_mm
    return (directed_surface_distances(p, g, spacing), directed_surface_distances(g, p, spacing))


def nearest_rank_percentile(values: np.ndarray, percentile: float) -> float:
    ordered = np.sort(values)
    rank = max(1, math.ceil(percentile / 100.0 * len(ordered)))
    return float(ordered[rank - 1])


def hd95(pred, gt, options: MetricOptions = MetricOptions()) -> Optional[float]:
    distances = _surface_distances(pred, gt, options)
    if distances is None:
        return None
    if isinstance(distances, str):
        return 0.0
    return max(nearest_rank_percentile(d, 95) for d in distances)


def asd(pred, gt, options: MetricOptions = MetricOptions()) -> Optional[float]:
    distances = _surface_distances(pred, gt, options)
    if distances is None:
        return None
    if isinstance(distances, str):
        return 0.0
    return float(np.concatenate(distances).mean())


def lesion_f1(pred, gt, min_size: int = config.MIN_LESION_SIZE) -> Optional[float]:
    """
    Lesion-wise F1 over components of at least ``min_size`` voxels.

    A ground-truth lesion is detected when any retained predicted lesion
    overlaps it by one voxel or more; a predicted lesion overlapping no
    retained ground-truth lesion is a false positive.
    """
    p, g = _arrays(pred, gt)
    pred_lesions = [c for c in connected_components_26(p) if c.size >= min_size]
    gt_lesions = [c for c in connected_components_26(g) if c.size >= min_size]
    if not pred_lesions and not gt_lesions:
        return None
    pred_union = _union(pred_lesions, p.shape)
    gt_union = _union(gt_lesions, g.shape)
    tp = sum(1 for c in gt_lesions if pred_union[tuple(c.voxels.T)].any())
    fn = len(gt_lesions) - tp
    fp = sum(1 for c in pred_lesions if not gt_union[tuple(c.voxels.T)].any())
    return 2.0 * tp / (2.0 * tp + fp + fn)


def _union(instances: Sequence[LesionInstance], shape) -> np.ndarray:
    union = np.zeros(shape, dtype=bool)
    for instance in instances:
        union[tuple(instance.voxels.T)] = True
    return union


def case_metrics(pred: LabelVolume, gt: LabelVolume, options: MetricOptions) -> Dict[str, Optional[float]]:
    return {
        "dice": dice(pred, gt),
        "jaccard": jaccard(pred, gt),
        "hd95": hd95(pred, gt, options),
        "asd": asd(pred, gt, options),
        "f1": lesion_f1(pred, gt, options.min_lesion_size),
    }


class MetricsReport:
    """Per-case rows (one per case and head) plus aggregate means."""

    def __init__(self, rows: pd.DataFrame):
        self.rows = rows.reindex(columns=REPORT_COLUMNS)

    @classmethod
    def from_records(cls, records: List[dict]) -> "MetricsReport":
        return cls(pd.DataFrame(records, columns=REPORT_COLUMNS))

    def aggregate(self) -> pd.DataFrame:
        """Means per (kind, head, target); not-applicable values are excluded."""
        numeric = self.rows.copy()
        for column in METRIC_COLUMNS + ["head_gap"]:
            numeric[column] = pd.to_numeric(numeric[column], errors="coerce")
        grouped = numeric.groupby(["kind", "head", "target"], sort=True)
        summary = grouped[METRIC_COLUMNS + ["head_gap"]].mean()
        summary["cases"] = grouped.size()
        return summary.reset_index()

    def to_csv(self, path: str, seed: Optional[int] = None) -> None:
        write_table(self.rows, path, seed=seed, float_format="%.6f", na_rep="N/A")

    def to_markdown(self) -> str:
        summary = self.aggregate()
        for column in ("dice", "jaccard", "f1"):
            summary[column] = summary[column] * 100.0
        table = markdown_table(summary)
        return ("Dice, Jaccard and F1 in %; 95HD and ASD in voxels (N/A: not applicable).\n\n"
                + table + "\n")


def evaluate_case(result: InferenceResult, sample: Sample,
                  truth: Optional[TwoTimePointTruth] = None,
                  options: MetricOptions = MetricOptions()) -> List[dict]:
    """
    Metric rows of one case.

    Two-time-point cases score p_nl against the new-lesion label and, when the
    hidden truth is known, p_al_1 / p_al_2 against the baseline / follow-up
    all-lesion masks. Single-time-point cases score both all-lesion heads.
    """
    brain = sample.brain_mask.data > 0
    gap = float(np.abs(result.probabilities["p_al_1"].data - result.probabilities["p_al_2"].data)[brain].mean())
    targets = []
    if sample.kind is SampleKind.TWO:
        targets.append(("p_nl", "new_lesions", sample.label))
        if truth is not None:
            targets.append(("p_al_1", "baseline_all", truth.baseline_all))
            targets.append(("p_al_2", "follow_up_all", truth.follow_up_all))
    else:
        targets.append(("p_al_1", "all_lesions", sample.label))
        targets.append(("p_al_2", "all_lesions", sample.label))

    rows = []
    for head, target, gt in targets:
        row = {"case_id": sample.sample_id, "kind": sample.kind.value, "head": head,
               "target": target, "head_gap": gap}
        row.update(case_metrics(result.labels[head], gt, options))
        rows.append(row)
    return rows


def evaluate_dataset(manifest: pd.DataFrame, checkpoint: str, cfg: InferenceConfig,
                     options: MetricOptions = MetricOptions(), split: str = "val") -> MetricsReport:
    """Predict and score every sample of ``split``."""
    net, _ = load_checkpoint(checkpoint)
    records = []
    for _, row in manifest[manifest["split"] == split].iterrows():
        sample, truth = load_manifest_sample(manifest, row)
        records.extend(evaluate_case(sliding_window_predict(net, sample, cfg), sample, truth, options))
        logger.info(f"Evaluated {sample.sample_id}")
    return MetricsReport.from_records(records)
