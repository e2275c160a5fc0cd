"""
Ablation grid over the relation regularizer and the training-data mixture.

Rows: {without, with} L_rr x {two-time-point only, single-time-point only,
mixed} plus the staged mixed run, each averaged over several seeds and scored
on the validation split.
"""

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from typing import List, Optional

import numpy as np
import pandas as pd

from coactseg import config
from coactseg.inference import InferenceConfig, sliding_window_predict
from coactseg.metrics import MetricOptions, evaluate_case
from coactseg.phantom import load_split
from coactseg.trainer import TrainConfig, staged, train_on_samples
from coactseg.utils import derive_seed, logger, markdown_table
from coactseg.volume import SampleKind


@dataclass(frozen=True)
class AblationRow:
    name: str
    regularizer: bool
    use_two: bool
    use_single: bool
    staged: bool = False


GRID = [
    AblationRow("two_only", False, True, False),
    AblationRow("single_only", False, False, True),
    AblationRow("mixed", False, True, True),
    AblationRow("two_only_rr", True, True, False),
    AblationRow("single_only_rr", True, False, True),
    AblationRow("mixed_rr", True, True, True),
    AblationRow("mixed_rr_staged", True, True, True, staged=True),
]


def row_config(row: AblationRow, base: TrainConfig, seed: int) -> TrainConfig:
    """Training configuration of one grid row; the batch size stays fixed."""
    batch = base.n_single + base.n_two
    n_single = base.n_single if row.use_two and row.use_single else (batch if row.use_single else 0)
    n_two = batch - n_single
    weights = replace(base.weights, lambda2=base.weights.lambda2 if row.regularizer else 0.0,
                      switch_iteration=0)
    # same streams as RunConfig.train_config(seed=seed)
    cfg = replace(base, n_single=n_single, n_two=n_two, weights=weights, seed=seed,
                  network=replace(base.network, param_seed=derive_seed(seed, 2)))
    return staged(cfg) if row.staged else cfg


def _run_one(args):
    row, base, seed, train_samples, val_cases, infer_cfg, options = args
    cfg = row_config(row, base, seed)
    kinds = set()
    if row.use_two:
        kinds.add(SampleKind.TWO)
    if row.use_single:
        kinds.add(SampleKind.SINGLE)
    samples = [s for s in train_samples if s.kind in kinds]
    result = train_on_samples(samples, cfg, out_dir=None)
    records = []
    for sample, truth in val_cases:
        prediction = sliding_window_predict(result.net, sample, infer_cfg)
        for record in evaluate_case(prediction, sample, truth, options):
            record.update({"row": row.name, "seed": seed})
            records.append(record)
    logger.info(f"Ablation row {row.name} seed {seed} done")
    return records


def run_ablation(manifest: pd.DataFrame, base: TrainConfig, seeds: List[int],
                 infer_cfg: InferenceConfig, options: MetricOptions = MetricOptions(),
                 workers: int = config.THREADS, rows: Optional[List[AblationRow]] = None) -> pd.DataFrame:
    """
    Train and score every grid row for every seed.

    Returns:
        Long table of per-case metric rows tagged with ``row`` and ``seed``
    """
    train_samples = [s for s, _ in load_split(manifest, "train")]
    val_cases = load_split(manifest, "val")
    jobs = [(row, base, seed, train_samples, val_cases, infer_cfg, options)
            for row in (rows or GRID) for seed in seeds]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_one, jobs))
    else:
        results = [_run_one(job) for job in jobs]
    return pd.DataFrame([record for records in results for record in records])


def _score(frame: pd.DataFrame, row: str, kind: str, head: str, metric: str) -> float:
    """Seed-averaged mean of one metric; NaN when nothing applies."""
    selected = frame[(frame["row"] == row) & (frame["kind"] == kind) & (frame["head"] == head)]
    if selected.empty:
        return float("nan")
    per_seed = selected.groupby("seed")[metric].apply(lambda s: pd.to_numeric(s, errors="coerce").mean())
    return float(per_seed.mean())


def ablation_table(frame: pd.DataFrame, rows: Optional[List[AblationRow]] = None) -> pd.DataFrame:
    """
    Seven-row summary: new-lesion Dice/95HD/F1 on two-time-point validation
    cases and all-lesion Dice/95HD/F1 (head p_al_1) on single-time-point cases.
    A column group is N/A when the row never trained on that data kind.
    """
    table = []
    for row in rows or GRID:
        entry = {
            "L_rr": ("w/" if row.regularizer else "w/o") + ("*" if row.staged else ""),
            "two-time-point data": "yes" if row.use_two else "",
            "single-time-point data": "yes" if row.use_single else "",
        }
        for prefix, kind, head, active in (("new", "two", "p_nl", row.use_two),
                                           ("all", "single", "p_al_1", row.use_single)):
            for metric, label in (("dice", "Dice(%)"), ("hd95", "95HD(voxel)"), ("f1", "F1(%)")):
                value = _score(frame, row.name, kind, head, metric) if active else float("nan")
                if metric != "hd95":
                    value *= 100.0
                entry[f"{prefix} {label}"] = value
        table.append(entry)
    return pd.DataFrame(table)


def ablation_markdown(frame: pd.DataFrame) -> str:
    return markdown_table(ablation_table(frame)) + "\n"


def mean_new_lesion_dice(frame: pd.DataFrame, row: str) -> float:
    return _score(frame, row, "two", "p_nl", "dice")


def mean_head_gap(frame: pd.DataFrame, row: str) -> float:
    selected = frame[(frame["row"] == row) & (frame["kind"] == "single")]
    return float(np.mean(selected.groupby("seed")["head_gap"].mean())) if not selected.empty else float("nan")
