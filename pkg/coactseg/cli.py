"""
Command-line surface: phantom, train, infer, eval, gradcheck, ablate, report.

Every subcommand reads an optional key = value config file (``--config``) and
``--key value`` overrides, which win. Exit codes: 0 success, 1 usage error,
2 runtime failure, 3 verification failure.
"""

import argparse
import os
import sys
import time
from typing import List, Optional

import numpy as np

from coactseg import config as settings
from coactseg.config import RunConfig
from coactseg.utils import (
    CoactSegError, ConfigError, VerificationError, VolumeFormatError, logger, setup_logging,
    write_table,
)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2
EXIT_VERIFICATION = 3

COMMANDS = ("phantom", "train", "infer", "eval", "gradcheck", "ablate", "report")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="coactseg", description="CoactSeg desk-scale toolkit.")
    subparsers = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    helps = {
        "phantom": "generate a phantom dataset and its manifest",
        "train": "train a model on the manifest's train split",
        "infer": "sliding-window predictions for the validation split",
        "eval": "score the validation split and store the report",
        "gradcheck": "finite-difference check of the full network and total loss",
        "ablate": "run the regularizer / data-mixture ablation grid",
        "report": "render a stored evaluation run (markdown, CSV, Excel)",
    }
    for name in COMMANDS:
        sub = subparsers.add_parser(name, help=helps[name], description=helps[name])
        sub.add_argument("--config", help="key = value config file")
        sub.add_argument("--run-id", type=int, default=None, help="stored run to report (report only)")
        for key, text in RunConfig.keys().items():
            sub.add_argument(f"--{key}", dest=f"key_{key}", default=None, metavar="VALUE", help=text)
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    base = RunConfig.load(args.config) if args.config else RunConfig()
    overrides = {key[4:]: value for key, value in vars(args).items()
                 if key.startswith("key_") and value is not None}
    return base.with_overrides(overrides)


def _require(path: str, what: str) -> None:
    if not os.path.exists(path):
        raise FileNotFoundError(f"{what} not found: {path}")


# commands -------------------------------------------------------------------

def cmd_phantom(cfg: RunConfig, args: argparse.Namespace) -> int:
    from coactseg.phantom import gen_dataset

    out_dir = os.path.dirname(cfg.manifest_path)
    manifest = gen_dataset(cfg.phantom_config(), cfg.n_train_single, cfg.n_train_two, out_dir,
                           val_single=cfg.n_val_single, val_two=cfg.n_val_two)
    cfg.save(os.path.join(out_dir, "run.cfg"))
    logger.info(f"Wrote {len(manifest)} samples to {cfg.manifest_path}")
    return EXIT_OK


def cmd_train(cfg: RunConfig, args: argparse.Namespace) -> int:
    from coactseg.phantom import read_manifest
    from coactseg.trainer import train

    _require(cfg.manifest_path, "manifest")
    result = train(read_manifest(cfg.manifest_path), cfg.train_config(), cfg.train_dir)
    cfg.save(os.path.join(cfg.train_dir, "run.cfg"))
    logger.info(f"Final loss {result.log['total'].iloc[-1]:.4f}; checkpoint {result.checkpoint}")
    return EXIT_OK


def cmd_infer(cfg: RunConfig, args: argparse.Namespace) -> int:
    from coactseg.inference import sliding_window_predict, write_predictions
    from coactseg.network import load_checkpoint
    from coactseg.phantom import load_split, read_manifest

    _require(cfg.manifest_path, "manifest")
    _require(cfg.checkpoint_path, "checkpoint")
    net, _ = load_checkpoint(cfg.checkpoint_path)
    infer_cfg = cfg.inference_config()
    for sample, _ in load_split(read_manifest(cfg.manifest_path), "val"):
        write_predictions(sliding_window_predict(net, sample, infer_cfg), cfg.predict_dir,
                          sample.sample_id)
    return EXIT_OK


def cmd_eval(cfg: RunConfig, args: argparse.Namespace) -> int:
    from coactseg import database
    from coactseg.metrics import evaluate_dataset
    from coactseg.phantom import read_manifest

    _require(cfg.manifest_path, "manifest")
    _require(cfg.checkpoint_path, "checkpoint")
    report = evaluate_dataset(read_manifest(cfg.manifest_path), cfg.checkpoint_path,
                              cfg.inference_config(), cfg.metric_options())
    os.makedirs(cfg.report_dir, exist_ok=True)
    report.to_csv(os.path.join(cfg.report_dir, "metrics.csv"), seed=cfg.seed)
    with open(os.path.join(cfg.report_dir, "metrics.md"), "w", encoding="utf-8") as handle:
        handle.write(report.to_markdown())

    database.create_database(cfg.database_path)
    run_id = database.save_run(os.path.abspath(cfg.workdir), "eval", cfg.seed, cfg.dump(),
                               cfg.database_path)
    database.save_case_metrics(run_id, report, cfg.database_path)
    logger.info(f"Stored evaluation as run {run_id}; report in {cfg.report_dir}")
    print(report.to_markdown())
    return EXIT_OK


def _gradcheck_loss(cfg: RunConfig):
    from coactseg.losses import LossWeights, total_loss
    from coactseg.network import forward
    from coactseg.sampler import Batch, Patch
    from coactseg.volume import SampleKind

    rng = np.random.default_rng(cfg.seed)
    size = (cfg.gradcheck_size,) * 3
    patches = []
    for kind in (SampleKind.TWO, SampleKind.SINGLE):
        baseline = rng.standard_normal(size)
        follow_up = baseline.copy() if kind is SampleKind.SINGLE else rng.standard_normal(size)
        patches.append(Patch(origin=(0, 0, 0), size=size, baseline=baseline, follow_up=follow_up,
                             difference=follow_up - baseline,
                             label=(rng.random(size) < 0.2).astype(np.uint8), kind=kind))
    batch = Batch(patches)
    weights = LossWeights(cfg.lambda1, max(cfg.lambda2, 1.0), switch_iteration=0)

    def loss(net):
        outputs = forward(net, batch.stack("baseline"), batch.stack("follow_up"),
                          batch.stack("difference"))
        return total_loss(outputs, batch, weights, iteration=0).total
    return loss


def cmd_gradcheck(cfg: RunConfig, args: argparse.Namespace) -> int:
    from coactseg.network import check_model_gradients, init_params

    started = time.perf_counter()
    net = init_params(cfg.network_config())
    errors = check_model_gradients(net, _gradcheck_loss(cfg), eps=cfg.gradcheck_eps,
                                   n_coords=cfg.gradcheck_coords, seed=cfg.seed)
    worst_name = max(errors, key=errors.get)
    worst = errors[worst_name]
    print(f"max relative error {worst:.3e} ({worst_name}); "
          f"{len(errors)} tensors in {time.perf_counter() - started:.1f}s")
    if not worst < cfg.gradcheck_tolerance:
        raise VerificationError(
            f"gradient check failed: {worst:.3e} >= tolerance {cfg.gradcheck_tolerance:.1e}")
    return EXIT_OK


def cmd_ablate(cfg: RunConfig, args: argparse.Namespace) -> int:
    from coactseg.ablation import ablation_markdown, run_ablation
    from coactseg.phantom import read_manifest

    _require(cfg.manifest_path, "manifest")
    frame = run_ablation(read_manifest(cfg.manifest_path), cfg.train_config(),
                         list(cfg.ablation_seeds), cfg.inference_config(), cfg.metric_options(),
                         workers=settings.THREADS)
    os.makedirs(cfg.report_dir, exist_ok=True)
    write_table(frame, os.path.join(cfg.report_dir, "ablation_cases.csv"), seed=cfg.seed,
                float_format="%.6f", na_rep="N/A")
    markdown = ablation_markdown(frame)
    with open(os.path.join(cfg.report_dir, "ablation.md"), "w", encoding="utf-8") as handle:
        handle.write(markdown)
    print(markdown)
    return EXIT_OK


def cmd_report(cfg: RunConfig, args: argparse.Namespace) -> int:
    from coactseg import database
    from coactseg.metrics import MetricsReport

    _require(cfg.database_path, "results database")
    run_id = args.run_id
    rows = database.get_case_metrics(run_id, cfg.database_path)
    if rows.empty:
        raise CoactSegError("no stored metrics for the requested run")
    report = MetricsReport(rows)
    os.makedirs(cfg.report_dir, exist_ok=True)
    report.to_csv(os.path.join(cfg.report_dir, "stored_metrics.csv"),
                  seed=database.get_run_seed(run_id, cfg.database_path))
    database.export_metrics_to_excel(os.path.join(cfg.report_dir, "stored_metrics.xlsx"), run_id,
                                     cfg.database_path)
    print(report.to_markdown())
    return EXIT_OK


HANDLERS = {
    "phantom": cmd_phantom,
    "train": cmd_train,
    "infer": cmd_infer,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "ablate": cmd_ablate,
    "report": cmd_report,
}


def main(argv: Optional[List[str]] = None) -> int:
    """Parse arguments, run one subcommand and return its exit code."""
    try:
        args = build_parser().parse_args(argv)
        cfg = resolve_config(args)
    except (UsageError, ConfigError) as e:
        print(f"coactseg: usage error: {e}", file=sys.stderr)
        return EXIT_USAGE

    os.makedirs(cfg.workdir, exist_ok=True)
    setup_logging(os.path.join(cfg.workdir, settings.LOG_FILENAME))
    try:
        return HANDLERS[args.command](cfg, args)
    except VerificationError as e:
        logger.error(str(e))
        return EXIT_VERIFICATION
    except ConfigError as e:
        logger.error(f"configuration error: {e}")
        return EXIT_USAGE
    except (CoactSegError, VolumeFormatError, OSError, ValueError) as e:
        logger.error(f"{args.command} failed: {e}")
        return EXIT_RUNTIME
