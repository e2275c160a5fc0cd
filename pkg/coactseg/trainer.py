"""
Mixed-batch training with Adam and the staged relation-regularizer schedule.
"""

import os
import time
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from coactseg import config
from coactseg.losses import LossWeights, total_loss
from coactseg.network import SegNet, SegNetConfig, forward, init_params, save_checkpoint
from coactseg.phantom import load_split
from coactseg.sampler import make_batch
from coactseg.tensor import backward, no_grad
from coactseg.utils import ConfigError, TrainingError, logger, write_table
from coactseg.volume import Sample, SampleKind

LOG_COLUMNS = ["iteration", "total", "l_al", "l_nl", "l_rr", "lambda2", "seconds"]


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = config.ITERATIONS
    lr: float = config.LEARNING_RATE
    adam_beta1: float = config.ADAM_BETA1
    adam_beta2: float = config.ADAM_BETA2
    adam_eps: float = config.ADAM_EPS
    n_single: int = config.BATCH_SINGLE
    n_two: int = config.BATCH_TWO
    patch_size: int = config.PATCH_SIZE
    shift_margin: int = config.SHIFT_MARGIN
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = config.DEFAULT_SEED
    log_every: int = config.LOG_EVERY
    checkpoint_every: int = config.CHECKPOINT_EVERY
    network: SegNetConfig = field(default_factory=SegNetConfig)

    def validate(self) -> None:
        if self.iterations <= 0:
            raise ConfigError(f"iterations must be positive, got {self.iterations}")
        if not self.lr > 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.n_single < 0 or self.n_two < 0 or self.n_single + self.n_two == 0:
            raise ConfigError("the batch needs at least one patch")
        if self.weights.switch_iteration > self.iterations:
            raise ConfigError(
                f"switch_iteration {self.weights.switch_iteration} exceeds iterations {self.iterations}")
        if self.log_every < 1 or self.checkpoint_every < 1:
            raise ConfigError("log_every and checkpoint_every must be >= 1")
        if self.patch_size % self.network.divisor:
            raise ConfigError(
                f"patch_size {self.patch_size} must be divisible by {self.network.divisor}")
        self.weights.validate()
        self.network.validate()


@dataclass
class AdamState:
    step: int
    m: List[np.ndarray]
    v: List[np.ndarray]

    @classmethod
    def zeros_like(cls, params: Sequence[np.ndarray]) -> "AdamState":
        return cls(0, [np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def adam_step(params: Sequence[np.ndarray], grads: Sequence[Optional[np.ndarray]],
              state: AdamState, lr: float, beta1: float = config.ADAM_BETA1,
              beta2: float = config.ADAM_BETA2,
              eps: float = config.ADAM_EPS) -> Tuple[List[np.ndarray], AdamState]:
    """
    One bias-corrected Adam update.

    Returns:
        New parameter arrays and the new state; the inputs are left untouched
    """
    step = state.step + 1
    bc1 = 1.0 - beta1 ** step
    bc2 = 1.0 - beta2 ** step
    new_params, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        g = np.zeros_like(p) if g is None else g
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * (g * g)
        new_params.append(p - lr * (m / bc1) / (np.sqrt(v / bc2) + eps))
        new_m.append(m)
        new_v.append(v)
    return new_params, AdamState(step, new_m, new_v)


@dataclass
class TrainResult:
    net: SegNet
    checkpoint: str
    log: pd.DataFrame


def split_pools(samples: Sequence[Sample]) -> Tuple[List[Sample], List[Sample]]:
    single = [s for s in samples if s.kind is SampleKind.SINGLE]
    two = [s for s in samples if s.kind is SampleKind.TWO]
    return single, two


def train_on_samples(samples: Sequence[Sample], cfg: TrainConfig,
                     out_dir: Optional[str] = None) -> TrainResult:
    """
    Optimize a fresh network on in-memory samples.

    Args:
        samples: Training samples of either kind
        cfg: Training configuration
        out_dir: Where checkpoints and train_log.csv go (None: keep in memory)

    Returns:
        The trained network, the final checkpoint path ("" without out_dir) and the log
    """
    cfg.validate()
    single_pool, two_pool = split_pools(samples)
    if cfg.n_single > 0 and not single_pool:
        raise TrainingError("configuration needs single-time-point samples but none were given")
    if cfg.n_two > 0 and not two_pool:
        raise TrainingError("configuration needs two-time-point samples but none were given")

    net = init_params(cfg.network)
    rng = np.random.default_rng(cfg.seed)
    state = AdamState.zeros_like([t.values for t in net.parameters()])
    records = []
    started = time.perf_counter()

    for iteration in range(cfg.iterations):
        batch = make_batch(single_pool, two_pool, cfg.n_single, cfg.n_two, rng,
                           patch_size=cfg.patch_size, shift_margin=cfg.shift_margin)
        outputs = forward(net, batch.stack("baseline"), batch.stack("follow_up"),
                          batch.stack("difference"))
        terms = total_loss(outputs, batch, cfg.weights, iteration)
        value = terms.total.item()
        if not np.isfinite(value):
            raise TrainingError(
                f"non-finite loss {value} at iteration {iteration} "
                f"(l_al={terms.l_al}, l_nl={terms.l_nl}, l_rr={terms.l_rr})")

        net.zero_grad()
        backward(terms.total)
        params = net.parameters()
        updated, state = adam_step([t.values for t in params], [t.grad for t in params], state,
                                   cfg.lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
        for tensor, values in zip(params, updated):
            tensor.values = values

        last = iteration == cfg.iterations - 1
        if (iteration + 1) % cfg.log_every == 0 or last:
            seconds = time.perf_counter() - started
            records.append([iteration, value, terms.l_al, terms.l_nl, terms.l_rr, terms.lambda2, seconds])
            logger.info(f"iter {iteration + 1}/{cfg.iterations} loss {value:.4f} "
                        f"(al {terms.l_al:.4f}, nl {terms.l_nl:.4f}, rr {terms.l_rr:.4f}, "
                        f"lambda2 {terms.lambda2:g})")
        if out_dir and (iteration + 1) % cfg.checkpoint_every == 0 and not last:
            save_checkpoint(net, os.path.join(out_dir, f"checkpoint_{iteration + 1:06d}.ckpt"),
                            seed=cfg.seed, iteration=iteration + 1)

    log = pd.DataFrame(records, columns=LOG_COLUMNS)
    checkpoint = ""
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        checkpoint = os.path.join(out_dir, "model_final.ckpt")
        save_checkpoint(net, checkpoint, seed=cfg.seed, iteration=cfg.iterations)
        write_table(log, os.path.join(out_dir, "train_log.csv"), seed=cfg.seed)
        logger.info(f"Saved final checkpoint to {checkpoint}")
    return TrainResult(net=net, checkpoint=checkpoint, log=log)


def train(manifest: pd.DataFrame, cfg: TrainConfig, out_dir: Optional[str]) -> TrainResult:
    """Train on the ``train`` split of a manifest."""
    if manifest is None or "split" not in manifest.columns:
        raise TrainingError("invalid manifest: no split column")
    samples = [sample for sample, _ in load_split(manifest, "train")]
    if not samples:
        raise TrainingError("manifest has no training samples")
    logger.info(f"Training on {len(samples)} samples for {cfg.iterations} iterations")
    return train_on_samples(samples, cfg, out_dir)


def staged(cfg: TrainConfig) -> TrainConfig:
    """The stage-by-stage recipe: regularizer off for the first half, on for the second."""
    return replace(cfg, weights=replace(cfg.weights, switch_iteration=cfg.iterations // 2))


def train_staged(manifest: pd.DataFrame, cfg: TrainConfig, out_dir: Optional[str]) -> TrainResult:
    return train(manifest, staged(cfg), out_dir)


def patch_diagnostics(net: SegNet, samples: Sequence[Sample], n_batches: int, seed: int,
                      patch_size: int = config.PATCH_SIZE,
                      shift_margin: int = config.SHIFT_MARGIN,
                      threshold: float = config.THRESHOLD) -> Dict[str, float]:
    """
    Per-head hard Dice on freshly sampled training patches, pooled over patches.

    Also reports ``head_gap``: mean |p_al_1 - p_al_2| on single-time-point patches.
    """
    single_pool, two_pool = split_pools(samples)
    rng = np.random.default_rng(seed)
    pooled = {"p_al_1": [0, 0], "p_al_2": [0, 0], "p_nl": [0, 0]}
    gaps = []
    with no_grad():
        for _ in range(n_batches):
            batch = make_batch(single_pool, two_pool, 1 if single_pool else 0, 1 if two_pool else 0,
                               rng, patch_size=patch_size, shift_margin=shift_margin)
            outputs = forward(net, batch.stack("baseline"), batch.stack("follow_up"),
                              batch.stack("difference"))
            labels = batch.stack("label") > 0
            for i, patch in enumerate(batch.patches):
                heads = ("p_al_1", "p_al_2") if patch.kind is SampleKind.SINGLE else ("p_nl",)
                for head in heads:
                    pred = getattr(outputs, head).values[i] > threshold
                    pooled[head][0] += 2 * int((pred & labels[i]).sum())
                    pooled[head][1] += int(pred.sum() + labels[i].sum())
                if patch.kind is SampleKind.SINGLE:
                    gaps.append(float(np.mean(np.abs(outputs.p_al_1.values[i] - outputs.p_al_2.values[i]))))
    report = {head: (1.0 if den == 0 else num / den) for head, (num, den) in pooled.items()}
    report["head_gap"] = float(np.mean(gaps)) if gaps else float("nan")
    return report
