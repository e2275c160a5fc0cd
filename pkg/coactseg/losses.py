"""
Dice supervision for heterogeneous labels, the longitudinal relation
regularizer and the staged total loss L = L_al + lambda1 * L_nl + lambda2 * L_rr.
"""

from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from coactseg import config
from coactseg import tensor as T
from coactseg.network import PredictionTriple
from coactseg.sampler import Batch
from coactseg.tensor import Tensor
from coactseg.utils import ConfigError, LossError, ShapeError
from coactseg.volume import SampleKind

ArrayLike = Union[np.ndarray, Tensor]


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = config.LAMBDA1
    lambda2: float = config.LAMBDA2
    switch_iteration: int = config.SWITCH_ITERATION

    def validate(self) -> None:
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ConfigError("loss weights must be non-negative")
        if self.switch_iteration < 0:
            raise ConfigError("switch_iteration must be non-negative")

    def lambda2_at(self, iteration: int) -> float:
        """The regularizer weight is zero strictly before the switch iteration."""
        return 0.0 if iteration < self.switch_iteration else float(self.lambda2)


@dataclass
class LossTerms:
    total: Tensor
    l_al: float
    l_nl: float
    l_rr: float
    lambda2: float


def _constant(y: ArrayLike, like: Tensor) -> Tensor:
    y = y if isinstance(y, Tensor) else Tensor(np.asarray(y, dtype=np.float64))
    if y.shape != like.shape:
        raise ShapeError(f"label shape {y.shape} does not match prediction {like.shape}")
    # labels never receive gradient
    return y.detach()


def dice_loss(p: Tensor, y: ArrayLike, eps: float = config.DICE_SMOOTH) -> Tensor:
    """1 - (2 sum(p y) + eps) / (sum(p) + sum(y) + eps)."""
    y = _constant(y, p)
    overlap = T.sum_all(p * y)
    return 1.0 - (overlap * 2.0 + eps) / (T.sum_all(p) + float(y.values.sum()) + eps)


def loss_all(triple: PredictionTriple, y_al: ArrayLike) -> Tensor:
    """Single-time-point supervision: both all-lesion heads against the same label."""
    return dice_loss(triple.p_al_1, y_al) + dice_loss(triple.p_al_2, y_al)


def loss_new(triple: PredictionTriple, y_nl: ArrayLike) -> Tensor:
    """Two-time-point supervision of the new-lesion head."""
    return dice_loss(triple.p_nl, y_nl)


def relation_regularizer(triple: PredictionTriple, kind: SampleKind,
                         y_nl: Optional[ArrayLike] = None) -> Tensor:
    """
    Longitudinal relation constraint.

    Single-time-point: mean (p_al_1 - p_al_2)^2 over the patch.
    Two-time-point: mean p_al_1^2 plus mean (p_al_2 - 1)^2 over new-lesion voxels;
    zero when the patch holds no new lesion.
    """
    kind = SampleKind(kind)
    if kind is SampleKind.SINGLE:
        return T.mean(T.square(triple.p_al_1 - triple.p_al_2))
    if y_nl is None:
        raise LossError("two-time-point relation terms need the new-lesion label")
    mask = _constant(y_nl, triple.p_al_1)
    support = float(mask.values.sum())
    if support == 0:
        return Tensor(0.0)
    absent_at_baseline = T.sum_all(T.square(triple.p_al_1 * mask)) / support
    present_at_follow_up = T.sum_all(T.square((triple.p_al_2 - 1.0) * mask)) / support
    return absent_at_baseline + present_at_follow_up


def total_loss(outputs: PredictionTriple, batch: Batch, weights: LossWeights,
               iteration: int) -> LossTerms:
    """
    Staged total loss over a mixed batch.

    L_al is averaged over single-time-point patches, L_nl over two-time-point
    patches and L_rr over all patches; a term without patches contributes 0.
    """
    labels = batch.stack("label")
    single = batch.indices(SampleKind.SINGLE)
    two = batch.indices(SampleKind.TWO)

    l_al = _group_mean([loss_all(outputs.select(i), labels[i:i + 1]) for i in single])
    l_nl = _group_mean([loss_new(outputs.select(i), labels[i:i + 1]) for i in two])
    l_rr = _group_mean([
        relation_regularizer(outputs.select(i), batch.patches[i].kind,
                             labels[i:i + 1] if batch.patches[i].kind is SampleKind.TWO else None)
        for i in range(len(batch))
    ])

    lambda2 = weights.lambda2_at(iteration)
    total = l_al + l_nl * float(weights.lambda1)
    if lambda2 > 0:
        total = total + l_rr * lambda2
    return LossTerms(total=total, l_al=l_al.item(), l_nl=l_nl.item(), l_rr=l_rr.item(),
                     lambda2=lambda2)


def _group_mean(terms) -> Tensor:
    if not terms:
        return Tensor(0.0)
    acc = terms[0]
    for term in terms[1:]:
        acc = acc + term
    return acc / float(len(terms))
