"""Weakly supervised alignment loss over branch outputs.

The only supervision is whether two clouds overlap: the distance from branch a
to branch b is the attention-weighted mean, over a's clusters, of the distance
to the nearest descriptor in b. Nearest-neighbor selection inside the distance
does the correspondence mining implicitly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import InvalidInputError


@dataclass(frozen=True)
class TripletLossConfig:
    """margin: hinge offset gamma between positive and negative distances."""

    margin: float = 0.2

    def __post_init__(self):
        if self.margin < 0:
            raise InvalidInputError(f"margin must be >= 0, got {self.margin}")


def _lift(x, name: str) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64), name=name)


@dataclass(frozen=True)
class BranchOutput:
    """Descriptors (K, d) and strictly positive attentions (K,) of one branch.

    Fields may be Tensors (graph mode) or arrays, which are lifted to constant
    Tensors. Attention weighting happens inside alignment_distance, so uniform
    attentions (ones) reproduce an unweighted mean.
    """

    descriptors: Tensor
    attentions: Tensor

    def __post_init__(self):
        desc = _lift(self.descriptors, "descriptors")
        attn = _lift(self.attentions, "attentions")
        if desc.data.ndim != 2 or desc.data.shape[0] < 1:
            raise InvalidInputError(f"descriptors must be (K, d) with K >= 1, got {desc.data.shape}")
        if attn.data.shape != (desc.data.shape[0],):
            raise InvalidInputError("attentions must be (K,) matching the descriptor count")
        if not np.all(attn.data > 0):
            raise InvalidInputError("attentions must be strictly positive")
        object.__setattr__(self, "descriptors", desc)
        object.__setattr__(self, "attentions", attn)

    @property
    def k(self) -> int:
        return self.descriptors.data.shape[0]


def alignment_distance(a: BranchOutput, b: BranchOutput) -> Tensor:
    """Directed distance from a to b (scalar tensor).

    sum_i w'_i * min_j ||f_i^a - f_j^b||, with w' = a's attentions normalized
    to sum 1. Gradients reach the argmin descriptor of b (ties to lowest j)
    and a's attentions through the normalization. Not symmetric in a and b.
    """
    if a.descriptors.data.shape[1] != b.descriptors.data.shape[1]:
        raise InvalidInputError("branches carry descriptors of different widths")
    dists = ad.pairwise_l2(a.descriptors, b.descriptors)
    nearest = ad.row_min(dists)
    total = ad.vsum(a.attentions)
    weights = ad.div_by_scalar(a.attentions, total)
    return ad.dot(weights, nearest)


def triplet_loss(
    anchor: BranchOutput,
    positive: BranchOutput,
    negative: BranchOutput,
    cfg: TripletLossConfig = TripletLossConfig(),
) -> Tensor:
    """Hinge on the alignment-distance gap: [D(a,p) - D(a,n) + margin]_+."""
    d_pos = alignment_distance(anchor, positive)
    d_neg = alignment_distance(anchor, negative)
    return ad.relu(ad.add_const(ad.sub(d_pos, d_neg), cfg.margin))
