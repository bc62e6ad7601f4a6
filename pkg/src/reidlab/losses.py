"""Identity cross-entropy, batch-hard triplet mining, and the composite loss.

The composite objective is

    L = L_xent + beta_tr * L_triplet + beta_of * L_act + beta_ow * L_weight

with the activation/weight terms supplied by the spectral regularizer.
Shipped defaults: beta_tr = 1e-1, beta_of = 1e-6, beta_ow = 1e-3, and
triplet margin 1.2. Setting beta_tr = 0 gives the cross-entropy-only
variant used in the ablation grid.

Triplet mining uses plain Euclidean distance on unnormalized embeddings,
with a 1e-12 floor inside the square root so collapsed pairs produce a
zero (not infinite) gradient.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .errors import ContractError
from .tape import Tape, Var


@dataclass(frozen=True)
class LossWeights:
    beta_tr: float = 1e-1
    beta_of: float = 1e-6
    beta_ow: float = 1e-3
    margin_alpha: float = 1.2

    def __post_init__(self):
        for name in ("beta_tr", "beta_of", "beta_ow", "margin_alpha"):
            if getattr(self, name) < 0:
                raise ContractError(f"{name} must be non-negative")


@dataclass(frozen=True)
class Batch:
    """Embeddings with identity labels in P-identities x K-instances form."""
    embeddings: np.ndarray  # (B, dim)
    labels: np.ndarray      # (B,)

    def __post_init__(self):
        emb = np.asarray(self.embeddings, dtype=np.float64)
        labels = np.asarray(self.labels)
        if emb.ndim != 2 or labels.shape != (emb.shape[0],):
            raise ContractError("embeddings must be (B, dim) with one label per row")
        _, counts = np.unique(labels, return_counts=True)
        if len(set(counts.tolist())) != 1:
            raise ContractError("every identity must appear the same number of times")
        object.__setattr__(self, "embeddings", emb)
        object.__setattr__(self, "labels", labels)

    @property
    def num_identities(self) -> int:
        return len(np.unique(self.labels))

    @property
    def instances_per_identity(self) -> int:
        return self.embeddings.shape[0] // self.num_identities


def cross_entropy(logits, labels) -> float:
    """Mean negative log-softmax probability of the true identity."""
    tape = Tape()
    lv = tape.const(np.asarray(logits, dtype=np.float64))
    return float(ops.cross_entropy_op(lv, labels).value)


def batch_hard_triplet(batch: Batch, alpha: float) -> float:
    """Batch-hard margin loss: per anchor, the farthest positive and
    nearest negative define one triplet."""
    if batch.num_identities < 2:
        raise ContractError("triplet mining needs at least two identities")
    if batch.instances_per_identity < 2:
        raise ContractError("triplet mining needs at least two instances per identity")
    tape = Tape()
    ev = tape.const(batch.embeddings)
    return float(ops.triplet_hard_op(ev, batch.labels, margin=alpha).value)


def total_loss(xent: float, triplet: float, of_pen: float, ow_pen: float,
               w: LossWeights) -> float:
    """Exact weighted sum of the four components."""
    for v in (xent, triplet, of_pen, ow_pen):
        if not np.isfinite(v):
            raise ContractError("loss components must be finite")
    return float(xent + w.beta_tr * triplet + w.beta_of * of_pen + w.beta_ow * ow_pen)


def combine_loss_t(xent: Var | None, triplet: Var | None, of_pen: Var | None,
                   ow_pen: Var | None, w: LossWeights) -> Var:
    """Tape-level composite loss; None terms are simply dropped."""
    terms = []
    if xent is not None:
        terms.append(xent)
    if triplet is not None:
        terms.append(ops.scale(triplet, w.beta_tr))
    if of_pen is not None:
        terms.append(ops.scale(of_pen, w.beta_of))
    if ow_pen is not None:
        terms.append(ops.scale(ow_pen, w.beta_ow))
    if not terms:
        raise ContractError("composite loss needs at least one term")
    out = terms[0]
    for term in terms[1:]:
        out = out + term
    return out
