"""Two-stage training: frozen-backbone warmup, then the full objective.

Stage 1 updates only reductions, classifier and attention parameters with
the identity + triplet terms; stage 2 frees every layer and adds the
activation/weight spectral penalties. The learning rate starts at the
base value and decays by the configured factor after each stage-2
milestone epoch.

Batches follow the P-identities x K-instances composition. All
randomness (sampling, dropout masks, per-step power-iteration starts)
derives from the master seed through named sub-streams, so a (config,
seed) pair fully determines the run.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import ops
from .errors import ContractError
from .evaluate import cmc_topk, mean_ap, rank_gallery
from .losses import LossWeights, combine_loss_t
from .network import TwoBranchNet
from .rng import sub_rng, sub_seed
from .tape import Tape, backward
from .toydata import ToyDataset


@dataclass(frozen=True)
class TrainSchedule:
    stage1_epochs: int = 2
    stage2_epochs: int = 12
    base_lr: float = 3e-4
    lr_decay: float = 0.1
    milestones: tuple = (6, 8)   # stage-2 epochs after which the decay applies,
                                 # at the reference run's 1/2 and 2/3 fractions
    batch_p: int = 16
    batch_k: int = 4
    steps_per_epoch: int = 12    # P x K draws per epoch at desk scale

    def __post_init__(self):
        if self.stage1_epochs < 0 or self.stage2_epochs < 1:
            raise ContractError("stage1 >= 0 and stage2 >= 1 epochs required")
        if any(m < 1 or m > self.stage2_epochs for m in self.milestones):
            raise ContractError("milestones must lie within stage 2")
        if list(self.milestones) != sorted(self.milestones):
            raise ContractError("milestones must be increasing")
        if self.batch_p < 2 or self.batch_k < 2:
            raise ContractError("batch composition needs P >= 2 and K >= 2")
        if self.steps_per_epoch < 1:
            raise ContractError("steps_per_epoch must be >= 1")

    def stage2_lr(self, epoch: int) -> float:
        """Learning rate for a 1-based stage-2 epoch."""
        decays = sum(epoch > m for m in self.milestones)
        return self.base_lr * self.lr_decay ** decays


class Adam:
    """Standard Adam with bias correction; moments 0.9/0.999, eps 1e-8."""

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
             lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, g in grads.items():
            if name not in self.m:
                self.m[name] = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
            self.m[name] = self.beta1 * self.m[name] + (1 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1 - self.beta2) * g * g
            mhat = self.m[name] / c1
            vhat = self.v[name] / c2
            params[name] = params[name] - lr * mhat / (np.sqrt(vhat) + self.eps)


@dataclass
class EpochRow:
    epoch: int          # global 1-based epoch index
    stage: int
    lr: float
    xent: float
    triplet: float
    of_term: float      # raw spectral terms, beta excluded
    ow_term: float
    total: float


@dataclass
class TrainResult:
    model: TwoBranchNet
    epochs: list
    metrics: dict       # top1, top5, map on the query/gallery split + train_top1
    seconds: float


def pk_batches(train_labels: np.ndarray, p: int, k: int, rng,
               steps: int = 1) -> list[np.ndarray]:
    """P x K batch index plan: `steps` draws of P identities, K instances each.

    Identities are drawn without replacement within a batch (all of them
    when fewer than P exist); instances without replacement within an
    identity when it has at least K.
    """
    ids = np.unique(train_labels)
    if len(ids) < 2:
        raise ContractError("dataset must contain at least two identities")
    by_id = {i: np.nonzero(train_labels == i)[0] for i in ids}
    if min(len(v) for v in by_id.values()) < 2:
        raise ContractError("every identity needs at least two training instances")
    batches = []
    for _ in range(steps):
        chunk = rng.choice(ids, size=min(p, len(ids)), replace=False)
        picks = []
        for ident in chunk:
            pool = by_id[ident]
            replace = len(pool) < k
            picks.append(rng.choice(pool, size=k, replace=replace))
        batches.append(np.concatenate(picks))
    return batches


def embed_images(model: TwoBranchNet, images: np.ndarray, batch: int = 64):
    """Eval-mode embeddings and logits; deterministic, no buffer updates."""
    embs, logits = [], []
    for start in range(0, len(images), batch):
        tape = Tape()
        out = model.forward(tape, images[start:start + batch], training=False,
                            want_of=False, update_stats=False)
        embs.append(out.embeddings.value)
        logits.append(out.logits.value)
    return np.concatenate(embs), np.concatenate(logits)


def evaluate_model(model: TwoBranchNet, dataset: ToyDataset) -> dict:
    """Retrieval metrics on the query/gallery split plus train top-1 accuracy."""
    q_img, q_lab = dataset.query
    g_img, g_lab = dataset.gallery
    q_emb, _ = embed_images(model, q_img)
    g_emb, _ = embed_images(model, g_img)
    ranking = rank_gallery(q_emb, g_emb, q_lab, g_lab)
    tr_img, tr_lab = dataset.train
    _, tr_logits = embed_images(model, tr_img)
    train_top1 = float((tr_logits.argmax(axis=1) == tr_lab).mean())
    return {
        "top1": cmc_topk(ranking, 1),
        "top5": cmc_topk(ranking, 5),
        "map": mean_ap(ranking),
        "train_top1": train_top1,
    }


def train(model: TwoBranchNet, dataset: ToyDataset, schedule: TrainSchedule,
          weights: LossWeights, seed: int = 0, on_epoch=None) -> TrainResult:
    """Run the two-stage schedule; deterministic given (model, data, seed).

    on_epoch, when given, is called with (model, EpochRow) after every
    epoch; useful for freeze audits and live logging.
    """
    started = time.monotonic()
    variant = model.variant
    train_images, train_labels = dataset.train
    if dataset.num_ids < 2:
        raise ContractError("degenerate dataset: need >= 2 identities")

    rng_sampler = sub_rng(seed, "sampler")
    rng_dropout = sub_rng(seed, "dropout")
    adam = Adam()
    rows: list[EpochRow] = []
    step_counter = 0
    global_epoch = 0
    ow_qs = None  # warm-started power-iteration directions (weight penalty only)

    for stage in (1, 2):
        n_epochs = schedule.stage1_epochs if stage == 1 else schedule.stage2_epochs
        trainable = model.trainable_names(stage)
        for epoch in range(1, n_epochs + 1):
            lr = schedule.base_lr if stage == 1 else schedule.stage2_lr(epoch)
            global_epoch += 1
            sums = np.zeros(5)  # xent, triplet, of, ow, total
            batches = pk_batches(train_labels, schedule.batch_p, schedule.batch_k,
                                 rng_sampler, steps=schedule.steps_per_epoch)
            for batch_idx in batches:
                imgs = train_images[batch_idx]
                labs = train_labels[batch_idx]
                svdo_seed = sub_seed(seed, "powerq", step_counter)
                want_of = variant.use_of and stage == 2
                want_ow = variant.use_ow and stage == 2

                tape = Tape()
                leaves = model.plant_leaves(tape)
                fwd = model.forward(tape, imgs, leaves, training=True,
                                    dropout_rng=rng_dropout, want_of=want_of,
                                    svdo_seed=svdo_seed)
                xent = ops.cross_entropy_op(fwd.logits, labs)
                triplet = None
                if variant.use_triplet:
                    triplet = ops.triplet_hard_op(fwd.embeddings, labs,
                                                  margin=weights.margin_alpha)
                of_total = None
                if want_of and fwd.of_terms:
                    terms = list(fwd.of_terms.values())
                    of_total = terms[0]
                    for term in terms[1:]:
                        of_total = of_total + term
                ow_total = None
                if want_ow:
                    if model.svdo.warm_start and ow_qs is not None:
                        ow_total, ow_qs = model.ow_term(tape, leaves, svdo_seed,
                                                        q0s=ow_qs, return_qs=True)
                    elif model.svdo.warm_start:
                        ow_total, ow_qs = model.ow_term(tape, leaves, svdo_seed,
                                                        return_qs=True)
                    else:
                        ow_total = model.ow_term(tape, leaves, svdo_seed)

                loss = combine_loss_t(xent,
                                      triplet,
                                      of_total if stage == 2 else None,
                                      ow_total if stage == 2 else None,
                                      weights)
                grads = backward(tape, loss)
                adam.step(model.params,
                          {n: grads.dense(leaves[n]) for n in trainable}, lr)
                sums += [float(xent.value),
                         float(triplet.value) if triplet is not None else 0.0,
                         float(of_total.value) if of_total is not None else 0.0,
                         float(ow_total.value) if ow_total is not None else 0.0,
                         float(loss.value)]
                step_counter += 1
            avg = sums / len(batches)
            rows.append(EpochRow(global_epoch, stage, lr, *avg))
            if on_epoch is not None:
                on_epoch(model, rows[-1])

    metrics = evaluate_model(model, dataset)
    return TrainResult(model=model, epochs=rows, metrics=metrics,
                       seconds=time.monotonic() - started)
