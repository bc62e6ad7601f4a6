"""Synthetic identity-retrieval task at desk scale.

Each identity is a fixed blocky color pattern occupying the central
vertical strip of the frame. Instances of an identity vary by a global
brightness jitter, a coin-flip horizontal mirror, per-instance background
clutter, and additive pixel noise. The jitter and clutter are the point:
brightness adds a strong common mode across channels, and the clutter is
identity-irrelevant structure that a plain classifier happily overfits.

Instances split disjointly into train / query / gallery per identity.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError
from .rng import sub_rng


@dataclass(frozen=True)
class ToyDataset:
    images: np.ndarray       # (N, C, H, W)
    labels: np.ndarray       # (N,)
    train_idx: np.ndarray
    query_idx: np.ndarray
    gallery_idx: np.ndarray
    num_ids: int

    def subset(self, idx):
        return self.images[idx], self.labels[idx]

    @property
    def train(self):
        return self.subset(self.train_idx)

    @property
    def query(self):
        return self.subset(self.query_idx)

    @property
    def gallery(self):
        return self.subset(self.gallery_idx)


def _upsample(block: np.ndarray, factor_h: int, factor_w: int) -> np.ndarray:
    return np.kron(block, np.ones((1, factor_h, factor_w)))


def make_toy_dataset(num_ids: int = 20, instances_per_id: int = 10,
                     image_shape=(3, 48, 16), noise: float = 0.15,
                     jitter: float = 0.4, clutter: float = 0.8,
                     cast: float = 1.5, flip_p: float = 0.5,
                     seed: int = 0) -> ToyDataset:
    """Generate the seeded toy retrieval task.

    noise: additive pixel noise scale; jitter: max relative brightness
    change per instance; clutter: amplitude of per-instance background
    patterns outside the identity strip; cast: amplitude of a per-instance
    rank-one color cast (random channel profile times a smooth spatial
    field), the coherent nuisance the spectral regularizer targets;
    flip_p: horizontal mirror probability. Zeroing all of them makes every
    instance of an identity bitwise identical.
    """
    if num_ids < 2:
        raise ContractError("need at least two identities")
    if instances_per_id < 3:
        raise ContractError("need at least three instances per identity to split")
    c, h, w = image_shape
    if h % 8 or w % 4:
        raise ContractError("image height must be divisible by 8 and width by 4")

    rng_id = sub_rng(seed, "identity-patterns")
    rng_inst = sub_rng(seed, "instances")
    rng_split = sub_rng(seed, "split")

    # identity signature: fine-grained pattern in the central strip, so the
    # identity information spreads over many directions while the clutter
    # and brightness nuisances stay coarse and dominant
    strip_lo, strip_hi = w // 4, w - w // 4
    strip_w = strip_hi - strip_lo
    patterns = []
    for _ in range(num_ids):
        low = rng_id.normal(scale=1.0, size=(c, h // 4, strip_w // 2))
        full = _upsample(low, 4, 2)
        patterns.append(full)

    images = np.zeros((num_ids * instances_per_id, c, h, w))
    labels = np.zeros(num_ids * instances_per_id, dtype=np.int64)
    pos = 0
    for ident in range(num_ids):
        for _ in range(instances_per_id):
            img = np.zeros((c, h, w))
            img[:, :, strip_lo:strip_hi] = patterns[ident]
            # identity-irrelevant clutter outside the strip
            if clutter > 0:
                side = rng_inst.normal(scale=clutter, size=(c, h // 8, w // 4))
                img_clutter = _upsample(side, 8, 4)
                img_clutter[:, :, strip_lo:strip_hi] = 0.0
                img += img_clutter
            if cast > 0:
                profile = rng_inst.normal(size=c)
                field = _upsample(rng_inst.uniform(0.0, 1.0, size=(1, h // 8, w // 4)),
                                  8, 4)[0]
                img += cast * profile[:, None, None] * field[None, :, :]
            if jitter > 0:
                img *= 1.0 + rng_inst.uniform(-jitter, jitter)
            if flip_p > 0 and rng_inst.random() < flip_p:
                img = img[:, :, ::-1]
            if noise > 0:
                img = img + rng_inst.normal(scale=noise, size=img.shape)
            images[pos] = img
            labels[pos] = ident
            pos += 1

    # disjoint per-identity split: ~40% train, ~30% query, rest gallery; the
    # small train share keeps memorization pressure on, the large held-out
    # share keeps the retrieval metrics low-variance
    train_idx, query_idx, gallery_idx = [], [], []
    n_query = max(1, int(instances_per_id * 0.3))
    n_train = max(2, instances_per_id - 2 * n_query)
    for ident in range(num_ids):
        base = ident * instances_per_id
        order = rng_split.permutation(instances_per_id) + base
        train_idx.extend(order[:n_train])
        query_idx.extend(order[n_train:n_train + n_query])
        gallery_idx.extend(order[n_train + n_query:])
    return ToyDataset(
        images=images,
        labels=labels,
        train_idx=np.array(sorted(train_idx)),
        query_idx=np.array(sorted(query_idx)),
        gallery_idx=np.array(sorted(gallery_idx)),
        num_ids=num_ids,
    )
