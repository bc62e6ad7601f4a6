"""Channel and position attention.

Channel attention builds a C x C affinity from inner products of flattened
channels, row-normalizes it with softmax, and residually mixes channels
scaled by a learnable gamma (initialized to zero so the module starts as a
no-op). Position attention does the same over the N = H*W pixel positions,
with query/key/value projection heads (1x1 conv + batch norm + ReLU).

Which projected map plays query, key or value is a convention carried over
from the segmentation lineage of these modules: the first head provides
queries, the second keys (normalization runs over keys), the third values.

Two APIs: plain-tensor functions for single feature maps, and `*_apply`
tape functions over batched (B,C,H,W) vars for the differentiable path.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ops
from . import tensor as tc
from .errors import ShapeError
from .tape import Tape, Var
from .tensor import Tensor, softmax_rows_raw

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


@dataclass(frozen=True)
class CamParams:
    """Channel-attention state: just the residual mixing coefficient."""
    gamma: float = 0.0

    def __post_init__(self):
        if not np.isfinite(self.gamma):
            raise ValueError("gamma must be finite")


@dataclass
class PamHead:
    """1x1 conv projection with per-channel batch norm (eval-mode stats)."""
    weight: np.ndarray    # (C, C) mixing matrix of the 1x1 conv
    bn_scale: np.ndarray  # (C,)
    bn_shift: np.ndarray
    bn_mean: np.ndarray
    bn_var: np.ndarray

    @classmethod
    def identity(cls, channels: int) -> "PamHead":
        # bn scale compensates the epsilon so the head is exactly x -> x
        return cls(weight=np.eye(channels),
                   bn_scale=np.full(channels, np.sqrt(1.0 + BN_EPS)),
                   bn_shift=np.zeros(channels),
                   bn_mean=np.zeros(channels),
                   bn_var=np.ones(channels))

    @classmethod
    def random(cls, channels: int, rng: np.random.Generator) -> "PamHead":
        std = np.sqrt(2.0 / channels)
        return cls(weight=rng.normal(scale=std, size=(channels, channels)),
                   bn_scale=np.ones(channels),
                   bn_shift=np.zeros(channels),
                   bn_mean=np.zeros(channels),
                   bn_var=np.ones(channels))

    def eval_single(self, a: np.ndarray) -> np.ndarray:
        """Apply to one (C,H,W) map with running statistics."""
        c, h, w = a.shape
        mixed = (self.weight @ a.reshape(c, h * w)).reshape(c, h, w)
        inv = 1.0 / np.sqrt(self.bn_var + BN_EPS)
        normed = (mixed - self.bn_mean[:, None, None]) * inv[:, None, None]
        out = normed * self.bn_scale[:, None, None] + self.bn_shift[:, None, None]
        return np.maximum(out, 0.0)


@dataclass
class PamParams:
    """Position-attention state: gamma plus the three projection heads."""
    gamma: float = 0.0
    heads: tuple = field(default_factory=tuple)  # (query, key, value) PamHead

    @classmethod
    def identity(cls, channels: int, gamma: float = 0.0) -> "PamParams":
        return cls(gamma=gamma, heads=tuple(PamHead.identity(channels) for _ in range(3)))

    @classmethod
    def random(cls, channels: int, seed: int = 0, gamma: float = 0.0) -> "PamParams":
        rng = np.random.default_rng(seed)
        return cls(gamma=gamma, heads=tuple(PamHead.random(channels, rng) for _ in range(3)))


@dataclass(frozen=True)
class AffinityMatrix:
    """Square row-stochastic attention matrix (channel C x C or pixel N x N)."""
    entries: np.ndarray
    kind: str  # "channel" | "pixel"

    def __post_init__(self):
        e = self.entries
        if e.ndim != 2 or e.shape[0] != e.shape[1]:
            raise ShapeError(f"affinity must be square, got {e.shape}")
        if self.kind not in ("channel", "pixel"):
            raise ValueError(f"unknown affinity kind {self.kind!r}")
        if not np.allclose(e.sum(axis=1), 1.0, atol=1e-8):
            raise ValueError("affinity rows must sum to 1")
        if e.min() < 0.0 or e.max() > 1.0:
            raise ValueError("affinity entries must lie in [0, 1]")

    @property
    def size(self) -> int:
        return self.entries.shape[0]


def _rows_stochastic(m: np.ndarray) -> bool:
    return bool(np.allclose(m.sum(axis=-1), 1.0, atol=1e-8))


# ------------------------------------------------------------- value-level API

def channel_affinity(a: Tensor) -> AffinityMatrix:
    """Row-softmaxed channel inner products of a (C,H,W) map."""
    f = tc.flatten_spatial(tc.tensor(a)).data
    return AffinityMatrix(softmax_rows_raw(f @ f.T), kind="channel")


def cam_forward(a: Tensor, params: CamParams) -> Tensor:
    """Residual channel-attention mix: gamma * X @ F, reshaped, plus the input."""
    a = tc.tensor(a)
    c, h, w = a.shape
    f = a.data.reshape(c, h * w)
    x = channel_affinity(a).entries
    return Tensor(params.gamma * (x @ f).reshape(c, h, w) + a.data)


def pixel_affinity(b: Tensor, c: Tensor) -> AffinityMatrix:
    """Row-softmaxed pixel affinities; rows index query pixels of `b`."""
    b = tc.tensor(b)
    c = tc.tensor(c)
    if b.shape != c.shape:
        raise ShapeError(f"pixel_affinity shape mismatch: {b.shape} vs {c.shape}")
    fb = tc.flatten_spatial(b).data
    fc = tc.flatten_spatial(c).data
    return AffinityMatrix(softmax_rows_raw(fb.T @ fc), kind="pixel")


def pam_forward(a: Tensor, params: PamParams) -> Tensor:
    """Residual position-attention mix with projected query/key/value maps."""
    a = tc.tensor(a)
    c, h, w = a.shape
    qh, kh, vh = params.heads
    q = qh.eval_single(a.data)
    k = kh.eval_single(a.data)
    v = vh.eval_single(a.data)
    s = pixel_affinity(Tensor(q), Tensor(k)).entries  # (N, N)
    fv = v.reshape(c, h * w)
    agg = fv @ s.T  # output pixel n mixes value pixels by affinity row n
    return Tensor(params.gamma * agg.reshape(c, h, w) + a.data)


# -------------------------------------------------------------- tape-level API

@dataclass
class HeadVars:
    """Tape handles for one PAM projection head plus its BN buffers."""
    weight: Var           # (C, C, 1, 1)
    bn_scale: Var         # (C,)
    bn_shift: Var
    bn_mean: np.ndarray   # running buffers, updated in training mode
    bn_var: np.ndarray


def _head_apply(x: Var, head: HeadVars, training: bool, update_stats: bool) -> Var:
    mixed = ops.conv2d(x, head.weight, pad=0)
    normed = ops.batchnorm(mixed, head.bn_scale, head.bn_shift, training=training,
                           running_mean=head.bn_mean, running_var=head.bn_var,
                           eps=BN_EPS, momentum=BN_MOMENTUM, update_stats=update_stats)
    return ops.relu(normed)


def cam_apply(tape: Tape, x: Var, gamma: Var) -> tuple[Var, Var]:
    """Batched channel attention on (B,C,H,W); returns (output, affinities)."""
    bsz, c, h, w = x.shape
    f = ops.reshape(x, (bsz, c, h * w))
    logits = ops.bmm(f, ops.transpose(f))
    aff = ops.softmax_last(logits)
    assert _rows_stochastic(aff.value), "channel affinity rows must sum to 1"
    agg = ops.reshape(ops.bmm(aff, f), (bsz, c, h, w))
    out = ops.smul(gamma, agg) + x
    return out, aff


def pam_apply(tape: Tape, x: Var, gamma: Var, heads, *, training: bool = False,
              update_stats: bool = True) -> tuple[Var, Var]:
    """Batched position attention on (B,C,H,W); returns (output, affinities)."""
    bsz, c, h, w = x.shape
    n = h * w
    qh, kh, vh = heads
    q = ops.reshape(_head_apply(x, qh, training, update_stats), (bsz, c, n))
    k = ops.reshape(_head_apply(x, kh, training, update_stats), (bsz, c, n))
    v = ops.reshape(_head_apply(x, vh, training, update_stats), (bsz, c, n))
    logits = ops.bmm(ops.transpose(q), k)  # (B, N, N), rows are query pixels
    aff = ops.softmax_last(logits)
    assert _rows_stochastic(aff.value), "pixel affinity rows must sum to 1"
    agg = ops.reshape(ops.bmm(v, ops.transpose(aff)), (bsz, c, h, w))
    out = ops.smul(gamma, agg) + x
    return out, aff
