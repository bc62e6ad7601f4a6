"""Differentiable operations: forward kernels plus their backward rules.

Each op registers a forward(*arrays, **static) -> (out, ctx) and a
vjp(grad, node, inputs) -> per-input gradients. The user-facing functions
at the bottom are thin wrappers over Tape.apply. Shapes are checked hard;
nothing broadcasts except the documented scalar-times-tensor case.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError, ShapeError
from .tape import Tape, Var, register
from .tensor import softmax_rows_raw

_NORM_EPS = 1e-12  # epsilon guard inside norm backward, per the division-safety concern


def _same_shape(a, b, op):
    if a.shape != b.shape:
        raise ShapeError(f"{op} requires identical shapes, got {a.shape} vs {b.shape}")


# ---------------------------------------------------------------- elementwise

def _add_fwd(a, b):
    _same_shape(a, b, "add")
    return a + b, {}

def _add_vjp(g, node, inputs):
    return [g, g]

def _sub_fwd(a, b):
    _same_shape(a, b, "sub")
    return a - b, {}

def _sub_vjp(g, node, inputs):
    return [g, -g]

def _mul_fwd(a, b):
    _same_shape(a, b, "mul")
    return a * b, {}

def _mul_vjp(g, node, inputs):
    a, b = inputs
    return [g * b, g * a]

def _div_fwd(a, b):
    _same_shape(a, b, "div")
    return a / b, {}

def _div_vjp(g, node, inputs):
    a, b = inputs
    return [g / b, -g * a / (b * b)]

def _neg_fwd(a):
    return -a, {}

def _neg_vjp(g, node, inputs):
    return [-g]

def _square_fwd(a):
    return a * a, {}

def _square_vjp(g, node, inputs):
    return [2.0 * inputs[0] * g]

def _relu_fwd(a):
    return np.maximum(a, 0.0), {}

def _relu_vjp(g, node, inputs):
    return [g * (inputs[0] > 0.0)]

def _scale_fwd(a, *, c):
    return a * c, {}

def _scale_vjp(g, node, inputs):
    return [g * node.ctx["c"]]

def _smul_fwd(s, a):
    if s.shape != ():
        raise ShapeError(f"smul scalar must be 0-d, got {s.shape}")
    return s * a, {}

def _smul_vjp(g, node, inputs):
    s, a = inputs
    return [np.asarray((g * a).sum()), g * s]

def _mul_const_fwd(a, *, c):
    _same_shape(a, np.asarray(c), "mul_const")
    return a * c, {}

def _mul_const_vjp(g, node, inputs):
    return [g * node.ctx["c"]]

def _clip_min_fwd(a, *, floor):
    return np.maximum(a, floor), {}

def _clip_min_vjp(g, node, inputs):
    return [g * (inputs[0] > node.ctx["floor"])]


# ---------------------------------------------------------------- structural

def _reshape_fwd(a, *, shape):
    if int(np.prod(shape)) != a.size:
        raise ShapeError(f"cannot reshape {a.shape} into {shape}")
    return a.reshape(shape), {"orig": a.shape}

def _reshape_vjp(g, node, inputs):
    return [g.reshape(node.ctx["orig"])]

def _transpose_fwd(a):
    if a.ndim < 2:
        raise ShapeError("transpose needs rank >= 2")
    return np.swapaxes(a, -1, -2), {}

def _transpose_vjp(g, node, inputs):
    return [np.swapaxes(g, -1, -2)]

def _concat_fwd(*arrays, axis):
    base = arrays[0].shape
    for a in arrays[1:]:
        if a.ndim != arrays[0].ndim:
            raise ShapeError("concat rank mismatch")
        for ax in range(a.ndim):
            if ax != axis and a.shape[ax] != base[ax]:
                raise ShapeError(f"concat off-axis dims differ: {a.shape} vs {base}")
    sizes = [a.shape[axis] for a in arrays]
    return np.concatenate(arrays, axis=axis), {"sizes": sizes}

def _concat_vjp(g, node, inputs):
    splits = np.cumsum(node.ctx["sizes"])[:-1]
    return list(np.split(g, splits, axis=node.ctx["axis"]))


# ------------------------------------------------------------ linear algebra

def _matmul_fwd(a, b):
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError("matmul expects rank-2 operands")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} x {b.shape}")
    return a @ b, {}

def _matmul_vjp(g, node, inputs):
    a, b = inputs
    return [g @ b.T, a.T @ g]

def _bmm_fwd(a, b):
    if a.ndim != 3 or b.ndim != 3:
        raise ShapeError("bmm expects rank-3 operands")
    if a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
        raise ShapeError(f"bmm shape mismatch: {a.shape} x {b.shape}")
    return a @ b, {}

def _bmm_vjp(g, node, inputs):
    a, b = inputs
    return [g @ np.swapaxes(b, -1, -2), np.swapaxes(a, -1, -2) @ g]


# ----------------------------------------------------------------- reductions

def _sum_all_fwd(a):
    return np.asarray(a.sum()), {}

def _sum_all_vjp(g, node, inputs):
    return [np.full_like(inputs[0], float(g))]

def _mean_all_fwd(a):
    return np.asarray(a.mean()), {}

def _mean_all_vjp(g, node, inputs):
    a = inputs[0]
    return [np.full_like(a, float(g) / a.size)]

def _norm_all_fwd(a):
    n = np.asarray(np.sqrt((a * a).sum()))
    return n, {"norm": n}

def _norm_all_vjp(g, node, inputs):
    n = max(float(node.ctx["norm"]), _NORM_EPS)
    return [float(g) * inputs[0] / n]

def _norm_batch_fwd(a):
    if a.ndim < 2:
        raise ShapeError("norm_batch expects a batched input")
    flat = a.reshape(a.shape[0], -1)
    n = np.sqrt((flat * flat).sum(axis=1))
    return n, {"norm": n}

def _norm_batch_vjp(g, node, inputs):
    a = inputs[0]
    n = np.maximum(node.ctx["norm"], _NORM_EPS)
    coef = (g / n).reshape((a.shape[0],) + (1,) * (a.ndim - 1))
    return [coef * a]

def _bdiv_scalar_fwd(a, s):
    if a.ndim < 2 or s.shape != (a.shape[0],):
        raise ShapeError(f"bdiv_scalar needs (B,...) / (B,), got {a.shape} / {s.shape}")
    return a / s.reshape((a.shape[0],) + (1,) * (a.ndim - 1)), {}

def _bdiv_scalar_vjp(g, node, inputs):
    a, s = inputs
    sr = s.reshape((a.shape[0],) + (1,) * (a.ndim - 1))
    da = g / sr
    ds = -(g * a).reshape(a.shape[0], -1).sum(axis=1) / (s * s)
    return [da, ds]

def _bmul_scalar_fwd(a, s):
    if a.ndim < 2 or s.shape != (a.shape[0],):
        raise ShapeError(f"bmul_scalar needs (B,...) * (B,), got {a.shape} * {s.shape}")
    return a * s.reshape((a.shape[0],) + (1,) * (a.ndim - 1)), {}

def _bmul_scalar_vjp(g, node, inputs):
    a, s = inputs
    sr = s.reshape((a.shape[0],) + (1,) * (a.ndim - 1))
    da = g * sr
    ds = (g * a).reshape(a.shape[0], -1).sum(axis=1)
    return [da, ds]


# -------------------------------------------------------------------- softmax

def _softmax_last_fwd(a):
    out = softmax_rows_raw(a)
    return out, {"out": out}

def _softmax_last_vjp(g, node, inputs):
    s = node.ctx["out"]
    dot = (g * s).sum(axis=-1, keepdims=True)
    return [s * (g - dot)]


# -------------------------------------------------- spectral-penalty plumbing

def _sub_scaled_eye_fwd(gmat, lam):
    if gmat.ndim != 3 or gmat.shape[1] != gmat.shape[2]:
        raise ShapeError(f"sub_scaled_eye expects (B,C,C), got {gmat.shape}")
    if lam.shape != (gmat.shape[0],):
        raise ShapeError("sub_scaled_eye scale must be one scalar per batch item")
    eye = np.eye(gmat.shape[1])
    return gmat - lam[:, None, None] * eye, {}

def _sub_scaled_eye_vjp(g, node, inputs):
    return [g.copy(), -np.trace(g, axis1=1, axis2=2)]


# -------------------------------------------------------------- neural layers

def _conv2d_fwd(x, w, *, pad):
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError("conv2d expects x:(B,C,H,W), w:(M,C,kh,kw)")
    B, C, H, W = x.shape
    M, Cw, kh, kw = w.shape
    if Cw != C:
        raise ShapeError(f"conv2d channel mismatch: input {C}, weight {Cw}")
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    Ho = H + 2 * pad - kh + 1
    Wo = W + 2 * pad - kw + 1
    if Ho < 1 or Wo < 1:
        raise ShapeError("conv2d kernel larger than padded input")
    # windows view: (B, C, Ho, Wo, kh, kw); contraction over (C, kh, kw)
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))  # (B, Ho, Wo, M)
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2)), {"xp": xp,
                                                             "out_hw": (Ho, Wo)}

def _conv2d_vjp(g, node, inputs):
    x, w = inputs
    xp = node.ctx["xp"]
    pad = node.ctx["pad"]
    Ho, Wo = node.ctx["out_hw"]
    kh, kw = w.shape[2], w.shape[3]
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    dw = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))  # (M, C, kh, kw)
    # scatter the kernel taps back onto the padded input
    gw = np.tensordot(g, w, axes=([1], [0]))  # (B, Ho, Wo, C, kh, kw)
    dxp = np.zeros_like(xp)
    for di in range(kh):
        for dj in range(kw):
            dxp[:, :, di:di + Ho, dj:dj + Wo] += gw[:, :, :, :, di, dj].transpose(
                0, 3, 1, 2)
    H, W = x.shape[2], x.shape[3]
    dx = dxp[:, :, pad:pad + H, pad:pad + W]
    return [dx, dw]

def _maxpool2_fwd(x):
    if x.ndim != 4:
        raise ShapeError("maxpool2 expects (B,C,H,W)")
    B, C, H, W = x.shape
    if H % 2 or W % 2:
        raise ShapeError(f"maxpool2 needs even spatial dims, got {H}x{W}")
    win = x.reshape(B, C, H // 2, 2, W // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(B, C, H // 2, W // 2, 4)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return out, {"idx": idx, "in_shape": x.shape}

def _maxpool2_vjp(g, node, inputs):
    B, C, H, W = node.ctx["in_shape"]
    idx = node.ctx["idx"]
    gw = np.zeros((B, C, H // 2, W // 2, 4))
    np.put_along_axis(gw, idx[..., None], g[..., None], axis=-1)
    gx = gw.reshape(B, C, H // 2, W // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    return [gx.reshape(B, C, H, W)]

def _gap_hw_fwd(x):
    if x.ndim < 3:
        raise ShapeError("gap_hw expects at least rank-3 input")
    return x.mean(axis=(-1, -2)), {}

def _gap_hw_vjp(g, node, inputs):
    x = inputs[0]
    hw = x.shape[-1] * x.shape[-2]
    return [np.broadcast_to((g / hw)[..., None, None], x.shape).copy()]

def _linear_fwd(x, w, b):
    if x.ndim != 2 or w.ndim != 2 or b.ndim != 1:
        raise ShapeError("linear expects x:(B,n), w:(m,n), b:(m,)")
    if x.shape[1] != w.shape[1] or w.shape[0] != b.shape[0]:
        raise ShapeError(f"linear shape mismatch: {x.shape}, {w.shape}, {b.shape}")
    return x @ w.T + b, {}

def _linear_vjp(g, node, inputs):
    x, w, b = inputs
    return [g @ w, g.T @ x, g.sum(axis=0)]


def _bn_axes(x):
    if x.ndim == 4:
        return (0, 2, 3), x.shape[1], (1, x.shape[1], 1, 1)
    if x.ndim == 2:
        return (0,), x.shape[1], (1, x.shape[1])
    raise ShapeError("batchnorm expects rank-2 or rank-4 input")

def _batchnorm_fwd(x, gamma, beta, *, training, eps, momentum,
                   running_mean, running_var, update_stats):
    axes, C, pshape = _bn_axes(x)
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ShapeError("batchnorm scale/shift must be per-channel vectors")
    if training:
        mu = x.mean(axis=axes, keepdims=True)
        var = x.var(axis=axes, keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (x - mu) * inv
        if update_stats:
            count = x.size // C
            unbias = count / max(count - 1, 1)
            running_mean *= 1.0 - momentum
            running_mean += momentum * mu.reshape(C)
            running_var *= 1.0 - momentum
            running_var += momentum * var.reshape(C) * unbias
    else:
        mu = running_mean.reshape(pshape)
        inv = 1.0 / np.sqrt(running_var.reshape(pshape) + eps)
        xhat = (x - mu) * inv
    out = gamma.reshape(pshape) * xhat + beta.reshape(pshape)
    return out, {"xhat": xhat, "inv": inv, "axes": axes, "pshape": pshape}

def _batchnorm_vjp(g, node, inputs):
    x, gamma, beta = inputs
    xhat = node.ctx["xhat"]
    inv = node.ctx["inv"]
    axes = node.ctx["axes"]
    pshape = node.ctx["pshape"]
    dgamma = (g * xhat).sum(axis=axes)
    dbeta = g.sum(axis=axes)
    dxhat = g * gamma.reshape(pshape)
    if node.ctx["training"]:
        dx = inv * (dxhat
                    - dxhat.mean(axis=axes, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=axes, keepdims=True))
    else:
        dx = dxhat * inv
    return [dx, dgamma, dbeta]


# --------------------------------------------------------------------- losses

def _xent_fwd(logits, *, labels):
    if logits.ndim != 2:
        raise ShapeError("cross-entropy expects (B, num_classes) logits")
    labels = np.asarray(labels)
    B, K = logits.shape
    if labels.shape != (B,):
        raise ShapeError(f"labels shape {labels.shape} does not match batch {B}")
    if labels.min() < 0 or labels.max() >= K:
        raise ContractError("label id outside logit columns")
    shifted = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    picked = shifted[np.arange(B), labels]
    loss = np.asarray((lse - picked).mean())
    probs = softmax_rows_raw(logits)
    return loss, {"probs": probs}

def _xent_vjp(g, node, inputs):
    probs = node.ctx["probs"]
    labels = node.ctx["labels"]
    B = probs.shape[0]
    dlogits = probs.copy()
    dlogits[np.arange(B), labels] -= 1.0
    return [dlogits * (float(g) / B)]


def _triplet_fwd(emb, *, labels, margin):
    if emb.ndim != 2:
        raise ShapeError("triplet loss expects (B, dim) embeddings")
    labels = np.asarray(labels)
    B = emb.shape[0]
    if labels.shape != (B,):
        raise ShapeError("labels must align with embeddings")
    diff = emb[:, None, :] - emb[None, :, :]
    d2 = (diff * diff).sum(axis=-1)  # direct form: no cancellation for close pairs
    live = d2 > _NORM_EPS  # below the floor the distance gradient is cut
    dist = np.sqrt(np.maximum(d2, _NORM_EPS))
    same = labels[:, None] == labels[None, :]
    pos_mask = same & ~np.eye(B, dtype=bool)
    neg_mask = ~same
    if not pos_mask.any(axis=1).all():
        raise ContractError("every anchor needs at least one positive (K >= 2)")
    if not neg_mask.any(axis=1).all():
        raise ContractError("every anchor needs at least one negative (P >= 2)")
    pos_idx = np.where(pos_mask, dist, -np.inf).argmax(axis=1)
    neg_idx = np.where(neg_mask, dist, np.inf).argmin(axis=1)
    anchors = np.arange(B)
    viol = margin + dist[anchors, pos_idx] - dist[anchors, neg_idx]
    active = viol > 0.0
    loss = np.asarray(np.maximum(viol, 0.0).mean())
    return loss, {"dist": dist, "live": live, "pos_idx": pos_idx,
                  "neg_idx": neg_idx, "active": active}

def _triplet_vjp(g, node, inputs):
    emb = inputs[0]
    dist = node.ctx["dist"]
    live = node.ctx["live"]
    pos_idx = node.ctx["pos_idx"]
    neg_idx = node.ctx["neg_idx"]
    active = node.ctx["active"]
    B = emb.shape[0]
    gemb = np.zeros_like(emb)
    coef = float(g) / B
    for a in range(B):
        if not active[a]:
            continue
        for b, sign in ((pos_idx[a], 1.0), (neg_idx[a], -1.0)):
            if not live[a, b]:
                continue
            dd = coef * sign * (emb[a] - emb[b]) / dist[a, b]
            gemb[a] += dd
            gemb[b] -= dd
    return [gemb]


_REGISTRY = {
    "add": (_add_fwd, _add_vjp),
    "sub": (_sub_fwd, _sub_vjp),
    "mul": (_mul_fwd, _mul_vjp),
    "div": (_div_fwd, _div_vjp),
    "neg": (_neg_fwd, _neg_vjp),
    "square": (_square_fwd, _square_vjp),
    "relu": (_relu_fwd, _relu_vjp),
    "scale": (_scale_fwd, _scale_vjp),
    "smul": (_smul_fwd, _smul_vjp),
    "mul_const": (_mul_const_fwd, _mul_const_vjp),
    "clip_min": (_clip_min_fwd, _clip_min_vjp),
    "reshape": (_reshape_fwd, _reshape_vjp),
    "transpose": (_transpose_fwd, _transpose_vjp),
    "concat": (_concat_fwd, _concat_vjp),
    "matmul": (_matmul_fwd, _matmul_vjp),
    "bmm": (_bmm_fwd, _bmm_vjp),
    "sum_all": (_sum_all_fwd, _sum_all_vjp),
    "mean_all": (_mean_all_fwd, _mean_all_vjp),
    "norm_all": (_norm_all_fwd, _norm_all_vjp),
    "norm_batch": (_norm_batch_fwd, _norm_batch_vjp),
    "bdiv_scalar": (_bdiv_scalar_fwd, _bdiv_scalar_vjp),
    "bmul_scalar": (_bmul_scalar_fwd, _bmul_scalar_vjp),
    "softmax_last": (_softmax_last_fwd, _softmax_last_vjp),
    "sub_scaled_eye": (_sub_scaled_eye_fwd, _sub_scaled_eye_vjp),
    "conv2d": (_conv2d_fwd, _conv2d_vjp),
    "maxpool2": (_maxpool2_fwd, _maxpool2_vjp),
    "gap_hw": (_gap_hw_fwd, _gap_hw_vjp),
    "linear": (_linear_fwd, _linear_vjp),
    "batchnorm": (_batchnorm_fwd, _batchnorm_vjp),
    "xent": (_xent_fwd, _xent_vjp),
    "triplet_hard": (_triplet_fwd, _triplet_vjp),
}

for _kind, (_f, _v) in _REGISTRY.items():
    register(_kind, _f, _v)


def registered_kinds() -> list[str]:
    return sorted(_REGISTRY)


# thin call-site wrappers ----------------------------------------------------

def add(a: Var, b: Var) -> Var: return a.tape.apply("add", a, b)
def sub(a: Var, b: Var) -> Var: return a.tape.apply("sub", a, b)
def mul(a: Var, b: Var) -> Var: return a.tape.apply("mul", a, b)
def div(a: Var, b: Var) -> Var: return a.tape.apply("div", a, b)
def neg(a: Var) -> Var: return a.tape.apply("neg", a)
def square(a: Var) -> Var: return a.tape.apply("square", a)
def relu(a: Var) -> Var: return a.tape.apply("relu", a)
def scale(a: Var, c: float) -> Var: return a.tape.apply("scale", a, c=float(c))
def smul(s: Var, a: Var) -> Var: return s.tape.apply("smul", s, a)
def mul_const(a: Var, c) -> Var:
    return a.tape.apply("mul_const", a, c=np.asarray(c, dtype=np.float64))
def clip_min(a: Var, floor: float) -> Var:
    return a.tape.apply("clip_min", a, floor=float(floor))
def reshape(a: Var, shape) -> Var: return a.tape.apply("reshape", a, shape=tuple(shape))
def transpose(a: Var) -> Var: return a.tape.apply("transpose", a)
def concat(vars_, axis: int) -> Var:
    return vars_[0].tape.apply("concat", *vars_, axis=int(axis))
def matmul(a: Var, b: Var) -> Var: return a.tape.apply("matmul", a, b)
def bmm(a: Var, b: Var) -> Var: return a.tape.apply("bmm", a, b)
def sum_all(a: Var) -> Var: return a.tape.apply("sum_all", a)
def mean_all(a: Var) -> Var: return a.tape.apply("mean_all", a)
def norm_all(a: Var) -> Var: return a.tape.apply("norm_all", a)
def norm_batch(a: Var) -> Var: return a.tape.apply("norm_batch", a)
def bdiv_scalar(a: Var, s: Var) -> Var: return a.tape.apply("bdiv_scalar", a, s)
def bmul_scalar(a: Var, s: Var) -> Var: return a.tape.apply("bmul_scalar", a, s)
def softmax_last(a: Var) -> Var: return a.tape.apply("softmax_last", a)
def sub_scaled_eye(gmat: Var, lam: Var) -> Var:
    return gmat.tape.apply("sub_scaled_eye", gmat, lam)
def conv2d(x: Var, w: Var, pad: int) -> Var:
    return x.tape.apply("conv2d", x, w, pad=int(pad))
def maxpool2(x: Var) -> Var: return x.tape.apply("maxpool2", x)
def gap_hw(x: Var) -> Var: return x.tape.apply("gap_hw", x)
def linear(x: Var, w: Var, b: Var) -> Var: return x.tape.apply("linear", x, w, b)
def batchnorm(x: Var, gamma: Var, beta: Var, *, training: bool,
              running_mean: np.ndarray, running_var: np.ndarray,
              eps: float = 1e-5, momentum: float = 0.1,
              update_stats: bool = True) -> Var:
    return x.tape.apply("batchnorm", x, gamma, beta, training=bool(training),
                        eps=float(eps), momentum=float(momentum),
                        running_mean=running_mean, running_var=running_var,
                        update_stats=bool(update_stats))
def cross_entropy_op(logits: Var, labels) -> Var:
    return logits.tape.apply("xent", logits, labels=np.asarray(labels, dtype=np.int64))
def triplet_hard_op(emb: Var, labels, margin: float) -> Var:
    return emb.tape.apply("triplet_hard", emb,
                          labels=np.asarray(labels, dtype=np.int64),
                          margin=float(margin))
