"""Spectral diversity regularization.

The penalty drives the Gram matrix G = F F^T of a feature (or reshaped
weight) matrix toward an isotropic spectrum by squaring the gap between
its extreme eigenvalues: beta * (lambda_max - lambda_min)^2. Both extremes
come from power iteration so the whole term stays cheap and, unrolled on
the tape, exactly differentiable.

One power-iteration round is p <- X q, q <- X p; after the configured
number of rounds the estimate is ||q|| / ||p||, the magnitude of the
dominant eigenvalue. The first round runs on the raw unit q; between
subsequent rounds q is rescaled to unit length, which provably leaves the
ratio unchanged (it depends only on the direction entering the final
round) while keeping long runs inside float64 range. lambda_min is
recovered by a second pass on the shifted matrix X - lambda_max I, whose
dominant-magnitude eigenvalue is lambda_min - lambda_max; the same
initial q seeds both passes so a penalty evaluation is a deterministic
function of (input, config).

`exact_extreme_eigs` is a cyclic Jacobi eigensolver kept deliberately
independent of the power-iteration path: it is the oracle the estimates
are tested against, and the backing for the condition-number diagnostic.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import ops
from . import tensor as tc
from .errors import ContractError, ShapeError
from .tape import Tape, Var

DEGENERATE_NORM = 1e-12

__all__ = [
    "SvdoConfig", "PowerIterState", "WeightMatrixView",
    "gram", "power_iter_lambda", "svdo_penalty", "of_penalty", "ow_penalty",
    "condition_number", "exact_extreme_eigs",
    "draw_q0", "power_lambda_batch", "svdo_gap_batch",
    "of_penalty_batch_t", "ow_penalty_t",
]


@dataclass(frozen=True)
class SvdoConfig:
    """Penalty coefficient, power-iteration rounds, and q-vector seeding."""
    beta: float = 1.0
    iterations: int = 2
    seed: int = 0
    of_reduction: str = "mean"   # across batch samples
    ow_reduction: str = "sum"    # across registered layers
    warm_start: bool = False     # reuse the previous step's q during training

    def __post_init__(self):
        if self.beta < 0:
            raise ContractError("beta must be non-negative")
        if self.iterations < 1:
            raise ContractError("iterations must be >= 1")
        if self.of_reduction not in ("mean", "sum"):
            raise ContractError(f"unknown of_reduction {self.of_reduction!r}")
        if self.ow_reduction not in ("mean", "sum"):
            raise ContractError(f"unknown ow_reduction {self.ow_reduction!r}")


@dataclass
class PowerIterState:
    """p/q vectors and the current dominant-magnitude estimate."""
    p: np.ndarray
    q: np.ndarray
    lam: float = 0.0
    degenerate: bool = False

    @classmethod
    def init(cls, dim: int, seed: int) -> "PowerIterState":
        return cls(p=np.zeros(dim), q=draw_q0(dim, seed))


def draw_q0(dim: int, seed: int) -> np.ndarray:
    """Unit-norm random start vector for power iteration."""
    rng = np.random.default_rng(seed)
    q = rng.normal(size=dim)
    n = np.linalg.norm(q)
    if n == 0.0:  # vanishing measure, but the invariant is ||q|| > 0
        q[0] = 1.0
        n = 1.0
    return q / n


@dataclass(frozen=True)
class WeightMatrixView:
    """Conv weight (M,C,kh,kw) reshaped to (C*, M) with C* = C*kh*kw.

    Rows enumerate (input channel, kernel row, kernel col) positions; the
    exact row order does not affect the Gram spectrum. Element count is
    preserved by construction.
    """
    source_shape: tuple
    matrix: np.ndarray

    def __post_init__(self):
        if int(np.prod(self.source_shape)) != self.matrix.size:
            raise ShapeError("weight view must preserve the element count")
        if self.matrix.ndim != 2:
            raise ShapeError("weight view must be a matrix")

    @classmethod
    def from_conv(cls, w: np.ndarray) -> "WeightMatrixView":
        if w.ndim != 4:
            raise ShapeError(f"conv weight must be rank-4, got {w.shape}")
        m = w.shape[0]
        return cls(source_shape=w.shape, matrix=w.reshape(m, -1).T.copy())


# ------------------------------------------------------------------ value API

def gram(f) -> tc.Tensor:
    """Symmetric PSD matrix F F^T of a rank-2 tensor.

    Explicitly symmetrized: BLAS does not promise bitwise-equal (i,j) and
    (j,i) dot products, and downstream eigensolvers want exact symmetry.
    """
    f = tc.tensor(f)
    if f.rank != 2:
        raise ShapeError(f"gram expects rank-2 input, got {f.shape}")
    g = f.data @ f.data.T
    return tc.Tensor((g + g.T) / 2.0)


def power_iter_lambda(x, cfg: SvdoConfig, state: PowerIterState | None = None) -> float:
    """Magnitude of the dominant eigenvalue of a symmetric matrix.

    Runs cfg.iterations unnormalized rounds from state.q (seeded from
    cfg.seed when state is None) and returns ||q|| / ||p||. A collapsed
    iterate (||p|| below 1e-12) marks the state degenerate and yields 0.
    """
    x = np.asarray(x.data if isinstance(x, tc.Tensor) else x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] != x.shape[1]:
        raise ShapeError(f"power iteration needs a square matrix, got {x.shape}")
    if state is None:
        state = PowerIterState.init(x.shape[0], cfg.seed)
    if np.linalg.norm(state.q) == 0.0:
        raise ContractError("initial q must be nonzero")
    q = state.q / np.linalg.norm(state.q)
    p = q
    for rounds in range(cfg.iterations):
        if rounds > 0:
            # rescaling q between rounds leaves ||q||/||p|| unchanged (only
            # the direction entering the final round matters) and keeps
            # iterates inside float range for large round counts
            q = q / max(np.linalg.norm(q), DEGENERATE_NORM)
        p = x @ q
        q = x @ p
    p_norm = np.linalg.norm(p)
    state.p, state.q = p, q
    if p_norm < DEGENERATE_NORM:
        state.degenerate = True
        state.lam = 0.0
        return 0.0
    state.degenerate = False
    state.lam = float(np.linalg.norm(q) / p_norm)
    return state.lam


def svdo_penalty(f, cfg: SvdoConfig) -> float:
    """beta * (lambda_max - lambda_min)^2 of F F^T via two power-iteration passes."""
    f = tc.tensor(f)
    if f.rank != 2:
        raise ShapeError(f"svdo_penalty expects rank-2 input, got {f.shape}")
    tape = Tape()
    fv = tape.const(f.data[None])
    gap = svdo_gap_batch(tape, fv, cfg.iterations, draw_q0(f.shape[0], cfg.seed))
    return cfg.beta * float(gap.value[0]) ** 2


def of_penalty(feature_map, cfg: SvdoConfig) -> float:
    """Activation penalty: flatten each (C,H,W) sample and reduce over the batch."""
    a = tc.tensor(feature_map)
    if a.rank == 3:
        batch = a.data[None]
    elif a.rank == 4:
        batch = a.data
    else:
        raise ShapeError(f"of_penalty expects rank-3 or rank-4 input, got {a.shape}")
    b, c, h, w = batch.shape
    tape = Tape()
    fv = tape.const(batch.reshape(b, c, h * w))
    gap = svdo_gap_batch(tape, fv, cfg.iterations, draw_q0(c, cfg.seed))
    per_sample = cfg.beta * gap.value ** 2
    return float(per_sample.mean() if cfg.of_reduction == "mean" else per_sample.sum())


def ow_penalty(weights: list[WeightMatrixView], cfg: SvdoConfig) -> float:
    """Weight penalty over every registered conv view; sums layers by default."""
    if not weights:
        return 0.0
    rng = np.random.default_rng(cfg.seed)
    totals = []
    for view in weights:
        q0 = _unit(rng.normal(size=view.matrix.shape[0]))
        tape = Tape()
        fv = tape.const(view.matrix[None])
        gap = svdo_gap_batch(tape, fv, cfg.iterations, q0)
        totals.append(cfg.beta * float(gap.value[0]) ** 2)
    return float(np.sum(totals) if cfg.ow_reduction == "sum" else np.mean(totals))


def condition_number(f) -> float:
    """sigma_max / sigma_min of F from the exact eigensolver; inf when rank-deficient.

    Diagnostic only: this goes through the Jacobi oracle, never the
    differentiated power-iteration path.
    """
    f = tc.tensor(f)
    if f.rank != 2:
        raise ShapeError(f"condition_number expects rank-2 input, got {f.shape}")
    if not f.data.any():
        raise ContractError("condition_number needs a nonzero matrix")
    lam_max, lam_min = exact_extreme_eigs(gram(f).data)
    s_max = math.sqrt(max(lam_max, 0.0))
    s_min = math.sqrt(max(lam_min, 0.0))
    if s_min < 1e-12:
        return math.inf
    return s_max / s_min


def exact_extreme_eigs(x, max_sweeps: int = 60) -> tuple[float, float]:
    """(lambda_max, lambda_min) of a symmetric matrix by cyclic Jacobi rotations.

    Independent of the power-iteration code path; converges to machine
    precision for symmetric input (asymmetry beyond 1e-9 is rejected).
    """
    a = np.array(x.data if isinstance(x, tc.Tensor) else x, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeError(f"expected a square matrix, got {a.shape}")
    n = a.shape[0]
    if n > 256:
        raise ContractError("eigensolver is sized for matrices up to 256")
    if np.abs(a - a.T).max() > 1e-9:
        raise ContractError("matrix is not symmetric")
    a = (a + a.T) / 2.0
    if n == 1:
        return float(a[0, 0]), float(a[0, 0])
    scale = max(np.linalg.norm(a), 1.0)
    # quadratic convergence stalls at the rounding floor ~ n * eps * ||A||
    tol = max(n, 10) * 2e-15 * scale
    off_mask = ~np.eye(n, dtype=bool)
    for _ in range(max_sweeps):
        off = math.sqrt((a[off_mask] ** 2).sum())
        if off <= tol:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) <= 1e-300:
                    continue
                diff = a[q, q] - a[p, p]
                if abs(diff) > 1e12 * abs(apq):
                    t = apq / diff  # small-angle limit; avoids tau overflow
                else:
                    tau = diff / (2.0 * apq)
                    t = math.copysign(1.0, tau) / (abs(tau) + math.sqrt(1.0 + tau * tau))
                c = 1.0 / math.sqrt(1.0 + t * t)
                s = t * c
                rot_p = c * a[:, p] - s * a[:, q]
                rot_q = s * a[:, p] + c * a[:, q]
                a[:, p], a[:, q] = rot_p, rot_q
                rot_p = c * a[p, :] - s * a[q, :]
                rot_q = s * a[p, :] + c * a[q, :]
                a[p, :], a[q, :] = rot_p, rot_q
                a[p, q] = a[q, p] = 0.0
    else:
        raise RuntimeError("Jacobi sweeps did not converge")
    d = np.diag(a)
    return float(d.max()), float(d.min())


def _unit(v: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v)
    if n == 0.0:
        v = v.copy()
        v[0] = 1.0
        n = 1.0
    return v / n


# ------------------------------------------------------------------- tape API

def power_lambda_batch(tape: Tape, gmat: Var, q0: Var,
                       iterations: int) -> tuple[Var, Var]:
    """Dominant-magnitude eigenvalue estimates for a (B,C,C) batch.

    Unrolls the iteration as ordinary tape ops so gradients are exactly
    consistent with the forward approximation. Samples whose iterate
    collapses below the degeneracy threshold are pinned to 0 through a
    constant mask (no gradient flows for them). Returns (estimates,
    final q) so callers may warm-start a later evaluation.
    """
    q = q0
    p = q0
    for rounds in range(iterations):
        if rounds > 0:
            # same between-round rescaling as the value path; unrolled on the
            # tape so the gradient matches the stabilized forward exactly
            q = ops.bdiv_scalar(q, ops.clip_min(ops.norm_batch(q), DEGENERATE_NORM))
        p = ops.bmm(gmat, q)
        q = ops.bmm(gmat, p)
    p_norm = ops.norm_batch(p)
    q_norm = ops.norm_batch(q)
    alive = (p_norm.value >= DEGENERATE_NORM).astype(np.float64)
    lam = ops.div(q_norm, ops.clip_min(p_norm, DEGENERATE_NORM))
    if not alive.all():
        lam = ops.mul_const(lam, alive)
    return lam, q


def _power_lambda_factored(tape: Tape, f: Var, ft: Var, q0: Var,
                           iterations: int, shift: Var | None) -> tuple[Var, Var]:
    """Power iteration with G q evaluated as F (F^T q), never forming G.

    shift, when given, applies (G - shift I) q per sample. Same estimate
    and degeneracy handling as power_lambda_batch, at matvec cost.
    """
    def matvec(v):
        out = ops.bmm(f, ops.bmm(ft, v))
        if shift is not None:
            out = out - ops.bmul_scalar(v, shift)
        return out

    q = q0
    p = q0
    for rounds in range(iterations):
        if rounds > 0:
            q = ops.bdiv_scalar(q, ops.clip_min(ops.norm_batch(q), DEGENERATE_NORM))
        p = matvec(q)
        q = matvec(p)
    p_norm = ops.norm_batch(p)
    q_norm = ops.norm_batch(q)
    alive = (p_norm.value >= DEGENERATE_NORM).astype(np.float64)
    lam = ops.div(q_norm, ops.clip_min(p_norm, DEGENERATE_NORM))
    if not alive.all():
        lam = ops.mul_const(lam, alive)
    return lam, q


def svdo_gap_batch(tape: Tape, f: Var, iterations: int, q0: np.ndarray,
                   return_q: bool = False):
    """Per-sample spectral gap lambda_max - lambda_min for (B,C,N) inputs.

    The same q0 seeds both the dominant pass and the shifted pass; the
    shifted matrix G - lambda_max I is negative semidefinite, so the
    second estimate is exactly the gap. With return_q the dominant pass's
    final q comes back alongside, for warm starting. The Gram matrix is
    never materialized: every product goes through F and F^T directly.
    """
    bsz, c, _ = f.shape
    if q0.shape != (c,):
        raise ShapeError(f"q0 must have length {c}, got {q0.shape}")
    ft = ops.transpose(f)
    q0v = tape.const(np.broadcast_to(q0[None, :, None], (bsz, c, 1)).copy())
    lam1, q1 = _power_lambda_factored(tape, f, ft, q0v, iterations, None)
    gap, _ = _power_lambda_factored(tape, f, ft, q0v, iterations, lam1)
    return (gap, q1) if return_q else gap


def of_penalty_batch_t(tape: Tape, feature: Var, cfg: SvdoConfig,
                       q0: np.ndarray | None = None) -> Var:
    """Differentiable activation penalty for one (B,C,H,W) site, beta excluded."""
    bsz, c, h, w = feature.shape
    if q0 is None:
        q0 = draw_q0(c, cfg.seed)
    flat = ops.reshape(feature, (bsz, c, h * w))
    gap_sq = ops.square(svdo_gap_batch(tape, flat, cfg.iterations, q0))
    return ops.mean_all(gap_sq) if cfg.of_reduction == "mean" else ops.sum_all(gap_sq)


def ow_penalty_t(tape: Tape, weight_vars: list[Var], cfg: SvdoConfig,
                 q0s: list[np.ndarray] | None = None, return_qs: bool = False):
    """Differentiable weight penalty over conv weight vars, beta excluded.

    With return_qs the normalized final q directions (one per layer) come
    back for warm-starting the next evaluation.
    """
    if not weight_vars:
        zero = tape.const(np.zeros(()))
        return (zero, []) if return_qs else zero
    if q0s is None:
        rng = np.random.default_rng(cfg.seed)
        q0s = [_unit(rng.normal(size=int(np.prod(w.shape[1:]))))
               for w in weight_vars]
    terms = []
    final_qs = []
    for w, q0 in zip(weight_vars, q0s):
        m = w.shape[0]
        fstar = ops.transpose(ops.reshape(w, (m, int(np.prod(w.shape[1:])))))
        batched = ops.reshape(fstar, (1,) + fstar.shape)
        gap, q1 = svdo_gap_batch(tape, batched, cfg.iterations, q0, return_q=True)
        terms.append(ops.square(gap))
        final_qs.append(_unit(q1.value[0, :, 0].copy()))
    total = terms[0]
    for term in terms[1:]:
        total = total + term
    total = ops.reshape(total, ())
    if cfg.ow_reduction == "mean":
        total = ops.scale(total, 1.0 / len(terms))
    return (total, final_qs) if return_qs else total
