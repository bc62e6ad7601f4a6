"""Self-check battery: gradient checks and oracle comparisons.

Used by the `check` CLI subcommand and by the test/acceptance suites, so
the same named checks run everywhere. Each check reports its worst
observed error against the tolerance it must meet.

The finite-difference probes weight op outputs by a fixed random covector
before reducing to a scalar, so vector-Jacobian products are verified
against arbitrary upstream gradients, not just all-ones.
"""

from __future__ import annotations

import time
import zlib
from dataclasses import dataclass

import numpy as np

from . import ops
from .tape import finite_diff_check

__all__ = ["CheckResult", "OP_GRADIENT_TOLERANCE", "op_gradient_case",
           "check_op_gradients", "run_all_checks"]


@dataclass
class CheckResult:
    name: str
    error: float
    tol: float
    seconds: float

    @property
    def passed(self) -> bool:
        return self.error <= self.tol


OP_GRADIENT_TOLERANCE = 1e-5

# ops that are pure routing/bookkeeping and are exercised via every other
# case, or whose inputs are not differentiable tensors
_SOURCE_KINDS = {"leaf", "const"}


def _away_from_zero(rng, shape, gap=0.3):
    x = rng.normal(size=shape)
    return x + gap * np.sign(x)


def _probe(op_output_fn, rng):
    """Wrap an op application into scalar form with a random covector.

    The covector is drawn once, on the first call, so the probe function
    stays deterministic across finite-difference evaluations.
    """
    cache = {}

    def f(tape, *vs):
        out = op_output_fn(tape, *vs)
        if "w" not in cache:
            cache["w"] = rng.normal(size=out.shape)
        w = tape.const(cache["w"])
        return ops.sum_all(tape.apply("mul", out, w))
    return f


def op_gradient_case(kind: str, rng: np.random.Generator):
    """One random (scalar function, input arrays) pair exercising `kind`.

    Inputs are drawn away from the op's non-smooth sets (relu/clip kinks,
    pooling ties, hinge boundaries) so central differences are valid.
    """
    if kind in ("add", "sub", "mul"):
        return _probe(lambda t, a, b: t.apply(kind, a, b), rng), \
            [rng.normal(size=(3, 4)), rng.normal(size=(3, 4))]
    if kind == "div":
        b = _away_from_zero(rng, (3, 4), gap=1.0)
        return _probe(lambda t, a, bb: t.apply("div", a, bb), rng), \
            [rng.normal(size=(3, 4)), b]
    if kind == "neg":
        return _probe(lambda t, a: t.apply("neg", a), rng), [rng.normal(size=(3, 4))]
    if kind == "square":
        return _probe(lambda t, a: t.apply("square", a), rng), [rng.normal(size=(3, 4))]
    if kind == "relu":
        return _probe(lambda t, a: t.apply("relu", a), rng), [_away_from_zero(rng, (3, 4))]
    if kind == "scale":
        c = float(rng.normal())
        return _probe(lambda t, a: ops.scale(a, c), rng), [rng.normal(size=(3, 4))]
    if kind == "smul":
        return _probe(lambda t, s, a: ops.smul(s, a), rng), \
            [np.asarray(rng.normal()), rng.normal(size=(3, 4))]
    if kind == "mul_const":
        c = rng.normal(size=(3, 4))
        return _probe(lambda t, a: ops.mul_const(a, c), rng), [rng.normal(size=(3, 4))]
    if kind == "clip_min":
        floor = -0.1
        x = rng.normal(size=(3, 4))
        x = np.where(np.abs(x - floor) < 0.05, x + 0.2, x)
        return _probe(lambda t, a: ops.clip_min(a, floor), rng), [x]
    if kind == "reshape":
        return _probe(lambda t, a: ops.reshape(a, (2, 6)), rng), [rng.normal(size=(3, 4))]
    if kind == "transpose":
        shape = (3, 4) if rng.random() < 0.5 else (2, 3, 4)
        return _probe(lambda t, a: ops.transpose(a), rng), [rng.normal(size=shape)]
    if kind == "concat":
        axis = int(rng.integers(0, 2))
        shapes = [(2, 3), (2, 3), (2, 3)]
        return _probe(lambda t, *vs: ops.concat(list(vs), axis), rng), \
            [rng.normal(size=s) for s in shapes]
    if kind == "matmul":
        return _probe(lambda t, a, b: ops.matmul(a, b), rng), \
            [rng.normal(size=(3, 4)), rng.normal(size=(4, 2))]
    if kind == "bmm":
        return _probe(lambda t, a, b: ops.bmm(a, b), rng), \
            [rng.normal(size=(2, 3, 4)), rng.normal(size=(2, 4, 5))]
    if kind == "sum_all":
        return _probe(lambda t, a: ops.sum_all(a), rng), [rng.normal(size=(3, 4))]
    if kind == "mean_all":
        return _probe(lambda t, a: ops.mean_all(a), rng), [rng.normal(size=(3, 4))]
    if kind == "norm_all":
        return _probe(lambda t, a: ops.norm_all(a), rng), [rng.normal(size=(3, 4))]
    if kind == "norm_batch":
        return _probe(lambda t, a: ops.norm_batch(a), rng), [rng.normal(size=(3, 4, 1))]
    if kind == "bdiv_scalar":
        s = _away_from_zero(rng, (3,), gap=1.0)
        return _probe(lambda t, a, sv: ops.bdiv_scalar(a, sv), rng), \
            [rng.normal(size=(3, 4, 1)), s]
    if kind == "bmul_scalar":
        return _probe(lambda t, a, sv: ops.bmul_scalar(a, sv), rng), \
            [rng.normal(size=(3, 4, 1)), rng.normal(size=(3,))]
    if kind == "softmax_last":
        return _probe(lambda t, a: ops.softmax_last(a), rng), \
            [rng.normal(scale=2.0, size=(3, 5))]
    if kind == "sub_scaled_eye":
        g = rng.normal(size=(2, 4, 4))
        return _probe(lambda t, a, lam: ops.sub_scaled_eye(a, lam), rng), \
            [g + np.swapaxes(g, 1, 2), rng.normal(size=(2,))]
    if kind == "conv2d":
        if rng.random() < 0.5:
            x, w, pad = rng.normal(size=(2, 3, 4, 4)), rng.normal(size=(4, 3, 3, 3)), 1
        else:
            x, w, pad = rng.normal(size=(2, 3, 4, 4)), rng.normal(size=(4, 3, 1, 1)), 0
        return _probe(lambda t, xv, wv: ops.conv2d(xv, wv, pad), rng), [x, w]
    if kind == "maxpool2":
        # spread values so no pooling window has near-ties
        x = rng.permutation(2 * 3 * 4 * 4).astype(float).reshape(2, 3, 4, 4)
        x = 0.1 * x + rng.normal(scale=1e-3, size=x.shape)
        return _probe(lambda t, a: ops.maxpool2(a), rng), [x]
    if kind == "gap_hw":
        shape = (2, 3, 4, 4) if rng.random() < 0.5 else (3, 4, 4)
        return _probe(lambda t, a: ops.gap_hw(a), rng), [rng.normal(size=shape)]
    if kind == "linear":
        return _probe(lambda t, x, w, b: ops.linear(x, w, b), rng), \
            [rng.normal(size=(4, 5)), rng.normal(size=(3, 5)), rng.normal(size=(3,))]
    if kind == "batchnorm":
        training = rng.random() < 0.5
        rm = rng.normal(size=(4,))
        rv = rng.uniform(0.5, 2.0, size=(4,))

        def apply_bn(t, x, gamma, beta):
            return ops.batchnorm(x, gamma, beta, training=training,
                                 running_mean=rm, running_var=rv,
                                 update_stats=False)
        return _probe(apply_bn, rng), \
            [rng.normal(size=(3, 4, 2, 2)), rng.normal(size=(4,)) + 1.0,
             rng.normal(size=(4,))]
    if kind == "xent":
        labels = rng.integers(0, 5, size=4)
        def apply_xent(t, logits):
            return ops.cross_entropy_op(logits, labels)
        return (lambda t, logits: apply_xent(t, logits)), [rng.normal(size=(4, 5))]
    if kind == "triplet_hard":
        labels = np.repeat(np.arange(3), 3)
        emb = rng.normal(size=(9, 4))
        def apply_tr(t, e):
            return ops.triplet_hard_op(e, labels, margin=1.0)
        return (lambda t, e: apply_tr(t, e)), [emb]
    raise KeyError(f"no gradient case for op kind {kind!r}")


def check_op_gradients(kinds=None, cases: int = 20, seed: int = 0):
    """Gradient-check every registered op kind on `cases` random inputs."""
    results = []
    for kind in kinds or ops.registered_kinds():
        if kind in _SOURCE_KINDS:
            continue
        rng = np.random.default_rng([seed, zlib.crc32(kind.encode())])
        start = time.monotonic()
        worst = 0.0
        for _ in range(cases):
            f, arrays = op_gradient_case(kind, rng)
            worst = max(worst, finite_diff_check(f, *arrays))
        results.append(CheckResult(f"op-grad/{kind}", worst,
                                   OP_GRADIENT_TOLERANCE, time.monotonic() - start))
    return results


# ------------------------------------------------------- independent oracles

def triplet_brute_force(emb, labels, margin: float) -> float:
    """Exhaustive batch-hard triplet loss: loops over every candidate pair."""
    emb = np.asarray(emb, dtype=np.float64)
    labels = np.asarray(labels)
    bsz = emb.shape[0]

    def dist(i, j):
        d2 = float(((emb[i] - emb[j]) ** 2).sum())
        return np.sqrt(max(d2, 1e-12))

    total = 0.0
    for a in range(bsz):
        pos = [dist(a, j) for j in range(bsz) if labels[j] == labels[a] and j != a]
        neg = [dist(a, j) for j in range(bsz) if labels[j] != labels[a]]
        if not pos or not neg:
            raise ValueError("brute-force oracle needs a positive and a negative per anchor")
        total += max(0.0, margin + max(pos) - min(neg))
    return total / bsz


def cross_entropy_direct(logits, labels) -> float:
    """Per-sample summation oracle for the mean negative log-likelihood."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    total = 0.0
    for i in range(logits.shape[0]):
        row = logits[i] - logits[i].max()
        probs = np.exp(row) / np.exp(row).sum()
        total += -np.log(probs[labels[i]])
    return total / logits.shape[0]


def retrieval_brute_force(query_emb, gallery_emb, query_labels, gallery_labels,
                          ks=(1, 5)):
    """Naive retrieval metrics: python loops, python sort, no shared code.

    Returns ({k: cmc_top_k}, mAP) over queries that have a true match.
    Ties break by ascending gallery index, the same documented convention
    as the production path.
    """
    import math

    q = np.asarray(query_emb, dtype=np.float64)
    g = np.asarray(gallery_emb, dtype=np.float64)
    qlab = list(query_labels)
    glab = list(gallery_labels)
    hits = {k: 0 for k in ks}
    aps = []
    for i in range(len(qlab)):
        scored = []
        for j in range(len(glab)):
            d = math.sqrt(sum((q[i, t] - g[j, t]) ** 2 for t in range(q.shape[1])))
            scored.append((d, j))
        scored.sort()
        flags = [glab[j] == qlab[i] for _, j in scored]
        if not any(flags):
            continue
        first = flags.index(True) + 1
        for k in ks:
            hits[k] += int(first <= k)
        match_ranks = [r + 1 for r, f in enumerate(flags) if f]
        aps.append(sum((n + 1) / rank for n, rank in enumerate(match_ranks))
                   / len(match_ranks))
    if not aps:
        raise ValueError("no valid query in brute-force oracle")
    return {k: hits[k] / len(aps) for k in ks}, sum(aps) / len(aps)


# ------------------------------------------------------- module-level checks

def _timed(name, tol, fn) -> CheckResult:
    start = time.monotonic()
    err = fn()
    return CheckResult(name, float(err), tol, time.monotonic() - start)


def check_attention_gradients(seed: int = 0, cases: int = 5) -> list[CheckResult]:
    from .attention import HeadVars, cam_apply, pam_apply

    rng = np.random.default_rng([seed, zlib.crc32(b"attn-grad")])

    def cam_worst():
        worst = 0.0
        for _ in range(cases):
            batch = rng.normal(size=(2, 3, 2, 2))
            cov = rng.normal(size=batch.shape)

            def f(tape, x, gamma):
                out, _ = cam_apply(tape, x, gamma)
                return ops.sum_all(tape.apply("mul", out, tape.const(cov)))
            worst = max(worst, finite_diff_check(f, batch, np.asarray(rng.normal())))
        return worst

    def pam_worst():
        worst = 0.0
        c = 3
        for _ in range(cases):
            batch = rng.normal(size=(2, c, 2, 2)) + 0.5
            cov = rng.normal(size=batch.shape)
            head_arrays = []
            for _ in range(3):
                head_arrays.extend([rng.normal(scale=0.5, size=(c, c, 1, 1)),
                                    rng.uniform(0.8, 1.2, size=c),
                                    rng.normal(scale=0.1, size=c)])

            def f(tape, x, gamma, *flat):
                heads = [HeadVars(weight=flat[3 * i], bn_scale=flat[3 * i + 1],
                                  bn_shift=flat[3 * i + 2],
                                  bn_mean=np.zeros(c), bn_var=np.ones(c))
                         for i in range(3)]
                out, _ = pam_apply(tape, x, gamma, heads, training=True,
                                   update_stats=False)
                return ops.sum_all(tape.apply("mul", out, tape.const(cov)))
            worst = max(worst, finite_diff_check(
                f, batch, np.asarray(rng.normal()), *head_arrays))
        return worst

    return [_timed("attention-grad/cam", 1e-4, cam_worst),
            _timed("attention-grad/pam", 1e-4, pam_worst)]


def check_svdo_gradient(seed: int = 0, cases: int = 5) -> list[CheckResult]:
    from .ortho import draw_q0, svdo_gap_batch

    rng = np.random.default_rng([seed, zlib.crc32(b"svdo-grad")])

    def worst_fn():
        worst = 0.0
        for i in range(cases):
            q0 = draw_q0(4, seed + i)

            def f(tape, fv):
                flat = ops.reshape(fv, (1, 4, 6))
                gap = svdo_gap_batch(tape, flat, 2, q0)
                return ops.reshape(ops.square(gap), ())
            worst = max(worst, finite_diff_check(f, rng.normal(size=(4, 6))))
        return worst

    return [_timed("svdo-grad/unrolled-2-rounds", 1e-4, worst_fn)]


def _micro_network():
    from .network import BackboneConfig, EmbeddingSpec, TwoBranchNet, VariantSpec
    backbone = BackboneConfig(block_widths=(4, 5, 6, 7), branch_width=8,
                              input_shape=(3, 16, 8), reduction_dim=6, dropout=0.5)
    return TwoBranchNet(backbone, EmbeddingSpec(k_a=5, k_g=4),
                        VariantSpec.full(), num_classes=2, seed=7)


def check_network_gradient(seed: int = 0) -> list[CheckResult]:
    from .losses import LossWeights, combine_loss_t

    model = _micro_network()
    rng = np.random.default_rng([seed, zlib.crc32(b"net-grad")])
    images = rng.normal(size=(4, 3, 16, 8))
    labels = np.array([0, 0, 1, 1])
    weights = LossWeights()
    names = model.param_names()

    def f(tape, img_var, *param_vars):
        leaves = dict(zip(names, param_vars))
        fwd = model.forward(tape, img_var, leaves, training=True,
                            dropout_rng=np.random.default_rng(123),
                            want_of=True, update_stats=False, svdo_seed=5)
        xent = ops.cross_entropy_op(fwd.logits, labels)
        trip = ops.triplet_hard_op(fwd.embeddings, labels, margin=weights.margin_alpha)
        of_total = None
        for term in fwd.of_terms.values():
            of_total = term if of_total is None else of_total + term
        ow = model.ow_term(tape, leaves, svdo_seed=5)
        return combine_loss_t(xent, trip, of_total, ow, weights)

    def worst_fn():
        arrays = [model.params[n] for n in names]
        return finite_diff_check(f, images, *arrays, max_coords=3, seed=seed)

    return [_timed("network-grad/micro-batch-full-loss", 1e-3, worst_fn)]


def _gapped_gram_cases(count, seed, max_rows=8, max_cols=16, scale=1.5):
    """Seeded random F whose gram has well-separated extremes (oracle-filtered)."""
    from .ortho import gram
    from .tensor import Tensor

    rng = np.random.default_rng(seed)
    cases = []
    while len(cases) < count:
        rows = int(rng.integers(2, max_rows + 1))
        cols = int(rng.integers(rows, max_cols + 1))
        f = scale * rng.normal(size=(rows, cols))
        g = gram(Tensor(f)).data
        lam = np.sort(np.linalg.eigvalsh(g))
        if lam[-1] <= 0 or lam[-1] / max(lam[-2], 1e-300) < 1.5:
            continue
        shift = np.sort(np.abs(lam - lam[-1]))
        if shift[-1] < 1e-6 or shift[-1] / max(shift[-2], 1e-300) < 1.5:
            continue
        cases.append((f, g))
    return cases


def check_power_iteration_oracle(seed: int = 0, cases: int = 20) -> list[CheckResult]:
    from .ortho import SvdoConfig, exact_extreme_eigs, power_iter_lambda

    def worst_fn():
        worst = 0.0
        for _, g in _gapped_gram_cases(cases, seed + 41):
            cfg = SvdoConfig(iterations=50, seed=seed)
            lam_max, lam_min = exact_extreme_eigs(g)
            est1 = power_iter_lambda(g, cfg)
            worst = max(worst, abs(est1 - lam_max) / lam_max)
            shift = power_iter_lambda(g - est1 * np.eye(g.shape[0]), cfg)
            rec = est1 - shift
            denom = max(abs(lam_min), 1e-2 * lam_max)
            worst = max(worst, abs(rec - lam_min) / denom)
        return worst

    return [_timed("power-iteration/vs-jacobi-oracle", 1e-2, worst_fn)]


def check_svdo_vs_oracle(seed: int = 0, cases: int = 20) -> list[CheckResult]:
    from .ortho import SvdoConfig, exact_extreme_eigs, svdo_penalty
    from .tensor import Tensor

    def worst_fn():
        worst = 0.0
        for f, g in _gapped_gram_cases(cases, seed + 57):
            cfg = SvdoConfig(beta=1.0, iterations=50, seed=seed)
            lam_max, lam_min = exact_extreme_eigs(g)
            expect = (lam_max - lam_min) ** 2
            got = svdo_penalty(Tensor(f), cfg)
            worst = max(worst, abs(got - expect) / expect)
        return worst

    return [_timed("svdo-penalty/vs-jacobi-oracle", 2e-2, worst_fn)]


def check_loss_oracles(seed: int = 0, cases: int = 20) -> list[CheckResult]:
    from .losses import Batch, batch_hard_triplet, cross_entropy

    rng = np.random.default_rng([seed, zlib.crc32(b"loss-oracle")])

    def triplet_worst():
        worst = 0.0
        for _ in range(cases):
            p = int(rng.integers(2, 5))
            k = int(rng.integers(2, 5))
            emb = rng.normal(size=(p * k, int(rng.integers(1, 6))))
            labels = np.repeat(np.arange(p), k)
            got = batch_hard_triplet(Batch(embeddings=emb, labels=labels), 1.2)
            expect = triplet_brute_force(emb, labels, 1.2)
            worst = max(worst, abs(got - expect) / max(1.0, abs(expect)))
        return worst

    def xent_worst():
        worst = 0.0
        for _ in range(cases):
            logits = rng.normal(size=(4, 3))
            labels = rng.integers(0, 3, size=4)
            worst = max(worst, abs(cross_entropy(logits, labels)
                                   - cross_entropy_direct(logits, labels)))
        return worst

    return [_timed("loss-oracle/batch-hard-triplet", 1e-12, triplet_worst),
            _timed("loss-oracle/cross-entropy", 1e-12, xent_worst)]


def check_metric_oracles(seed: int = 0, cases: int = 10) -> list[CheckResult]:
    from .evaluate import cmc_topk, mean_ap, rank_gallery

    rng = np.random.default_rng([seed, zlib.crc32(b"metric-oracle")])

    def worst_fn():
        worst = 0.0
        done = 0
        while done < cases:
            nq = int(rng.integers(1, 21))
            ng = int(rng.integers(2, 51))
            dim = int(rng.integers(1, 5))
            ids = int(rng.integers(1, 6))
            q = rng.normal(size=(nq, dim))
            g = rng.normal(size=(ng, dim))
            qlab = rng.integers(0, ids, size=nq)
            glab = rng.integers(0, ids, size=ng)
            if not any(l in glab for l in qlab):
                continue
            r = rank_gallery(q, g, qlab, glab)
            cmc_o, map_o = retrieval_brute_force(q, g, qlab, glab, ks=(1, 5))
            worst = max(worst,
                        abs(cmc_topk(r, 1) - cmc_o[1]),
                        abs(cmc_topk(r, 5) - cmc_o[5]),
                        abs(mean_ap(r) - map_o))
            done += 1
        return worst

    return [_timed("metric-oracle/cmc-map-brute-force", 1e-12, worst_fn)]


def run_all_checks(seed: int = 0) -> list[CheckResult]:
    """Full battery: every op's gradient, module gradients, oracle agreement."""
    results = check_op_gradients(seed=seed)
    results.extend(check_attention_gradients(seed))
    results.extend(check_svdo_gradient(seed))
    results.extend(check_network_gradient(seed))
    results.extend(check_power_iteration_oracle(seed))
    results.extend(check_svdo_vs_oracle(seed))
    results.extend(check_loss_oracles(seed))
    results.extend(check_metric_oracles(seed))
    return results
