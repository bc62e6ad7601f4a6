"""Retrieval metrics and channel de-correlation diagnostics.

Ranking sorts the gallery by ascending Euclidean distance per query with
stable (distance, gallery index) tie-breaking, optionally dropping
same-identity same-camera gallery entries per the usual benchmark
protocol. CMC top-k is the fraction of queries whose first true match
appears within rank k; AP for one query is the mean over its true matches
of i / rank_i (i-th match, 1-based rank), and mAP averages that.

The correlation report measures how redundant channels are: absolute
Pearson correlation between channel rows of the spatially flattened map,
its off-diagonal mean (the primary statistic; the full-matrix mean is
kept as a secondary column since reported averages sometimes include the
diagonal), and a 50-bin histogram over [0, 1].
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tc
from .errors import ContractError, ShapeError

HIST_BINS = 50


@dataclass
class RankingResult:
    """Per-query ranked gallery indices with match flags and distances."""
    order: list          # per query: np.ndarray of gallery indices, best first
    matches: list        # per query: np.ndarray of bools aligned with order
    distances: list      # per query: np.ndarray of sorted distances
    num_unmatched: int   # queries without any true match (excluded from metrics)

    @property
    def num_queries(self) -> int:
        return len(self.order)


def _pairwise_dist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    diff = a[:, None, :] - b[None, :, :]
    return np.sqrt((diff * diff).sum(axis=-1))


def rank_gallery(query_emb, gallery_emb, query_labels, gallery_labels,
                 query_cams=None, gallery_cams=None) -> RankingResult:
    """Rank gallery entries for every query by ascending Euclidean distance."""
    q = np.asarray(query_emb, dtype=np.float64)
    g = np.asarray(gallery_emb, dtype=np.float64)
    if q.ndim != 2 or g.ndim != 2 or q.shape[1] != g.shape[1]:
        raise ContractError(f"embedding dims differ: {q.shape} vs {g.shape}")
    qlab = np.asarray(query_labels)
    glab = np.asarray(gallery_labels)
    if qlab.shape != (q.shape[0],) or glab.shape != (g.shape[0],):
        raise ContractError("labels must align with embeddings")
    use_cams = query_cams is not None and gallery_cams is not None
    if use_cams:
        qcam = np.asarray(query_cams)
        gcam = np.asarray(gallery_cams)

    dist = _pairwise_dist(q, g)
    order, matches, distances = [], [], []
    num_unmatched = 0
    for i in range(q.shape[0]):
        keep = np.ones(g.shape[0], dtype=bool)
        if use_cams:
            keep &= ~((glab == qlab[i]) & (gcam == qcam[i]))
        idx = np.nonzero(keep)[0]
        ranked = idx[np.argsort(dist[i, idx], kind="stable")]
        flags = glab[ranked] == qlab[i]
        if not flags.any():
            num_unmatched += 1
        order.append(ranked)
        matches.append(flags)
        distances.append(dist[i, ranked])
    return RankingResult(order, matches, distances, num_unmatched)


def cmc_topk(r: RankingResult, k: int) -> float:
    """Fraction of queries whose first true match lands at rank <= k."""
    hits = 0
    valid = 0
    for flags in r.matches:
        if not flags.any():
            continue
        valid += 1
        first = int(np.argmax(flags)) + 1  # 1-based rank of first match
        if first <= k:
            hits += 1
    if valid == 0:
        raise ContractError("no query has a true match in the gallery")
    return hits / valid


def mean_ap(r: RankingResult) -> float:
    """Mean over queries of average precision of the ranked list."""
    aps = []
    for flags in r.matches:
        if not flags.any():
            continue
        ranks = np.nonzero(flags)[0] + 1            # 1-based ranks of matches
        precisions = np.arange(1, len(ranks) + 1) / ranks
        aps.append(precisions.mean())
    if not aps:
        raise ContractError("no query has a true match in the gallery")
    return float(np.mean(aps))


@dataclass
class CorrelationReport:
    matrix: np.ndarray          # (C, C) absolute Pearson correlations
    mean_offdiag: float         # primary statistic
    mean_full: float            # secondary: includes the diagonal
    histogram: np.ndarray       # counts per bin over off-diagonal entries
    bin_edges: np.ndarray       # HIST_BINS + 1 uniform edges on [0, 1]
    flagged_channels: int       # constant channels whose correlations were zeroed

    def __post_init__(self):
        if not np.allclose(self.matrix, self.matrix.T):
            raise ContractError("correlation matrix must be symmetric")
        if self.matrix.min() < 0.0 or self.matrix.max() > 1.0 + 1e-12:
            raise ContractError("absolute correlations must lie in [0, 1]")


def correlation_report(feature_map, bins: int = HIST_BINS) -> CorrelationReport:
    """Absolute channel-correlation statistics of a (C,H,W) map or (C,N) matrix."""
    if isinstance(feature_map, tc.Tensor):
        arr = feature_map.data
    else:
        arr = np.asarray(feature_map, dtype=np.float64)
    if arr.ndim == 3:
        f = arr.reshape(arr.shape[0], -1)
    elif arr.ndim == 2:
        f = arr
    else:
        raise ShapeError(f"expected (C,H,W) or (C,N), got {arr.shape}")
    c, n = f.shape
    if n < 2:
        raise ContractError("correlation needs at least two spatial samples")

    centered = f - f.mean(axis=1, keepdims=True)
    std = centered.std(axis=1)
    constant = std < 1e-12
    safe_std = np.where(constant, 1.0, std)
    normed = centered / safe_std[:, None]
    corr = np.abs(normed @ normed.T) / n
    corr[constant, :] = 0.0
    corr[:, constant] = 0.0
    np.fill_diagonal(corr, np.where(constant, 0.0, 1.0))
    corr = np.clip((corr + corr.T) / 2.0, 0.0, 1.0)

    off = corr[~np.eye(c, dtype=bool)]
    upper = corr[np.triu_indices(c, k=1)]
    edges = np.linspace(0.0, 1.0, bins + 1)
    hist, _ = np.histogram(upper, bins=edges)
    return CorrelationReport(
        matrix=corr,
        mean_offdiag=float(off.mean()) if off.size else 0.0,
        mean_full=float(corr.mean()),
        histogram=hist,
        bin_edges=edges,
        flagged_channels=int(constant.sum()),
    )


# ------------------------------------------------------------------ CSV output

def _fmt(v) -> str:
    if isinstance(v, float):
        if np.isinf(v):
            return "inf"
        return f"{v:.10f}"
    return str(v)


def write_csv(path, header: list[str], rows: list[tuple]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


METRICS_HEADER = ["run_id", "variant", "seed", "top1", "top5", "map"]
CORRELATION_HEADER = ["variant", "activation", "mean_offdiag", "mean_full",
                      "flagged_channels"]
CORR_HIST_HEADER = ["variant", "activation", "bin_lo", "bin_hi", "count"]
CONDITION_HEADER = ["variant", "activation", "condition_number"]


def write_metrics_csv(path, rows) -> None:
    write_csv(path, METRICS_HEADER, rows)


def write_correlation_csv(path, rows) -> None:
    write_csv(path, CORRELATION_HEADER, rows)


def write_corr_hist_csv(path, rows) -> None:
    write_csv(path, CORR_HIST_HEADER, rows)


def write_condition_csv(path, rows) -> None:
    write_csv(path, CONDITION_HEADER, rows)
