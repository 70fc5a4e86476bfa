"""Embedding-space evaluation: retrieval, consistency, spread, and round trips.

All metrics are defined over cosine similarity. Ranking ties are broken by
ascending target id so every metric is deterministic. Alignment consistency
correlates, per query, two similarity profiles over the target bank and
averages the rank correlations; three variants are exported (see
alignment_consistency). Spread statistics summarize a set by the trace and
log-determinant of its unbiased covariance plus the mean row norm.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .numerics import covariance_matrix, logdet_psd, spearman_rank_corr

AC_MODES = ("cross", "intra")
RECALL_KS = (1, 5, 10)


def _unit_rows(x: np.ndarray, side: str) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"{side} must be a 2-d matrix, got shape {x.shape}")
    norms = np.linalg.norm(x, axis=1)
    bad = np.flatnonzero(norms == 0.0)
    if bad.size:
        raise ValueError(f"zero-norm {side} row at index {int(bad[0])}")
    return x / norms[:, None]


@dataclass(frozen=True)
class SimilarityMatrix:
    values: np.ndarray  # (n_queries, n_targets) cosine similarities
    query_ids: tuple[int, ...]
    target_ids: tuple[int, ...]


def similarity_matrix(
    queries: np.ndarray,
    targets: np.ndarray,
    query_ids: list[int] | None = None,
    target_ids: list[int] | None = None,
) -> SimilarityMatrix:
    """All pairwise cosine similarities between query rows and target rows."""
    uq = _unit_rows(queries, "query")
    ut = _unit_rows(targets, "target")
    if uq.shape[1] != ut.shape[1]:
        raise ValueError(
            f"dimension mismatch: queries {uq.shape[1]} vs targets {ut.shape[1]}"
        )
    values = np.clip(uq @ ut.T, -1.0, 1.0)
    q_ids = tuple(range(uq.shape[0])) if query_ids is None else tuple(int(i) for i in query_ids)
    t_ids = tuple(range(ut.shape[0])) if target_ids is None else tuple(int(i) for i in target_ids)
    if len(q_ids) != uq.shape[0] or len(t_ids) != ut.shape[0]:
        raise ValueError("id lists must match matrix shape")
    return SimilarityMatrix(values=values, query_ids=q_ids, target_ids=t_ids)


@dataclass(frozen=True)
class RetrievalMetrics:
    recall_at: dict[int, float]
    mrr: float
    ranks: tuple[int, ...]  # 1-based rank of the gold target per query


def retrieval_metrics(sim: SimilarityMatrix, gold: dict[int, int]) -> RetrievalMetrics:
    """Recall@{1,5,10} and mean reciprocal rank under descending similarity.

    Equal similarities rank in ascending target-id order, so the gold rank is
    1 plus the number of targets that are strictly more similar or equally
    similar with a smaller id.
    """
    target_pos = {tid: j for j, tid in enumerate(sim.target_ids)}
    ranks = []
    for i, qid in enumerate(sim.query_ids):
        if qid not in gold:
            raise ValueError(f"query id {qid} has no gold target")
        gold_tid = gold[qid]
        if gold_tid not in target_pos:
            raise ValueError(f"gold target id {gold_tid} not among the targets")
        row = sim.values[i]
        g = row[target_pos[gold_tid]]
        better = 0
        for j, tid in enumerate(sim.target_ids):
            if tid == gold_tid:
                continue
            if row[j] > g or (row[j] == g and tid < gold_tid):
                better += 1
        ranks.append(better + 1)
    ranks_arr = np.asarray(ranks, dtype=np.float64)
    recall = {k: float(np.mean(ranks_arr <= k)) for k in RECALL_KS}
    mrr = float(np.mean(1.0 / ranks_arr))
    return RetrievalMetrics(recall_at=recall, mrr=mrr, ranks=tuple(ranks))


class AcResult(NamedTuple):
    value: float
    used: int
    skipped: int


def alignment_consistency(
    zv: np.ndarray, zt: np.ndarray, mode: str = "cross"
) -> AcResult:
    """Mean per-query rank correlation between two similarity profiles.

    mode="cross": for query i, correlate [cos(zv_i, zt_j)]_j with
    [cos(zt_i, zt_j)]_j over j != i -- does the projected embedding rank the
    target bank the way its paired target does?

    mode="intra": correlate [cos(zv_i, zv_j)]_j with [cos(zt_i, zt_j)]_j,
    which measures relational structure only and is invariant to any
    orthogonal transform applied to one side alone.

    Queries whose profiles are constant have no defined rank correlation and
    are skipped; the count comes back in the result.
    """
    if mode not in AC_MODES:
        raise ValueError(f"mode must be one of {AC_MODES}, got {mode!r}")
    uv = _unit_rows(zv, "vision")
    ut = _unit_rows(zt, "text")
    if uv.shape != ut.shape:
        raise ValueError(f"shape mismatch: {uv.shape} vs {ut.shape}")
    n = uv.shape[0]
    if n < 3:
        raise ValueError(f"need at least 3 rows, got {n}")
    a_full = (uv @ ut.T) if mode == "cross" else (uv @ uv.T)
    b_full = ut @ ut.T
    keep = ~np.eye(n, dtype=bool)
    total = 0.0
    used = 0
    skipped = 0
    for i in range(n):
        a = a_full[i][keep[i]]
        b = b_full[i][keep[i]]
        if np.ptp(a) == 0.0 or np.ptp(b) == 0.0:
            skipped += 1
            continue
        total += spearman_rank_corr(a, b)
        used += 1
    if used == 0:
        raise ValueError("every query had a constant similarity profile")
    return AcResult(value=total / used, used=used, skipped=skipped)


@dataclass(frozen=True)
class SpaceStats:
    trace: float
    logdet: float
    mean_norm: float


def space_stats(z: np.ndarray) -> SpaceStats:
    """Covariance trace, floored log-determinant, and mean row norm of a set."""
    z = np.asarray(z, dtype=np.float64)
    summary = covariance_matrix(z)
    return SpaceStats(
        trace=float(np.trace(summary.cov)),
        logdet=logdet_psd(summary.cov),
        mean_norm=float(np.mean(np.linalg.norm(z, axis=1))),
    )


def nearest_decode(z: np.ndarray, bank: np.ndarray) -> int:
    """Bank row index with the highest cosine to z; ties take the lowest id."""
    z = np.asarray(z, dtype=np.float64).ravel()
    bank = np.asarray(bank, dtype=np.float64)
    if bank.ndim != 2 or bank.shape[1] != z.shape[0]:
        raise ValueError(f"bank shape {bank.shape} incompatible with query dim {z.shape[0]}")
    nz = float(np.linalg.norm(z))
    if nz == 0.0:
        raise ValueError("cannot decode a zero-norm embedding")
    norms = np.linalg.norm(bank, axis=1)
    if np.any(norms == 0.0):
        raise ValueError("bank contains a zero-norm row")
    sims = bank @ z / (norms * nz)
    # argmax returns the first maximal index, which is the ascending-id rule.
    return int(np.argmax(sims))


@dataclass(frozen=True)
class GroupStats:
    recall_at: dict[int, float]
    mrr: float
    mean_cosine: float
    mean_distance: float


@dataclass(frozen=True)
class RoundTripReport:
    n: int
    decode_accuracy: float
    groups: dict[str, GroupStats]


def _group_stats(zv: np.ndarray, captions: np.ndarray) -> GroupStats:
    sim = similarity_matrix(captions, zv)
    gold = {i: i for i in range(zv.shape[0])}
    metrics = retrieval_metrics(sim, gold)
    uv = _unit_rows(zv, "vision")
    uc = _unit_rows(captions, "caption")
    cosines = np.sum(uv * uc, axis=1)
    distances = np.linalg.norm(zv - captions, axis=1)
    return GroupStats(
        recall_at=metrics.recall_at,
        mrr=metrics.mrr,
        mean_cosine=float(np.mean(cosines)),
        mean_distance=float(np.mean(distances)),
    )


def roundtrip_retrieval(
    zv: np.ndarray, bank: np.ndarray, gold_ids: np.ndarray
) -> RoundTripReport:
    """Decode each embedding to a caption, then use captions to re-find it.

    Two caption sources are scored: the ground-truth caption of each item and
    the nearest-decoded caption. Each caption row queries the full embedding
    set; its own item is the gold answer.
    """
    zv = np.asarray(zv, dtype=np.float64)
    bank = np.asarray(bank, dtype=np.float64)
    gold_ids = np.asarray(gold_ids, dtype=np.int64)
    if zv.shape[0] != gold_ids.shape[0]:
        raise ValueError("need one gold caption id per embedding row")
    if np.any(gold_ids < 0) or np.any(gold_ids >= bank.shape[0]):
        raise ValueError("gold caption id outside the bank")
    decoded_ids = np.asarray([nearest_decode(row, bank) for row in zv], dtype=np.int64)
    accuracy = float(np.mean(decoded_ids == gold_ids))
    groups = {
        "gold": _group_stats(zv, bank[gold_ids]),
        "decoded": _group_stats(zv, bank[decoded_ids]),
    }
    return RoundTripReport(n=zv.shape[0], decode_accuracy=accuracy, groups=groups)


def drift_export(
    zv: np.ndarray, z_gold: np.ndarray, z_decoded: np.ndarray, path: str | Path
) -> None:
    """Per-item cosine and distance of each embedding to both caption sources."""
    zv = np.asarray(zv, dtype=np.float64)
    z_gold = np.asarray(z_gold, dtype=np.float64)
    z_decoded = np.asarray(z_decoded, dtype=np.float64)
    if not (zv.shape == z_gold.shape == z_decoded.shape):
        raise ValueError("all three matrices must share one shape")
    uv = _unit_rows(zv, "vision")
    ug = _unit_rows(z_gold, "gold caption")
    ud = _unit_rows(z_decoded, "decoded caption")
    cos_gold = np.sum(uv * ug, axis=1)
    cos_dec = np.sum(uv * ud, axis=1)
    dist_gold = np.linalg.norm(zv - z_gold, axis=1)
    dist_dec = np.linalg.norm(zv - z_decoded, axis=1)
    try:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["cos_gold", "cos_decoded", "dist_gold", "dist_decoded"])
            for row in zip(cos_gold, cos_dec, dist_gold, dist_dec):
                writer.writerow([repr(float(v)) for v in row])
    except OSError as exc:
        raise OSError(f"could not write drift export to {path}: {exc}") from exc


@dataclass(frozen=True)
class SpaceReport:
    n: int
    recall_at: dict[int, float]
    mrr: float
    ac: float
    ac_reverse: float
    ac_intra: float
    v_trace: float
    t_trace: float
    v_logdet: float
    t_logdet: float
    v_norm_mean: float
    t_norm_mean: float
    config: dict = field(default_factory=dict)


def build_space_report(
    zv: np.ndarray,
    zt: np.ndarray,
    bank: np.ndarray,
    gold_ids: np.ndarray,
    config: dict | None = None,
) -> SpaceReport:
    """Retrieval against the caption bank plus consistency and spread stats."""
    sim = similarity_matrix(zv, bank)
    gold = {i: int(g) for i, g in enumerate(np.asarray(gold_ids, dtype=np.int64))}
    metrics = retrieval_metrics(sim, gold)
    ac = alignment_consistency(zv, zt, mode="cross")
    ac_rev = alignment_consistency(zt, zv, mode="cross")
    ac_intra = alignment_consistency(zv, zt, mode="intra")
    sv = space_stats(zv)
    st = space_stats(zt)
    return SpaceReport(
        n=zv.shape[0],
        recall_at=metrics.recall_at,
        mrr=metrics.mrr,
        ac=ac.value,
        ac_reverse=ac_rev.value,
        ac_intra=ac_intra.value,
        v_trace=sv.trace,
        t_trace=st.trace,
        v_logdet=sv.logdet,
        t_logdet=st.logdet,
        v_norm_mean=sv.mean_norm,
        t_norm_mean=st.mean_norm,
        config=dict(config or {}),
    )


def space_report_to_dict(report: SpaceReport) -> dict:
    return {
        "n": report.n,
        "recall_at": {str(k): report.recall_at[k] for k in RECALL_KS},
        "mrr": report.mrr,
        "ac": report.ac,
        "ac_reverse": report.ac_reverse,
        "ac_intra": report.ac_intra,
        "v_trace": report.v_trace,
        "t_trace": report.t_trace,
        "v_logdet": report.v_logdet,
        "t_logdet": report.t_logdet,
        "v_norm_mean": report.v_norm_mean,
        "t_norm_mean": report.t_norm_mean,
        "config": report.config,
    }


def roundtrip_report_to_dict(report: RoundTripReport) -> dict:
    return {
        "n": report.n,
        "decode_accuracy": report.decode_accuracy,
        "groups": {
            name: {
                "recall_at": {str(k): stats.recall_at[k] for k in RECALL_KS},
                "mrr": stats.mrr,
                "mean_cosine": stats.mean_cosine,
                "mean_distance": stats.mean_distance,
            }
            for name, stats in report.groups.items()
        },
    }
