"""Video-level embeddings, L2 retrieval, mAP/CMC and k-reciprocal re-ranking."""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

DEFAULT_RANKS = (1, 5, 10, 20)


@dataclass
class VideoEmbedding:
    vector: np.ndarray
    identity: int
    camera: int


@dataclass
class RetrievalResult:
    distances: np.ndarray  # (Q, G)
    ranked: list[np.ndarray]  # per valid query, gallery indices after exclusion
    mAP: float
    cmc: np.ndarray  # cmc[k - 1] = CMC at rank k, length G
    num_valid_queries: int
    skipped_queries: list[int] = field(default_factory=list)

    def cmc_at(self, ranks: Sequence[int] = DEFAULT_RANKS) -> dict[int, float]:
        return {int(r): float(self.cmc[min(r, len(self.cmc)) - 1]) for r in ranks}


def video_embedding(clips: Sequence[np.ndarray], identity: int = -1,
                    camera: int = -1) -> VideoEmbedding:
    """Arithmetic mean of a video's clip embeddings."""
    if len(clips) == 0:
        raise ValueError("video_embedding needs at least one clip")
    vecs = np.stack([np.asarray(c, dtype=np.float64) for c in clips])
    return VideoEmbedding(vecs.mean(axis=0), identity, camera)


def distance_matrix(queries: np.ndarray, gallery: np.ndarray, chunk: int = 256) -> np.ndarray:
    """Euclidean distances between every query row and gallery row."""
    q = np.asarray(queries, dtype=np.float64)
    g = np.asarray(gallery, dtype=np.float64)
    if q.ndim != 2 or g.ndim != 2 or q.shape[1] != g.shape[1]:
        raise ValueError(f"distance_matrix: dimension mismatch {q.shape} vs {g.shape}")
    out = np.empty((len(q), len(g)))
    for s in range(0, len(q), chunk):
        diff = q[s:s + chunk, None, :] - g[None, :, :]
        out[s:s + chunk] = np.sqrt(np.sum(diff * diff, axis=2))
    return out


def _threads() -> int:
    cap = os.environ.get("TRACKRANK_THREADS")
    n = os.cpu_count() or 1
    if cap:
        n = min(n, max(1, int(cap)))
    return n


def _rank_one(dist_row, q_id, q_cam, g_ids, g_cams):
    order = np.argsort(dist_row, kind="stable")
    keep = ~((g_ids[order] == q_id) & (g_cams[order] == q_cam))
    order = order[keep]
    hits = g_ids[order] == q_id
    if not hits.any():
        return order, None, None
    positions = np.flatnonzero(hits)  # 0-based ranks of relevant items
    precisions = np.arange(1, len(positions) + 1) / (positions + 1)
    return order, float(precisions.mean()), int(positions[0])


def evaluate(distances: np.ndarray, q_ids, q_cams, g_ids, g_cams,
             ranks: Sequence[int] = DEFAULT_RANKS, threads: int | None = None) -> RetrievalResult:
    """mAP and CMC under the cross-camera protocol.

    Gallery entries sharing both identity and camera with the query are
    removed from that query's list. Queries left with no relevant entry are
    skipped and listed in ``skipped_queries``. Distance ties go to the lower
    gallery index.
    """
    d = np.asarray(distances, dtype=np.float64)
    q_ids, q_cams = np.asarray(q_ids), np.asarray(q_cams)
    g_ids, g_cams = np.asarray(g_ids), np.asarray(g_cams)
    Q, G = d.shape
    if len(q_ids) != Q or len(q_cams) != Q or len(g_ids) != G or len(g_cams) != G:
        raise ValueError("evaluate: metadata lengths do not match the distance matrix")
    threads = threads or _threads()
    args = [(d[i], q_ids[i], q_cams[i], g_ids, g_cams) for i in range(Q)]
    if threads > 1 and Q > 64:
        with ThreadPoolExecutor(threads) as pool:
            results = list(pool.map(lambda a: _rank_one(*a), args))
    else:
        results = [_rank_one(*a) for a in args]

    ranked, aps, skipped = [], [], []
    first_hit = np.zeros(G, dtype=np.int64)
    for i, (order, ap, first) in enumerate(results):
        if ap is None:
            skipped.append(i)
            continue
        ranked.append(order)
        aps.append(ap)
        first_hit[first] += 1
    if not aps:
        raise ValueError("evaluate: no query has a valid cross-camera match in the gallery")
    cmc = np.cumsum(first_hit) / len(aps)
    return RetrievalResult(d, ranked, float(np.mean(aps)), cmc, len(aps), skipped)


def metrics_report(result: RetrievalResult, ranks: Sequence[int] = DEFAULT_RANKS,
                   runtime: float | None = None) -> dict:
    report = {
        "map": result.mAP,
        "cmc": {str(r): v for r, v in result.cmc_at(ranks).items()},
        "num_valid_queries": result.num_valid_queries,
        "num_skipped_queries": len(result.skipped_queries),
    }
    if runtime is not None:
        report["runtime"] = runtime
    return report


def _k_reciprocal(initial_rank: np.ndarray, i: int, k: int) -> np.ndarray:
    forward = initial_rank[i, :k + 1]
    backward = initial_rank[forward, :k + 1]
    return forward[np.where(backward == i)[0]]


def rerank(q_g: np.ndarray, q_q: np.ndarray, g_g: np.ndarray, k1: int = 20, k2: int = 6,
           lambda_value: float = 0.3) -> np.ndarray:
    """k-reciprocal re-ranking with local query expansion.

    Neighbour sets are built on squared distances normalised per column over
    the joint query+gallery set. The returned matrix mixes the *input*
    distances with the Jaccard distances:
    ``lambda * q_g + (1 - lambda) * jaccard``.
    """
    q_g = np.asarray(q_g, dtype=np.float64)
    q_q = np.asarray(q_q, dtype=np.float64)
    g_g = np.asarray(g_g, dtype=np.float64)
    Q, G = q_g.shape
    if q_q.shape != (Q, Q) or g_g.shape != (G, G):
        raise ValueError(f"rerank: inconsistent blocks q_g={q_g.shape}, q_q={q_q.shape}, "
                         f"g_g={g_g.shape}")
    if not (1 <= k1 <= G) or not (1 <= k2 <= G):
        raise ValueError(f"rerank: k1={k1} and k2={k2} must lie in [1, gallery size {G}]")
    if not 0.0 <= lambda_value <= 1.0:
        raise ValueError(f"rerank: lambda must lie in [0, 1], got {lambda_value}")
    if lambda_value == 1.0:
        return q_g.copy()

    n = Q + G
    dist = np.block([[q_q, q_g], [q_g.T, g_g]]) ** 2
    col_max = dist.max(axis=0)
    dist = (dist / np.where(col_max > 0, col_max, 1.0)).T
    initial_rank = np.argsort(dist, axis=1, kind="stable")

    V = np.zeros((n, n))
    half = int(np.around(k1 / 2))
    for i in range(n):
        recip = _k_reciprocal(initial_rank, i, k1)
        expansion = recip
        for cand in recip:
            cand_recip = _k_reciprocal(initial_rank, cand, half)
            if len(np.intersect1d(cand_recip, recip)) > 2.0 / 3.0 * len(cand_recip):
                expansion = np.append(expansion, cand_recip)
        expansion = np.unique(expansion)
        weight = np.exp(-dist[i, expansion])
        V[i, expansion] = weight / weight.sum()

    if k2 != 1:
        V = np.stack([V[initial_rank[i, :k2]].mean(axis=0) for i in range(n)])

    inv_index = [np.where(V[:, j] != 0)[0] for j in range(n)]
    jaccard = np.zeros((Q, n))
    for i in range(Q):
        temp_min = np.zeros(n)
        for j in np.where(V[i] != 0)[0]:
            rows = inv_index[j]
            temp_min[rows] += np.minimum(V[i, j], V[rows, j])
        jaccard[i] = 1.0 - temp_min / (2.0 - temp_min)

    return lambda_value * q_g + (1.0 - lambda_value) * jaccard[:, Q:]
