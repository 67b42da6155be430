"""Independent reference implementations used as test oracles, plus fixed instances.

Everything here is written with plain Python loops over scalars so that it
shares as little code shape as possible with the vectorised package.
"""
import math

import numpy as np


def triplet_oracle(emb, labels, margin, reduction):
    n = len(labels)
    dist = [[math.sqrt(max(float(np.sum((emb[i] - emb[j]) ** 2)), 1e-16)) for j in range(n)]
            for i in range(n)]
    hinges = []
    for a in range(n):
        pos = max(dist[a][p] for p in range(n) if labels[p] == labels[a])
        neg = min(dist[a][q] for q in range(n) if labels[q] != labels[a])
        hinges.append(max((margin + pos) - neg, 0.0))
    hinges = np.array(hinges)
    return float(np.sum(hinges) if reduction == "sum" else np.mean(hinges))


def evaluate_oracle(dist, q_ids, q_cams, g_ids, g_cams, max_rank):
    """Returns (mAP, cmc list for ranks 1..max_rank) by direct enumeration."""
    aps, first_hits = [], []
    for i in range(len(q_ids)):
        ranking = sorted(
            (float(dist[i][j]), j) for j in range(len(g_ids))
            if not (g_ids[j] == q_ids[i] and g_cams[j] == q_cams[i]))
        hits, precisions, first = 0, [], None
        for pos, (_, j) in enumerate(ranking, start=1):
            if g_ids[j] == q_ids[i]:
                hits += 1
                precisions.append(hits / pos)
                if first is None:
                    first = pos
        if first is None:
            continue
        aps.append(sum(precisions) / len(precisions))
        first_hits.append(first)
    cmc = [sum(1 for f in first_hits if f <= k) / len(first_hits)
           for k in range(1, max_rank + 1)]
    return sum(aps) / len(aps), cmc


def adam_oracle(p0, grads, lr, b1=0.9, b2=0.999, eps=1e-8):
    """Scalar Adam; yields the parameter after every step."""
    p = [float(x) for x in p0]
    m = [0.0] * len(p)
    v = [0.0] * len(p)
    for t, g in enumerate(grads, start=1):
        for k in range(len(p)):
            gk = float(g[k])
            m[k] = b1 * m[k] + (1 - b1) * gk
            v[k] = b2 * v[k] + (1 - b2) * gk * gk
            mh = m[k] / (1 - b1 ** t)
            vh = v[k] / (1 - b2 ** t)
            p[k] = p[k] - lr * mh / (math.sqrt(vh) + eps)
        yield list(p)


def rerank_oracle(q_g, q_q, g_g, k1, k2, lam):
    """Loop form of k-reciprocal re-ranking with local query expansion."""
    Q, G = len(q_g), len(q_g[0])
    n = Q + G

    def orig(i, j):
        if i < Q and j < Q:
            return q_q[i][j]
        if i < Q:
            return q_g[i][j - Q]
        if j < Q:
            return q_g[j][i - Q]
        return g_g[i - Q][j - Q]

    sq = [[orig(i, j) ** 2 for j in range(n)] for i in range(n)]
    colmax = [max(sq[r][c] for r in range(n)) for c in range(n)]
    d = [[sq[j][i] / (colmax[i] if colmax[i] > 0 else 1.0) for j in range(n)]
         for i in range(n)]
    rank = [sorted(range(n), key=lambda j, i=i: (d[i][j], j)) for i in range(n)]

    def recip(i, k):
        return [c for c in rank[i][:k + 1] if i in rank[c][:k + 1]]

    V = [[0.0] * n for _ in range(n)]
    for i in range(n):
        r = recip(i, k1)
        members = set(r)
        for c in r:
            cr = recip(c, round(k1 / 2))
            if sum(1 for x in cr if x in r) > 2 / 3 * len(cr):
                members.update(cr)
        members = sorted(members)
        w = [math.exp(-d[i][j]) for j in members]
        total = sum(w)
        for j, wj in zip(members, w):
            V[i][j] = wj / total
    if k2 != 1:
        V = [[sum(V[r][j] for r in rank[i][:k2]) / k2 for j in range(n)] for i in range(n)]
    out = np.zeros((Q, G))
    for i in range(Q):
        for j in range(G):
            m = sum(min(V[i][k], V[Q + j][k]) for k in range(n))
            out[i, j] = lam * q_g[i][j] + (1 - lam) * (1 - m / (2 - m))
    return out


def random_ranking_ap(N, R):
    """Expected AP of a uniformly random ranking of N items with R relevant."""
    H = sum(1.0 / i for i in range(1, N + 1))
    return H / N + (R - 1) / (N * (N - 1)) * (N - H)


def two_cluster_instance():
    rng = np.random.default_rng(0)
    centres = np.array([[0.0, 0.0], [4.0, 0.0]])
    gallery = np.concatenate([c + 0.5 * rng.normal(size=(10, 2)) for c in centres])
    g_ids = np.repeat([0, 1], 10)
    # query of identity 0 pushed 45% of the way toward cluster 1
    queries = np.array([[1.8, 0.3], [0.1, -0.2], [4.2, 0.1]])
    q_ids = np.array([0, 0, 1])
    return queries, gallery, q_ids, g_ids
