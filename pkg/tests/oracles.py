"""Slow, literal reference implementations used as test oracles.

Each one is written from the definition with plain loops and shares no code
with the package.
"""
import math

import numpy as np


def conv2d_loop(x, w, b, stride):
    bsz, cin, h, wd = x.shape
    cout = w.shape[0]
    ho, wo = math.ceil(h / stride), math.ceil(wd / stride)
    out = np.zeros((bsz, cout, ho, wo))
    for n in range(bsz):
        for o in range(cout):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0 if b is None else b[o]
                    for c in range(cin):
                        for ki in range(3):
                            for kj in range(3):
                                r, s = i * stride + ki - 1, j * stride + kj - 1
                                if 0 <= r < h and 0 <= s < wd:
                                    acc += x[n, c, r, s] * w[o, c, ki, kj]
                    out[n, o, i, j] = acc
    return out


def euclid(a, b):
    return math.sqrt(sum((float(u) - float(v)) ** 2 for u, v in zip(a, b)))


def hardest_triplets_scan(features, labels):
    """O(B^2) scan; strict comparisons keep the lowest index on ties."""
    n = len(labels)
    pos, neg = [], []
    for a in range(n):
        bp, bn = -1, -1
        dp, dn = -math.inf, math.inf
        for j in range(n):
            d = euclid(features[a], features[j])
            if j != a and labels[j] == labels[a] and d > dp:
                bp, dp = j, d
            if labels[j] != labels[a] and d < dn:
                bn, dn = j, d
        pos.append(bp)
        neg.append(bn)
    return pos, neg


def dbscan_reference(x, eps, min_pts):
    """Textbook DBSCAN with a FIFO queue, points visited in index order."""
    n = len(x)
    nbrs = [[j for j in range(n) if euclid(x[i], x[j]) <= eps] for i in range(n)]
    labels = [None] * n
    cluster = -1
    for i in range(n):
        if labels[i] is not None:
            continue
        if len(nbrs[i]) < min_pts:
            labels[i] = -1
            continue
        cluster += 1
        labels[i] = cluster
        queue = list(nbrs[i])
        while queue:
            q = queue.pop(0)
            if labels[q] == -1:
                labels[q] = cluster  # border point reached first by this cluster
            if labels[q] is not None:
                continue
            labels[q] = cluster
            if len(nbrs[q]) >= min_pts:
                queue.extend(nbrs[q])
    return [-1 if v is None else v for v in labels]


def average_precision_from_scratch(relevant):
    hits, total = 0, 0.0
    for k, r in enumerate(relevant, 1):
        if r:
            hits += 1
            total += hits / k
    return total / hits


def score_from_scratch(qf, qid, qcam, gf, gid, gcam):
    """mAP and CMC@1/5/10 recomputed per query with explicit sorting."""
    aps, cmc = [], [0, 0, 0]
    for i in range(len(qid)):
        qn = qf[i] / max(np.linalg.norm(qf[i]), 1e-12)
        items = []
        for j in range(len(gid)):
            if gid[j] == qid[i] and gcam[j] == qcam[i]:
                continue
            gn = gf[j] / max(np.linalg.norm(gf[j]), 1e-12)
            items.append((-float(qn @ gn), j))
        items.sort()
        rel = [gid[j] == qid[i] for _, j in items]
        if not any(rel):
            continue
        aps.append(average_precision_from_scratch(rel))
        first = rel.index(True)
        for c, r in enumerate((1, 5, 10)):
            cmc[c] += first < r
    n = len(aps)
    return sum(aps) / n, [c / n for c in cmc]


def adam_reference(theta, g, m, v, t, lr, b1=0.9, b2=0.999, eps=1e-8):
    """One scalar ADAM update with bias correction, step t counted from 1."""
    m = b1 * m + (1 - b1) * g
    v = b2 * v + (1 - b2) * g * g
    mh = m / (1 - b1 ** t)
    vh = v / (1 - b2 ** t)
    return theta - lr * mh / (math.sqrt(vh) + eps), m, v


def l1_mean(a, b):
    a, b = np.asarray(a).ravel(), np.asarray(b).ravel()
    return sum(abs(float(u) - float(v)) for u, v in zip(a, b)) / len(a)


def relation_scalar(f, fp, fn, tau=1.0):
    sp = sum(float(u) * float(v) for u, v in zip(f, fp)) / tau
    sn = sum(float(u) * float(v) for u, v in zip(f, fn)) / tau
    return math.exp(sp) / (math.exp(sp) + math.exp(sn))


def kmeans_cost(x, assign):
    cost = 0.0
    for c in set(assign):
        members = [x[i] for i in range(len(x)) if assign[i] == c]
        centre = np.mean(members, axis=0)
        cost += sum(float(((m - centre) ** 2).sum()) for m in members)
    return cost
