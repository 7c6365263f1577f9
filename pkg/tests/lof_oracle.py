"""Brute-force Local Outlier Factor written independently of the library.

Plain Python loops over all pairs; neighbourhoods are the k closest points,
ties broken by index, matching the library's documented convention.
"""

import math


def _dist(a, b):
    return math.sqrt(sum((x - y) ** 2 for x, y in zip(a, b)))


def _knn(dists):
    return [j for _, j in sorted((d, j) for j, d in dists)]


def brute_force_lof(points, k, queries=()):
    n = len(points)
    neigh, kdist = [], []
    for i in range(n):
        order = _knn([(j, _dist(points[i], points[j])) for j in range(n) if j != i])[:k]
        neigh.append(order)
        kdist.append(_dist(points[i], points[order[-1]]))

    def lrd_of(p, nbrs):
        s = sum(max(kdist[o], _dist(p, points[o])) for o in nbrs)
        return math.inf if s == 0 else k / s

    def ratio(a, b):
        if math.isinf(a) and math.isinf(b):
            return 1.0
        return a / b

    lrd = [lrd_of(points[i], neigh[i]) for i in range(n)]
    train_scores = [sum(ratio(lrd[o], lrd[i]) for o in neigh[i]) / k for i in range(n)]
    query_scores = []
    for q in queries:
        nbrs = _knn([(j, _dist(q, points[j])) for j in range(n)])[:k]
        lq = lrd_of(q, nbrs)
        query_scores.append(sum(ratio(lrd[o], lq) for o in nbrs) / k)
    return train_scores, query_scores
