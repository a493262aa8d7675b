"""Independent brute-force references used by the tests.

Nothing here imports the package's metric or distance code.
"""

import math


def naive_distances(q, g):
    out = []
    for qi in q:
        row = []
        for gj in g:
            row.append(math.sqrt(sum((float(a) - float(b)) ** 2 for a, b in zip(qi, gj))))
        out.append(row)
    return out


def ranking(row):
    """Gallery indices sorted by (distance, index)."""
    return [j for _, j in sorted((float(d), j) for j, d in enumerate(row))]


def brute_cmc(dist, qids, gids, ranks):
    n_q = len(dist)
    out = {}
    for k in ranks:
        hits = 0
        for i in range(n_q):
            order = ranking(dist[i])
            if any(gids[j] == qids[i] for j in order[:k]):
                hits += 1
        out[k] = 100.0 * hits / n_q
    return out


def brute_ap(row, qid, gids):
    order = ranking(row)
    relevant = sum(1 for g in gids if g == qid)
    found = 0
    total = 0.0
    for pos, j in enumerate(order, start=1):
        if gids[j] == qid:
            found += 1
            total += found / pos
    return total / relevant


def brute_map(dist, qids, gids):
    return sum(brute_ap(dist[i], qids[i], gids) for i in range(len(dist))) / len(dist)


def central_difference(f, x, eps=1e-6):
    """Numerical gradient of scalar ``f`` at flat list/array ``x`` (float64 numpy)."""
    import numpy as np

    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        fp = f(x)
        flat[i] = old - eps
        fm = f(x)
        flat[i] = old
        g[i] = (fp - fm) / (2 * eps)
    return grad


def relative_error(a, b):
    import numpy as np

    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)
