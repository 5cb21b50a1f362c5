"""Independent scalar reference implementations used as test oracles.

Nothing here calls into mrpalloc; every formula is re-derived with plain
Python loops.
"""

import math


def magnitude(w):
    return [[abs(v) for v in row] for row in w]


def wanda(w, x):
    n_in = len(w[0])
    norms = []
    for j in range(n_in):
        acc = 0.0
        for row in x:
            acc += row[j] * row[j]
        norms.append(math.sqrt(acc))
    return [[abs(w[i][j]) * norms[j] for j in range(n_in)] for i in range(len(w))]


def redundancy(scores, m):
    flat = [v for row in scores for v in row]
    mean = sum(flat) / len(flat)
    outliers = 0
    for v in flat:
        if v > m * mean:
            outliers += 1
    return 1.0 - outliers / len(flat)


def reversal(a, b):
    n = len(a)
    pairs = flips = 0
    for i in range(n):
        for j in range(i + 1, n):
            pairs += 1
            if (a[i] < a[j] and b[i] > b[j]) or (a[i] > a[j] and b[i] < b[j]):
                flips += 1
    return flips / pairs


def er_ratios(dims, r, iters=200):
    """Erdos-Renyi sparsities by bisection on the density scale factor."""
    params = [co * ci for co, ci in dims]
    kernel = [(co + ci) / (co * ci) for co, ci in dims]
    target = (1 - r) * sum(params)
    lo, hi = 0.0, 1e12
    for _ in range(iters):
        mid = (lo + hi) / 2
        kept = sum(p * min(1.0, mid * k) for p, k in zip(params, kernel))
        if kept < target:
            lo = mid
        else:
            hi = mid
    c = (lo + hi) / 2
    return [1 - min(1.0, c * k) for k in kernel]


def global_ratios(block_scores, r):
    """block_scores: list (per block) of flat score lists."""
    items = []
    for b, scores in enumerate(block_scores):
        for f, s in enumerate(scores):
            items.append((s, b, f))
    items.sort()
    total = len(items)
    k = math.floor(r * total + 1e-9)
    removed = [0] * len(block_scores)
    for s, b, f in items[:k]:
        removed[b] += 1
    return [removed[b] / len(block_scores[b]) for b in range(len(block_scores))]


def unstructured_keep(scores, ratio):
    flat = [(v, idx) for idx, v in enumerate(v for row in scores for v in row)]
    k = math.floor(ratio * len(flat) + 1e-9)
    pruned = {idx for _, idx in sorted(flat)[:k]}
    cols = len(scores[0])
    return [[(i * cols + j) not in pruned for j in range(cols)] for i in range(len(scores))]


def semi_keep(scores, n_pruned, group):
    keep = []
    for row in scores:
        krow = [True] * len(row)
        for start in range(0, len(row), group):
            window = sorted((row[start + t], start + t) for t in range(group))
            for _, idx in window[:n_pruned]:
                krow[idx] = False
        keep.append(krow)
    return keep


def relu(v):
    return v if v > 0 else 0.0


def forward(blocks, x, residual=True):
    """blocks: list of (list of (weight, keep) per layer). ReLU after every layer."""
    out = []
    for row in x:
        h = list(row)
        for layers in blocks:
            z = h
            for w, keep in layers:
                z = [relu(sum(w[i][j] * z[j] for j in range(len(z)) if keep is None or keep[i][j]))
                     for i in range(len(w))]
            h = [a + b for a, b in zip(h, z)] if residual else z
        out.append(h)
    return out


def output_distance(ref, out):
    n = sum(len(r) for r in ref)
    diff = sum(abs(a - b) for ra, rb in zip(ref, out) for a, b in zip(ra, rb)) / n
    scale = sum(abs(a) for r in ref for a in r) / n
    return diff / scale
