"""Independent oracle implementations the module code is checked against.

Deliberately written as explicit loops over definitions (exhaustive scans,
all-pairs counts, straight-line scalar math, central finite differences) so
they share no code path with the implementations under test.
"""

import math

import numpy as np


def otsu_bruteforce(histogram) -> int:
    """Exhaustive scan of all 256 thresholds maximizing between-class variance.

    Threshold t puts intensities <= t in the lower class; first maximum wins.
    """
    counts = [float(c) for c in histogram]
    total = sum(counts)
    best_t, best_var = 0, -1.0
    for t in range(256):
        w0 = sum(counts[: t + 1]) / total
        w1 = 1.0 - w0
        if w0 == 0.0 or w1 == 0.0:
            var = 0.0
        else:
            mu0 = sum(i * counts[i] for i in range(t + 1)) / (w0 * total)
            mu1 = sum(i * counts[i] for i in range(t + 1, 256)) / (w1 * total)
            var = w0 * w1 * (mu0 - mu1) ** 2
        if var > best_var:
            best_t, best_var = t, var
    return best_t


def auroc_allpairs(labels, scores) -> float:
    """O(n^2) positive-negative pair count with half credit for ties."""
    labels = np.asarray(labels)
    scores = np.asarray(scores, dtype=np.float64)
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    wins = float((pos[:, None] > neg[None, :]).sum())
    ties = float((pos[:, None] == neg[None, :]).sum())
    return (wins + 0.5 * ties) / (len(pos) * len(neg))


def borda_sorted(table):
    """Sort-based per-task average ranks summed per encoder; (rank_sums, means)."""
    encoders = sorted({e for row in table.values() for e in row})
    rank_sums = {e: 0.0 for e in encoders}
    for row in table.values():
        ordered = sorted(encoders, key=lambda e: -row[e])
        pos = 0
        while pos < len(ordered):
            end = pos
            while end + 1 < len(ordered) and row[ordered[end + 1]] == row[ordered[pos]]:
                end += 1
            avg = (pos + 1 + end + 1) / 2.0
            for i in range(pos, end + 1):
                rank_sums[ordered[i]] += avg
            pos = end + 1
    means = {e: sum(row[e] for row in table.values()) / len(table) for e in encoders}
    return rank_sums, means


def forward_scalar(params, bag):
    """Straight-line scalar recomputation of the gated-attention forward pass."""
    n, m = bag.shape
    l = len(params.w)
    scores = []
    for k in range(n):
        gated = []
        for j in range(l):
            pre_v = sum(params.V[j][i] * bag[k][i] for i in range(m))
            pre_u = sum(params.U[j][i] * bag[k][i] for i in range(m))
            gated.append(math.tanh(pre_v) * (1.0 / (1.0 + math.exp(-pre_u))))
        scores.append(sum(params.w[j] * gated[j] for j in range(l)))
    peak = max(scores)
    exps = [math.exp(s - peak) for s in scores]
    denom = sum(exps)
    attention = [e / denom for e in exps]
    z = [sum(attention[k] * bag[k][i] for k in range(n)) for i in range(m)]
    logit = sum(params.W_c[i] * z[i] for i in range(m)) + params.b
    prob = 1.0 / (1.0 + math.exp(-logit))
    return prob, attention


def fd_gradients(loss_fn, params, eps=1e-4):
    """Central finite differences of loss_fn over every parameter entry.

    Returns a dict field -> array of the same shape (b as a 0-d array).
    """
    out = {}
    for name in ("V", "U", "w", "W_c"):
        arr = getattr(params, name)
        grad = np.zeros_like(arr)
        it = np.nditer(arr, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            plus = params.copy()
            getattr(plus, name)[idx] += eps
            minus = params.copy()
            getattr(minus, name)[idx] -= eps
            grad[idx] = (loss_fn(plus) - loss_fn(minus)) / (2 * eps)
        out[name] = grad
    plus = params.copy()
    plus.b += eps
    minus = params.copy()
    minus.b -= eps
    out["b"] = np.array((loss_fn(plus) - loss_fn(minus)) / (2 * eps))
    return out


def relative_error(a, b, floor=1e-3) -> float:
    a = float(a)
    b = float(b)
    return abs(a - b) / max(abs(a), abs(b), floor)
