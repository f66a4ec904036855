"""Independent brute-force references used by the test suite. These stay
deliberately naive: direct formula evaluation, exhaustive enumeration,
central finite differences."""

import datetime

import numpy as np


def bilinear_closed_form(vals, wy, wx):
    """4-term bilinear formula: vals = (v00, v01, v10, v11)."""
    v00, v01, v10, v11 = vals
    return (
        v00 * (1 - wy) * (1 - wx)
        + v01 * (1 - wy) * wx
        + v10 * wy * (1 - wx)
        + v11 * wy * wx
    )


def winter_days_in_year(year):
    """Walk the calendar and count extended-winter days in one year."""
    d = datetime.date(year, 1, 1)
    count = 0
    while d.year == year:
        if d.month <= 3 or d.month == 12 or (d.month == 11 and d.day >= 15):
            count += 1
        d += datetime.timedelta(days=1)
    return count


def pairwise_auc(scores, truth):
    """P(score+ > score-) + 0.5 P(tie) by exhaustive pair enumeration."""
    pos = [s for s, t in zip(scores, truth) if t]
    neg = [s for s, t in zip(scores, truth) if not t]
    total = 0.0
    for p in pos:
        for n in neg:
            if p > n:
                total += 1.0
            elif p == n:
                total += 0.5
    return total / (len(pos) * len(neg))


def csi_direct(tp, fn, fp):
    return tp / (tp + fn + fp)


def brier_direct(probs, labels, n_classes=4):
    """Per-class binary mean squared error, support weighted."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    per_class = []
    supports = []
    for c in range(n_classes):
        y = (labels == c).astype(np.float64)
        per_class.append(np.mean((probs[:, c] - y) ** 2))
        supports.append(y.sum())
    supports = np.asarray(supports, dtype=np.float64)
    return float(np.dot(per_class, supports / supports.sum()))


def adjusted_rand_index(a, b):
    """ARI from the pair-counting contingency table."""
    a = np.asarray(a)
    b = np.asarray(b)
    ua, ia = np.unique(a, return_inverse=True)
    ub, ib = np.unique(b, return_inverse=True)
    cont = np.zeros((len(ua), len(ub)), dtype=np.int64)
    np.add.at(cont, (ia, ib), 1)

    def comb2(x):
        return x * (x - 1) / 2.0

    sum_ij = comb2(cont).sum()
    sum_a = comb2(cont.sum(axis=1)).sum()
    sum_b = comb2(cont.sum(axis=0)).sum()
    n = comb2(len(a))
    expected = sum_a * sum_b / n
    max_index = (sum_a + sum_b) / 2.0
    if max_index == expected:
        return 1.0
    return float((sum_ij - expected) / (max_index - expected))


def finite_diff_grad(f, x, h=1e-6):
    """Central-difference gradient of a scalar numpy function."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        hi = f(x)
        flat[i] = orig - h
        lo = f(x)
        flat[i] = orig
        gf[i] = (hi - lo) / (2 * h)
    return g


def markov_stationary(p):
    """Stationary distribution via the left eigenvector at eigenvalue 1."""
    vals, vecs = np.linalg.eig(p.T)
    k = np.argmin(np.abs(vals - 1.0))
    v = np.real(vecs[:, k])
    return v / v.sum()
