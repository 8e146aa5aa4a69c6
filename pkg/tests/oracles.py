"""Brute-force reference implementations used only by the tests.

Deliberately written from point/pair-level definitions, with plain Python
loops, so they share no code path with ``seada.evaluation``.
"""
from __future__ import annotations

import itertools
import math
from collections import Counter
from fractions import Fraction


def pair_counts(u, v):
    """(same-same, same-diff, diff-same, diff-diff) over all unordered pairs."""
    a = b = c = d = 0
    for i, j in itertools.combinations(range(len(u)), 2):
        su = u[i] == u[j]
        sv = v[i] == v[j]
        if su and sv:
            a += 1
        elif su:
            b += 1
        elif sv:
            c += 1
        else:
            d += 1
    return a, b, c, d


def ari_pairs(u, v) -> float:
    a, b, c, d = pair_counts(u, v)
    if b == 0 and c == 0:
        return 1.0
    return float(Fraction(2 * (a * d - b * c), (a + b) * (b + d) + (a + c) * (c + d)))


def entropy(labels) -> float:
    n = len(labels)
    return -sum(k / n * math.log(k / n) for k in Counter(labels).values())


def conditional_entropy(u, v) -> float:
    """H(U | V) from joint point counts."""
    n = len(u)
    joint = Counter(zip(u, v))
    marg = Counter(v)
    return -sum(c / n * math.log(c / marg[y]) for (_, y), c in joint.items())


def mutual_info_points(u, v) -> float:
    return entropy(u) - conditional_entropy(u, v)


def homogeneity(u, v) -> float:
    h = entropy(u)
    return 1.0 if h == 0 else 1.0 - conditional_entropy(u, v) / h


def completeness(u, v) -> float:
    return homogeneity(v, u)


def v_measure(u, v) -> float:
    h, c = homogeneity(u, v), completeness(u, v)
    return 0.0 if h + c == 0 else 2 * h * c / (h + c)


def _tables(rows, cols):
    """All non-negative integer tables with the given margins."""
    if not rows:
        if all(c == 0 for c in cols):
            yield []
        return
    first, rest = rows[0], rows[1:]

    def fill(j, left, remaining_cols):
        if j == len(cols) - 1:
            if left <= remaining_cols[j]:
                yield [left]
            return
        for x in range(min(left, remaining_cols[j]) + 1):
            for tail in fill(j + 1, left - x, remaining_cols):
                yield [x] + tail

    for row in fill(0, first, cols):
        new_cols = [c - x for c, x in zip(cols, row)]
        for sub in _tables(rest, new_cols):
            yield [row] + sub


def expected_mi_enumerated(u, v) -> float:
    """E[MI] over uniformly random relabelings, by enumerating every
    contingency table with the observed margins and its exact probability."""
    n = len(u)
    rows = sorted(Counter(u).values())
    cols = sorted(Counter(v).values())
    total = 0.0
    log_fact = [math.lgamma(k + 1) for k in range(n + 1)]
    base = sum(log_fact[r] for r in rows) + sum(log_fact[c] for c in cols) - log_fact[n]
    for t in _tables(rows, cols):
        log_p = base - sum(log_fact[x] for row in t for x in row)
        mi = 0.0
        for i, row in enumerate(t):
            for j, x in enumerate(row):
                if x:
                    mi += x / n * math.log(n * x / (rows[i] * cols[j]))
        total += math.exp(log_p) * mi
    return total


def ami_enumerated(u, v) -> float:
    mi = mutual_info_points(u, v)
    emi = expected_mi_enumerated(u, v)
    norm = 0.5 * (entropy(u) + entropy(v))
    den = norm - emi
    if abs(den) < 1e-12:
        return 1.0 if abs(mi - norm) < 1e-12 else 0.0
    return (mi - emi) / den


def macro_f1_bruteforce(y_true, y_pred) -> float:
    classes = set(y_true) | set(y_pred)
    f1s = []
    for c in classes:
        tp = sum(t == c and p == c for t, p in zip(y_true, y_pred))
        pred_pos = sum(p == c for p in y_pred)
        true_pos = sum(t == c for t in y_true)
        prec = tp / pred_pos if pred_pos else 0.0
        rec = tp / true_pos if true_pos else 0.0
        f1s.append(0.0 if prec + rec == 0 else 2 * prec * rec / (prec + rec))
    return sum(f1s) / len(f1s)


def ssim_naive(x, y, w=7, c1=1e-4, c2=9e-4) -> float:
    """Window-by-window SSIM with explicit loops."""
    import numpy as np

    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    vals = []
    d0, d1, d2 = x.shape
    for i in range(d0 - w + 1):
        for j in range(d1 - w + 1):
            for k in range(d2 - w + 1):
                a = x[i:i + w, j:j + w, k:k + w]
                b = y[i:i + w, j:j + w, k:k + w]
                ma, mb = a.mean(), b.mean()
                va = ((a - ma) ** 2).mean()
                vb = ((b - mb) ** 2).mean()
                cab = ((a - ma) * (b - mb)).mean()
                vals.append((2 * ma * mb + c1) * (2 * cab + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2)))
    return float(np.mean(vals))
