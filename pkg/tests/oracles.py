"""Slow, obviously-correct reference implementations of the agreement statistics."""

import itertools
import math

import numpy as np

def brute_dice(p, g, c):
    tp = fp = fn = 0
    for a, b in zip(np.ravel(p).tolist(), np.ravel(g).tolist()):
        tp += a == c and b == c
        fp += a == c and b != c
        fn += a != c and b == c
    return 1.0 if tp + fp + fn == 0 else 2 * tp / (2 * tp + fp + fn)


def brute_ranks(v):
    return [sum(w < x for w in v) + (sum(w == x for w in v) + 1) / 2 for x in v]


def brute_spearman(x, y):
    rx, ry = brute_ranks(list(x)), brute_ranks(list(y))
    n = len(x)
    mx, my = sum(rx) / n, sum(ry) / n
    num = sum((a - mx) * (b - my) for a, b in zip(rx, ry))
    den = math.sqrt(sum((a - mx) ** 2 for a in rx) * sum((b - my) ** 2 for b in ry))
    return num / den


def brute_bland_altman(x, y):
    d = [a - b for a, b in zip(x, y)]
    n = len(d)
    bias = sum(d) / n
    sd = math.sqrt(sum((v - bias) ** 2 for v in d) / (n - 1))
    return bias, bias - 1.96 * sd, bias + 1.96 * sd


def enumerated_wilcoxon(x, y):
    d = [a - b for a, b in zip(x, y) if a != b]
    ranks = brute_ranks([abs(v) for v in d])
    w = sum(r for r, v in zip(ranks, d) if v > 0)
    le = ge = 0
    for signs in itertools.product((0, 1), repeat=len(d)):
        s = sum(r for r, keep in zip(ranks, signs) if keep)
        le += s <= w + 1e-9
        ge += s >= w - 1e-9
    total = 2 ** len(d)
    return w, min(1.0, 2 * min(le, ge) / total)
