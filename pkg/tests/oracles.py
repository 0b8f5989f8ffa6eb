"""Brute-force reference implementations shared by the metric tests."""

import math

import numpy as np


def oracle_bin(c, m):
    for i in range(m):
        if i / m < c <= (i + 1) / m:
            return i
    return 0  # c == 0


def oracle_gap(samples, m, n):
    bins = [[] for _ in range(m)]
    for c, hit in samples:
        bins[oracle_bin(c, m)].append((c, hit))
    total = 0.0
    for b in bins:
        if b:
            acc = sum(h for _, h in b) / len(b)
            conf = sum(c for c, _ in b) / len(b)
            total += len(b) / n * abs(acc - conf)
    return total


def oracle_ece(probs, gt, m, foreground_only):
    samples = []
    for s, y in zip(probs.reshape(-1, probs.shape[-1]), gt.reshape(-1)):
        pred = int(np.argmax(s))
        if foreground_only and y == 0 and pred == 0:
            continue
        samples.append((float(s.max()), float(pred == y)))
    return oracle_gap(samples, m, len(samples))


def oracle_cece(probs, gt, m):
    flat = probs.reshape(-1, probs.shape[-1])
    labels = gt.reshape(-1)
    return sum(
        oracle_gap([(float(s[j]), float(y == j)) for s, y in zip(flat, labels)], m, len(labels))
        for j in range(probs.shape[-1])
    )


def oracle_hd95(a, b):
    def edge(mask):
        h, w = mask.shape
        out = []
        for i in range(h):
            for j in range(w):
                if not mask[i, j]:
                    continue
                nbrs = [(i - 1, j), (i + 1, j), (i, j - 1), (i, j + 1)]
                if any(not (0 <= p < h and 0 <= q < w) or not mask[p, q] for p, q in nbrs):
                    out.append((i, j))
        return out

    ea, eb = edge(a), edge(b)
    dists = [min(math.hypot(p - r, q - s) for r, s in eb) for p, q in ea]
    dists += [min(math.hypot(p - r, q - s) for r, s in ea) for p, q in eb]
    return float(np.percentile(dists, 95))
