"""Exhaustive split enumeration over raw examples, written with scalar Python."""
import math
import random

import numpy as np

FLOOR = 1e-12


def leaf_weight(G, H, l1, l2):
    shrunk = math.copysign(max(abs(G) - l1, 0.0), G)
    return -shrunk / (max(H, FLOOR) + l2)


def objective(G, H, l1, l2):
    w = leaf_weight(G, H, l1, l2)
    return G * w + 0.5 * (max(H, FLOOR) + l2) * w * w + l1 * abs(w)


def exhaustive_best_split(X, g, h, bounds, reg, post_pruning=False, tol=1e-9):
    """``(feature, threshold, default_left, gain)`` or ``None``.

    Gains within ``tol`` count as ties, resolved by lowest feature, then
    lowest threshold, then missing-left first.
    """
    n = len(g)
    G, H = sum(g), sum(h)
    parent = objective(G, H, reg.l1, reg.l2)
    cands = []
    for j, b in enumerate(bounds):
        for t in list(b)[1:]:
            for default_left in (True, False):
                lg = lh = 0.0
                ln = 0
                for i in range(n):
                    x = X[i][j]
                    left = default_left if x != x else x < t
                    if left:
                        lg += g[i]
                        lh += h[i]
                        ln += 1
                rg, rh, rn = G - lg, H - lh, n - ln
                if ln == 0 or rn == 0:
                    continue
                if lh < reg.min_node_weight or rh < reg.min_node_weight:
                    continue
                gain = (parent - objective(lg, lh, reg.l1, reg.l2)
                        - objective(rg, rh, reg.l1, reg.l2) - reg.tree_complexity)
                if not post_pruning and gain <= 0:
                    continue
                cands.append((gain, j, t, default_left))
    if not cands:
        return None
    top = max(c[0] for c in cands)
    ties = [c for c in cands if c[0] >= top - tol * max(1.0, abs(top))]
    gain, j, t, d = min(ties, key=lambda c: (c[1], c[2], not c[3]))
    return j, t, d, gain


def random_dataset(seed, max_n=64, max_f=8, max_buckets=8):
    """Raw features (NaN = missing), boundaries, gradients and Hessians."""
    r = random.Random(seed)
    n = r.randint(1, max_n)
    nf = r.randint(1, max_f)
    X = [[0.0] * nf for _ in range(n)]
    bounds = []
    for j in range(nf):
        nb = r.randint(1, max_buckets)
        b = sorted(set(round(r.uniform(-3, 3), 2) for _ in range(nb)))
        bounds.append(b)
        for i in range(n):
            u = r.random()
            if u < 0.15:
                X[i][j] = float("nan")
            elif u < 0.3:
                X[i][j] = r.choice(b)
            else:
                X[i][j] = round(r.uniform(-4, 4), 2)
    g = [r.uniform(-2, 2) for _ in range(n)]
    h = [r.uniform(0.01, 1.0) for _ in range(n)]
    return np.array(X), np.array(g), np.array(h), [np.array(b) for b in bounds]
