"""Independent reference implementations used only by the tests.

None of these import the package's numerical code paths they are checked
against; each is the slow, obvious formulation.
"""

from __future__ import annotations

import itertools
import math
from collections import deque

import mpmath
import numpy as np

mpmath.mp.dps = 50


def unfolded_path_length(kind: str, r, source_depth, receiver_depth, seafloor):
    """Length of a specular ray traced segment by segment, in high precision.

    The ray leaves the source, reflects off the listed boundaries in order
    and reaches the receiver.  Equal angles of incidence and reflection make
    each leg's horizontal extent proportional to its vertical extent.
    """
    r, p, h, z = (mpmath.mpf(repr(float(v))) for v in (r, source_depth, receiver_depth, seafloor))
    if kind == "DP":
        legs = [abs(h - p)]
    elif kind == "BB":  # down to the bottom, up to the receiver
        legs = [z - p, z - h]
    elif kind == "BSB":  # down to the bottom, up to the surface, down to the receiver
        legs = [z - p, z, h]
    else:
        raise ValueError(kind)
    total = sum(legs)
    if total == 0:
        return r
    return sum(mpmath.sqrt((r * v / total) ** 2 + v**2) for v in legs)


def mirror_tdoas(r, source_depth, receiver_depth, seafloor, sound_speed):
    kinds = ("DP", "BB", "BSB")
    q = {k: unfolded_path_length(k, r, source_depth, receiver_depth, seafloor) for k in kinds}
    c = mpmath.mpf(repr(float(sound_speed)))
    pairs = (("DP", "BB"), ("DP", "BSB"), ("BB", "BSB"))
    return [float(abs(q[a] - q[b]) / c) for a, b in pairs]


def gauss_pdf(x, mean, sigma):
    return math.exp(-0.5 * ((x - mean) / sigma) ** 2) / (sigma * math.sqrt(2 * math.pi))


def brute_association(z, g, d, sigma, mu, a_fa):
    """Sum over all of {0..M}^3 with the no-shared-measurement indicator.

    Returns the sum and the (3, M+1) marginal association probabilities.
    ``d`` must already be zero for infeasible pairs.
    """
    M = len(z)
    L = len(g)
    total = 0.0
    marg = np.zeros((L, M + 1))
    for a in itertools.product(range(M + 1), repeat=L):
        used = [m for m in a if m]
        if len(used) != len(set(used)):
            continue
        prod = 1.0
        for l, m in enumerate(a):
            if m == 0:
                prod *= 1.0 - d[l]
            else:
                zm = z[m - 1]
                f_fa = 1.0 / a_fa if 0 <= zm < a_fa else 0.0
                prod *= d[l] * gauss_pdf(zm, g[l], sigma[l]) / (mu * f_fa)
        total += prod
        for l, m in enumerate(a):
            marg[l, m] += prod
    return total, marg / total


def naive_dbscan(X, eps, min_pts):
    """Textbook DBSCAN with an explicit O(N^2) distance matrix.

    Points are visited in index order; a border point joins the first cluster
    that reaches it.  Noise is -1.
    """
    X = np.asarray(X, dtype=float)
    n = len(X)
    D = np.sqrt(((X[:, None, :] - X[None, :, :]) ** 2).sum(-1))
    neighbours = [np.nonzero(D[i] <= eps)[0] for i in range(n)]
    core = np.array([len(nb) >= min_pts for nb in neighbours], dtype=bool)
    labels = np.full(n, -1)
    cluster = 0
    for i in range(n):
        if labels[i] != -1 or not core[i]:
            continue
        labels[i] = cluster
        queue = deque([i])
        while queue:
            j = queue.popleft()
            if not core[j]:
                continue
            for k in neighbours[j]:
                if labels[k] == -1:
                    labels[k] = cluster
                    queue.append(k)
        cluster += 1
    return labels


def same_partition(a, b) -> bool:
    """Labels agree up to renaming, with -1 fixed."""
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape or not np.array_equal(a == -1, b == -1):
        return False
    fwd, back = {}, {}
    for x, y in zip(a, b):
        if fwd.setdefault(x, y) != y or back.setdefault(y, x) != x:
            return False
    return True


def naive_median(A, kt, kq):
    """Median over the in-bounds part of a (kq x kt) window, cell by cell."""
    nq, nt = A.shape
    out = np.empty_like(A, dtype=float)
    for i in range(nq):
        for j in range(nt):
            w = A[max(0, i - kq // 2): i + kq // 2 + 1, max(0, j - kt // 2): j + kt // 2 + 1]
            out[i, j] = np.median(w)
    return out
