"""Measurement-origin uncertainty for TDOA scans.

Each of the three path pairs either produces one measurement (with
probability ``d_l``) or is missed; false alarms are Poisson in number and
uniform on ``[0, max_tdoa)``.  The association vector ``a`` maps every pair to
a measurement index (1-based) or 0 for "missed"; a vector is valid when no
measurement is claimed by two pairs.

With three pairs the valid vectors are few enough that the marginalisation
over associations is exact: by enumeration for single states, and by a
tensor contraction over whole particle sets.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from itertools import permutations, combinations

import numpy as np
from scipy.special import logsumexp

from .geometry import (
    N_PAIRS,
    Environment,
    ReceiverState,
    SourceState,
    feasible_mask,
    predict_tdoas,
)

UNDERFLOW_FLOOR = 1e-300
LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)


@dataclass(frozen=True)
class TdoaScan:
    time_index: int
    timestamp: float
    measurements: tuple[float, ...] = ()

    def __post_init__(self):
        object.__setattr__(
            self, "measurements", tuple(float(z) for z in self.measurements)
        )
        if any(z < 0 or not math.isfinite(z) for z in self.measurements):
            raise ValueError(f"scan {self.time_index}: TDOAs must be finite and >= 0")

    @property
    def count(self) -> int:
        return len(self.measurements)

    def values(self) -> np.ndarray:
        return np.asarray(self.measurements, dtype=float)


@dataclass(frozen=True)
class DetectionModel:
    d: tuple[float, ...] = (0.12, 0.08, 0.06)
    position_dependent: bool = True

    def __post_init__(self):
        object.__setattr__(self, "d", tuple(float(x) for x in self.d))
        if len(self.d) != N_PAIRS:
            raise ValueError(f"need {N_PAIRS} detection probabilities, got {len(self.d)}")
        for l, p in enumerate(self.d, 1):
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"d_{l} = {p} outside [0, 1]")

    def probabilities(self, feasible: np.ndarray) -> np.ndarray:
        """Per-pair detection probabilities with the feasibility mask applied."""
        d = np.asarray(self.d)
        if self.position_dependent:
            return np.where(feasible, d, 0.0)
        return np.broadcast_to(d, np.shape(feasible)).astype(float)


@dataclass(frozen=True)
class ClutterModel:
    mean_count: float = 4.0
    max_tdoa: float = 0.1

    def __post_init__(self):
        if not self.mean_count >= 0:
            raise ValueError(f"clutter mean_count must be >= 0, got {self.mean_count}")
        if not self.max_tdoa > 0:
            raise ValueError(f"clutter max_tdoa must be > 0, got {self.max_tdoa}")

    def density(self, z):
        z = np.asarray(z, dtype=float)
        return np.where((z >= 0.0) & (z < self.max_tdoa), 1.0 / self.max_tdoa, 0.0)

    def log_intensity(self, z) -> np.ndarray:
        """``log(mean_count * density(z))``; ``-inf`` where no clutter can occur."""
        with np.errstate(divide="ignore"):
            return np.log(self.mean_count * self.density(z))


@dataclass(frozen=True)
class NoiseModel:
    sigma: tuple[float, ...] = (5e-4, 5e-4, 5e-4)

    def __post_init__(self):
        s = self.sigma
        if np.isscalar(s):
            s = (s,) * N_PAIRS
        object.__setattr__(self, "sigma", tuple(float(x) for x in s))
        if len(self.sigma) != N_PAIRS:
            raise ValueError(f"need {N_PAIRS} noise sigmas, got {len(self.sigma)}")
        if any(not x > 0 for x in self.sigma):
            raise ValueError(f"noise sigmas must be > 0, got {self.sigma}")


def _log_gauss(z, mean, sigma):
    u = (z - mean) / sigma
    return -0.5 * u * u - np.log(sigma) - LOG_SQRT_2PI


def likelihood(
    pair_index: int,
    measurement: float,
    src: SourceState,
    receiver: ReceiverState,
    env: Environment,
    noise: NoiseModel,
) -> float:
    """Gaussian density of one TDOA measurement under pair ``pair_index`` (1-based)."""
    g = predict_tdoas(src.range, src.depth, receiver.depth, env)[pair_index - 1]
    sigma = noise.sigma[pair_index - 1]
    return float(np.exp(_log_gauss(measurement, g, sigma)))


def psi(a) -> int:
    nonzero = [x for x in a if x != 0]
    return int(len(nonzero) == len(set(nonzero)))


@lru_cache(maxsize=64)
def _valid_vectors(L: int, M: int) -> np.ndarray:
    rows = []
    for j in range(min(L, M) + 1):
        for pairs in combinations(range(L), j):
            for meas in permutations(range(1, M + 1), j):
                a = [0] * L
                for l, m in zip(pairs, meas):
                    a[l] = m
                rows.append(a)
    rows.sort()
    out = np.array(rows, dtype=np.intp).reshape(-1, L)
    out.setflags(write=False)
    return out


def enumerate_valid(L: int, M: int) -> np.ndarray:
    """All association vectors in ``{0..M}^L`` with no shared nonzero entry.

    Returned as an ``(V, L)`` integer array in lexicographic order.
    """
    if L < 1 or M < 0:
        raise ValueError(f"need L >= 1 and M >= 0, got L={L}, M={M}")
    return _valid_vectors(int(L), int(M))


def valid_count(L: int, M: int) -> int:
    return sum(
        math.comb(L, j) * math.perm(M, j) for j in range(min(L, M) + 1)
    )


@lru_cache(maxsize=64)
def _unassigned(L: int, M: int) -> np.ndarray:
    """``(V, M)`` mask of measurements left to clutter by each valid vector."""
    A = _valid_vectors(L, M)
    U = np.ones((len(A), M), dtype=bool)
    for l in range(L):
        rows = np.nonzero(A[:, l])[0]
        U[rows, A[rows, l] - 1] = False
    U.setflags(write=False)
    return U


def _log_terms(tdoas, feas, z, detection, noise):
    """Missed and detected log-terms shared by every evaluation path.

    Returns ``miss`` of shape ``(..., L)`` and ``det`` of shape ``(..., L, M)``
    holding ``log(1 - d_l)`` and ``log(d_l f_l(z_m | x))``.
    """
    d = detection.probabilities(feas)
    sigma = np.asarray(noise.sigma)
    with np.errstate(divide="ignore"):
        miss = np.log1p(-d)
        log_d = np.log(d)
    det = log_d[..., None] + _log_gauss(
        z, tdoas[..., None], sigma[:, None]
    )
    return miss, det


def _state_terms(scan, src, receiver, env, detection, noise):
    g = predict_tdoas(src.range, src.depth, receiver.depth, env)
    feas = feasible_mask(src.depth, receiver.depth, env)
    return _log_terms(g, feas, scan.values(), detection, noise)


def _check_clutter(scan: TdoaScan, clutter: ClutterModel) -> np.ndarray:
    z = scan.values()
    if scan.count and clutter.mean_count == 0:
        raise ValueError(
            "r-factor undefined for detected branch: clutter mean_count is 0"
        )
    log_c = clutter.log_intensity(z)
    if not np.all(np.isfinite(log_c)):
        bad = z[~np.isfinite(log_c)]
        raise ValueError(
            f"measurements {bad.tolist()} outside clutter support [0, {clutter.max_tdoa})"
        )
    return log_c


def _log_r_matrix(scan, src, receiver, env, detection, clutter, noise):
    """``(L, M+1)`` log r-factors; column 0 is the missed branch."""
    log_c = _check_clutter(scan, clutter)
    miss, det = _state_terms(scan, src, receiver, env, detection, noise)
    return np.concatenate([miss[:, None], det - log_c], axis=1)


def r_factor(
    pair_index: int,
    a_l: int,
    scan: TdoaScan,
    src: SourceState,
    receiver: ReceiverState,
    env: Environment,
    detection: DetectionModel,
    clutter: ClutterModel,
    noise: NoiseModel,
) -> float:
    """Association factor for pair ``pair_index`` (1-based) taking entry ``a_l``.

    ``a_l = 0`` gives ``1 - d_l``; ``a_l = m >= 1`` gives the detection
    likelihood ratio ``d_l f_l(z_m | x) / (mu_FA f_FA(z_m))``.  Positive values
    that underflow are clamped to ``UNDERFLOW_FLOOR``.
    """
    if not 0 <= a_l <= scan.count:
        raise ValueError(f"association entry {a_l} outside [0, {scan.count}]")
    l = pair_index - 1
    if a_l == 0:
        miss, _ = _state_terms(scan, src, receiver, env, detection, noise)
        return float(np.exp(miss[l]))
    log_c = _check_clutter(scan, clutter)
    _, det = _state_terms(scan, src, receiver, env, detection, noise)
    log_r = det[l, a_l - 1] - log_c[a_l - 1]
    if log_r == -np.inf:
        return 0.0
    return max(float(np.exp(log_r)), UNDERFLOW_FLOOR)


def _vector_scores(log_r: np.ndarray, A: np.ndarray) -> np.ndarray:
    L = log_r.shape[0]
    return log_r[np.arange(L), A].sum(axis=1)


def log_association_sum(scan, src, receiver, env, detection, clutter, noise) -> float:
    log_r = _log_r_matrix(scan, src, receiver, env, detection, clutter, noise)
    A = enumerate_valid(N_PAIRS, scan.count)
    return float(logsumexp(_vector_scores(log_r, A)))


def association_sum(
    scan: TdoaScan,
    src: SourceState,
    receiver: ReceiverState,
    env: Environment,
    detection: DetectionModel,
    clutter: ClutterModel,
    noise: NoiseModel,
) -> float:
    """Sum over valid association vectors of the product of r-factors.

    This is the unnormalised likelihood of the whole scan for one state.
    """
    return float(
        np.exp(log_association_sum(scan, src, receiver, env, detection, clutter, noise))
    )


def association_marginals(
    scan: TdoaScan,
    src: SourceState,
    receiver: ReceiverState,
    env: Environment,
    detection: DetectionModel,
    clutter: ClutterModel,
    noise: NoiseModel,
) -> np.ndarray:
    """Posterior ``P(a_l = m | x, z)`` as an ``(L, M+1)`` row-stochastic matrix."""
    log_r = _log_r_matrix(scan, src, receiver, env, detection, clutter, noise)
    A = enumerate_valid(N_PAIRS, scan.count)
    scores = _vector_scores(log_r, A)
    total = logsumexp(scores)
    if not np.isfinite(total):
        raise ValueError("association sum is zero; marginals are undefined")
    p = np.exp(scores - total)
    out = np.zeros((N_PAIRS, scan.count + 1))
    for l in range(N_PAIRS):
        np.add.at(out[l], A[:, l], p)
    return out


def estimate_clutter_rate(scans, detection: DetectionModel, floor: float = 0.01) -> float:
    """Mean measurement count minus the expected number of detections.

    Every pair is taken as feasible; the result is clamped at ``floor`` so a
    clutter-free model is never produced from data.
    """
    counts = [s.count for s in scans]
    if not counts:
        raise ValueError("no scans to estimate the clutter rate from")
    return max(float(np.mean(counts)) - float(np.sum(detection.d)), floor)


def gate(measurements: np.ndarray, predicted: np.ndarray, max_count: int) -> np.ndarray:
    """Keep the ``max_count`` measurements closest to any predicted TDOA.

    Original order is preserved.  ``predicted`` may have any shape.
    """
    z = np.asarray(measurements, dtype=float)
    if len(z) <= max_count:
        return z
    ref = np.sort(np.ravel(predicted))
    ref = ref[np.isfinite(ref)]
    idx = np.clip(np.searchsorted(ref, z), 1, len(ref) - 1)
    dist = np.minimum(np.abs(z - ref[idx - 1]), np.abs(z - ref[idx]))
    keep = np.sort(np.argsort(dist, kind="stable")[:max_count])
    return z[keep]


def _validity_tensor(L: int, M: int, log_c: np.ndarray):
    """Dense ``(M+1,)*L`` weights of valid vectors times their clutter factor.

    Entries are scaled by ``exp(-shift)`` so the largest is 1; invalid
    vectors are 0.
    """
    A = enumerate_valid(L, M)
    U = _unassigned(L, M)
    finite = np.isfinite(log_c)
    clutter_term = U @ np.where(finite, log_c, 0.0)
    clutter_term[(U & ~finite).any(axis=1)] = -np.inf
    shift = clutter_term.max()
    W = np.zeros((M + 1,) * L)
    if np.isfinite(shift):
        W[tuple(A.T)] = np.exp(clutter_term - shift)
    return W, shift, A, clutter_term


def _enumerated(table: np.ndarray, A: np.ndarray, clutter_term: np.ndarray) -> np.ndarray:
    L = table.shape[1]
    scores = clutter_term + table[:, 0, A[:, 0]]
    for l in range(1, L):
        scores = scores + table[:, l, A[:, l]]
    return logsumexp(scores, axis=1)


def log_scan_likelihood(
    tdoas: np.ndarray,
    feas: np.ndarray,
    measurements,
    detection: DetectionModel,
    clutter: ClutterModel,
    noise: NoiseModel,
) -> np.ndarray:
    """Per-particle log-likelihood of a scan, up to a particle-independent constant.

    ``tdoas`` and ``feas`` have shape ``(J, L)``.  Unassigned measurements are
    charged their clutter intensity rather than dividing it out, so the result
    differs from ``log(association_sum)`` only by ``sum_m log(mu_FA f_FA(z_m))``
    and stays defined when ``mean_count`` is 0 (every measurement must then be
    claimed by a pair).

    The sum over valid vectors is a contraction of the per-pair factor tables
    (each scaled to a row maximum of 1) with a fixed validity tensor, so no
    term is ever subtracted.  Particles whose scaled sum underflows are redone
    by log-domain enumeration.
    """
    z = np.asarray(measurements, dtype=float)
    J, L = tdoas.shape
    M = len(z)
    miss, det = _log_terms(tdoas, feas, z, detection, noise)
    if M == 0:
        return miss.sum(axis=1)

    W, shift, A, clutter_term = _validity_tensor(L, M, clutter.log_intensity(z))
    if not np.isfinite(shift):
        return np.full(J, -np.inf)

    # column 0 of each pair's table is the missed branch
    table = np.concatenate([miss[:, :, None], det], axis=2)
    top = table.max(axis=2)
    dead = ~np.isfinite(top).all(axis=1)
    top[dead] = 0.0
    with np.errstate(invalid="ignore"):
        R = np.exp(table - top[:, :, None])
    R[dead] = 0.0

    K = M + 1
    acc = R[:, L - 1] @ W.reshape(-1, K).T
    for l in range(L - 2, -1, -1):
        acc = np.einsum("jak,jk->ja", acc.reshape(J, -1, K), R[:, l])
    total = acc[:, 0]

    with np.errstate(divide="ignore"):
        out = np.log(total) + top.sum(axis=1) + shift
    out[dead] = -np.inf
    redo = np.nonzero((total < 1e-250) & ~dead)[0]
    if len(redo):
        out[redo] = _enumerated(table[redo], A, clutter_term)
    return out
