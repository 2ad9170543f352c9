"""Particle-based sequential Bayesian estimation of the source state.

State columns are ``[range, depth, range_speed]``.  Each scan runs
predict -> update -> resample -> estimate.  Weights are kept normalised; the
update works on log-weights with a max shift so tiny likelihoods do not
underflow before normalisation.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .assoc import (
    ClutterModel,
    DetectionModel,
    NoiseModel,
    TdoaScan,
    gate,
    log_scan_likelihood,
)
from .geometry import Environment, ReceiverState, SourceState, feasible_mask, predict_tdoas

log = logging.getLogger(__name__)

RANGE, DEPTH, SPEED = 0, 1, 2


class FilterDivergence(RuntimeError):
    def __init__(self, time_index: int):
        super().__init__(f"all particle weights vanished at scan {time_index}")
        self.time_index = time_index


def make_rng(seed) -> np.random.Generator:
    """Counter-based generator (Philox) from an int or ``SeedSequence``."""
    if not isinstance(seed, np.random.SeedSequence):
        seed = np.random.SeedSequence(seed)
    return np.random.Generator(np.random.Philox(seed))


@dataclass(frozen=True)
class MotionModel:
    scan_time: float = 3.0
    accel_noise_var: float = 0.05
    depth_noise_var: float = 0.0

    def __post_init__(self):
        if not self.scan_time > 0:
            raise ValueError(f"scan_time must be > 0, got {self.scan_time}")
        if self.accel_noise_var < 0 or self.depth_noise_var < 0:
            raise ValueError("motion noise variances must be >= 0")

    @property
    def F(self) -> np.ndarray:
        T = self.scan_time
        return np.array([[1.0, 0.0, T], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])

    @property
    def G(self) -> np.ndarray:
        T = self.scan_time
        return np.array([[T * T / 2, 0.0], [0.0, T], [T, 0.0]])

    def propagate(self, states: np.ndarray, rng: np.random.Generator | None) -> np.ndarray:
        """Apply ``x <- F x + G u`` row-wise; ``rng=None`` means noiseless."""
        out = states @ self.F.T
        if rng is not None:
            std = np.sqrt([self.accel_noise_var, self.depth_noise_var])
            u = rng.standard_normal((len(states), 2)) * std
            out += u @ self.G.T
        return out


@dataclass(frozen=True)
class Prior:
    range_interval: tuple[float, float] = (0.0, 5000.0)
    depth_interval: tuple[float, float] = (0.0, 0.0)
    speed_std: float = 5.0

    def __post_init__(self):
        for name in ("range_interval", "depth_interval"):
            lo, hi = getattr(self, name)
            if not (np.isfinite(lo) and np.isfinite(hi) and 0 <= lo <= hi):
                raise ValueError(f"prior {name} must satisfy 0 <= lo <= hi, got {(lo, hi)}")
        if self.speed_std < 0:
            raise ValueError(f"prior speed_std must be >= 0, got {self.speed_std}")

    def sample(self, J: int, rng: np.random.Generator) -> np.ndarray:
        x = np.empty((J, 3))
        x[:, RANGE] = rng.uniform(*self.range_interval, size=J)
        lo, hi = self.depth_interval
        x[:, DEPTH] = lo if lo == hi else rng.uniform(lo, hi, size=J)
        x[:, SPEED] = rng.normal(0.0, self.speed_std, size=J)
        return x


@dataclass(frozen=True)
class Particle:
    state: SourceState
    weight: float


@dataclass
class ParticleSet:
    states: np.ndarray
    weights: np.ndarray
    time_index: int = 0
    ess: float = field(default=float("nan"))

    def __len__(self) -> int:
        return len(self.weights)

    def __getitem__(self, j: int) -> Particle:
        return Particle(SourceState.from_array(self.states[j]), float(self.weights[j]))

    def effective_size(self) -> float:
        return float(1.0 / np.sum(self.weights**2))


def init(prior: Prior, J: int, rng_seed) -> ParticleSet:
    if J < 1:
        raise ValueError(f"need at least one particle, got J={J}")
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else make_rng(rng_seed)
    return ParticleSet(prior.sample(J, rng), np.full(J, 1.0 / J), 0, float(J))


def fold_range(states: np.ndarray) -> np.ndarray:
    # the source passes the receiver: range folds back and range-rate flips sign
    neg = states[:, RANGE] < 0
    states[neg, RANGE] *= -1.0
    states[neg, SPEED] *= -1.0
    states[:, DEPTH] = np.abs(states[:, DEPTH])
    return states


def predict(ps: ParticleSet, motion: MotionModel, rng: np.random.Generator | None) -> ParticleSet:
    states = fold_range(motion.propagate(ps.states, rng))
    return ParticleSet(states, ps.weights.copy(), ps.time_index, ps.ess)


def scan_log_likelihood(
    states: np.ndarray,
    scan: TdoaScan,
    receiver: ReceiverState,
    env: Environment,
    detection: DetectionModel,
    clutter: ClutterModel,
    noise: NoiseModel,
    max_measurements: int = 20,
) -> np.ndarray:
    tdoas = predict_tdoas(states[:, RANGE], states[:, DEPTH], receiver.depth, env)
    feas = feasible_mask(states[:, DEPTH], receiver.depth, env)
    z = gate(scan.values(), tdoas, max_measurements)
    if len(z) < scan.count:
        log.debug("scan %d: gated %d -> %d measurements", scan.time_index, scan.count, len(z))
    return log_scan_likelihood(tdoas, feas, z, detection, clutter, noise)


def update(
    ps: ParticleSet,
    scan: TdoaScan,
    receiver: ReceiverState,
    env: Environment,
    detection: DetectionModel,
    clutter: ClutterModel,
    noise: NoiseModel,
    max_measurements: int = 20,
) -> ParticleSet:
    """Reweight by the association-marginalised scan likelihood and renormalise."""
    ll = scan_log_likelihood(
        ps.states, scan, receiver, env, detection, clutter, noise, max_measurements
    )
    with np.errstate(divide="ignore"):
        logw = np.log(ps.weights) + ll
    top = np.max(logw)
    if not np.isfinite(top):
        raise FilterDivergence(scan.time_index)
    w = np.exp(logw - top)
    w /= w.sum()
    out = ParticleSet(ps.states, w, scan.time_index)
    out.ess = out.effective_size()
    return out


def systematic_indices(weights: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    J = len(weights)
    positions = (rng.uniform() + np.arange(J)) / J
    cdf = np.cumsum(weights)
    cdf[-1] = 1.0
    return np.searchsorted(cdf, positions, side="right")


def resample(
    ps: ParticleSet,
    threshold: float,
    rng: np.random.Generator,
    jitter: float = 0.1,
    speed_jitter: float = 0.0,
) -> ParticleSet:
    """Systematic resampling when ESS drops below ``threshold * J``.

    Resampled ranges get Gaussian jitter of std ``jitter`` metres and range
    speeds of std ``speed_jitter`` m/s (roughening against sample
    impoverishment).
    """
    J = len(ps)
    ess = ps.effective_size()
    if ess >= threshold * J:
        return ps
    states = ps.states[systematic_indices(ps.weights, rng)]
    if jitter > 0:
        states[:, RANGE] = np.abs(states[:, RANGE] + rng.normal(0.0, jitter, size=J))
    if speed_jitter > 0:
        states[:, SPEED] += rng.normal(0.0, speed_jitter, size=J)
    return ParticleSet(states, np.full(J, 1.0 / J), ps.time_index, ps.ess)


def mmse_estimate(ps: ParticleSet) -> SourceState:
    return SourceState.from_array(ps.weights @ ps.states)


@dataclass(frozen=True)
class FilterConfig:
    particles: int = 10_000
    ess_threshold: float = 0.5
    jitter: float = 0.1
    max_measurements: int = 20
    speed_jitter: float = 1.0

    def __post_init__(self):
        if self.particles < 1:
            raise ValueError(f"particles must be >= 1, got {self.particles}")
        if not 0.0 <= self.ess_threshold <= 1.0:
            raise ValueError(f"ess_threshold must lie in [0, 1], got {self.ess_threshold}")
        if self.jitter < 0 or self.speed_jitter < 0:
            raise ValueError("jitter and speed_jitter must be >= 0")
        if self.max_measurements < 1:
            raise ValueError(f"max_measurements must be >= 1, got {self.max_measurements}")


@dataclass(frozen=True)
class Models:
    """Everything the filter needs besides the data."""

    env: Environment = Environment()
    motion: MotionModel = MotionModel()
    prior: Prior = Prior()
    detection: DetectionModel = DetectionModel()
    clutter: ClutterModel = ClutterModel()
    noise: NoiseModel = NoiseModel()


def step(
    ps: ParticleSet,
    scan: TdoaScan,
    receiver: ReceiverState,
    models: Models,
    config: FilterConfig,
    predict_rng: np.random.Generator | None,
    resample_rng: np.random.Generator,
) -> tuple[ParticleSet, SourceState]:
    ps = predict(ps, models.motion, predict_rng)
    ps = update(
        ps, scan, receiver, models.env, models.detection, models.clutter,
        models.noise, config.max_measurements,
    )
    ps = resample(ps, config.ess_threshold, resample_rng, config.jitter, config.speed_jitter)
    return ps, mmse_estimate(ps)


@dataclass
class StepRecord:
    time_index: int
    timestamp: float
    estimate: SourceState
    ess: float
    n_measurements: int
    diverged: bool = False


class ParticleFilter:
    """Runs the per-scan recursion with reproducible substreams.

    Three independent Philox streams (prior draws, prediction noise,
    resampling) are derived from one seed, so changing how one stage consumes
    randomness never perturbs the others.  A scan on which every weight
    vanishes reinitialises the particles from the prior and is recorded as a
    divergence instead of aborting the run.
    """

    def __init__(self, models: Models, config: FilterConfig = FilterConfig(), seed=0):
        self.models = models
        self.config = config
        ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
        init_ss, predict_ss, resample_ss = ss.spawn(3)
        self._init_rng = make_rng(init_ss)
        self._predict_rng = make_rng(predict_ss)
        self._resample_rng = make_rng(resample_ss)
        self.particles = init(models.prior, config.particles, self._init_rng)
        self.divergences: list[int] = []

    def step(self, scan: TdoaScan, receiver: ReceiverState) -> StepRecord:
        m = self.models
        diverged = False
        try:
            self.particles, est = step(
                self.particles, scan, receiver, m, self.config,
                self._predict_rng, self._resample_rng,
            )
        except FilterDivergence as exc:
            log.warning("%s; reinitialising from the prior", exc)
            self.divergences.append(exc.time_index)
            self.particles = init(m.prior, self.config.particles, self._init_rng)
            self.particles.time_index = scan.time_index
            est = mmse_estimate(self.particles)
            diverged = True
        return StepRecord(
            scan.time_index, scan.timestamp, est, self.particles.ess, scan.count, diverged
        )

    def run(self, scans, receivers) -> list[StepRecord]:
        if len(scans) != len(receivers):
            raise ValueError(f"{len(scans)} scans but {len(receivers)} receiver states")
        return [self.step(s, r) for s, r in zip(scans, receivers)]
