"""Synthetic scenarios: trajectories, TDOA scans and multipath waveforms."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .assoc import ClutterModel, DetectionModel, NoiseModel, TdoaScan
from .cepstrum import WaveformSegment
from .filter import MotionModel, fold_range, make_rng
from .geometry import (
    Environment,
    PathKind,
    ReceiverState,
    SourceState,
    feasible_mask,
    path_lengths,
    predict_tdoas,
)


def receiver_sweep(n_scans: int, shallow: float = 5.0, deep: float = 40.0, cycles: float = 1.0):
    """Receiver depths oscillating between ``shallow`` and ``deep``, starting shallow."""
    phase = 2.0 * np.pi * cycles * np.arange(n_scans) / max(n_scans - 1, 1)
    mid, amp = (shallow + deep) / 2, (deep - shallow) / 2
    return tuple(float(h) for h in mid - amp * np.cos(phase))


@dataclass(frozen=True)
class Scenario:
    env: Environment
    receiver_depths: tuple[float, ...]
    motion: MotionModel
    initial_state: SourceState
    n_scans: int
    detection: DetectionModel = DetectionModel()
    clutter: ClutterModel = ClutterModel()
    noise: NoiseModel = NoiseModel()
    seed: int = 0
    max_range: float = 5000.0

    def __post_init__(self):
        object.__setattr__(self, "receiver_depths", tuple(float(h) for h in self.receiver_depths))
        if self.n_scans < 1:
            raise ValueError(f"n_scans must be >= 1, got {self.n_scans}")
        if len(self.receiver_depths) != self.n_scans:
            raise ValueError(
                f"{len(self.receiver_depths)} receiver depths for {self.n_scans} scans"
            )
        for n, h in enumerate(self.receiver_depths, 1):
            ReceiverState(h).check(self.env)

    @property
    def receivers(self) -> list[ReceiverState]:
        return [ReceiverState(h) for h in self.receiver_depths]

    @property
    def timestamps(self) -> np.ndarray:
        return np.arange(self.n_scans) * self.motion.scan_time

    def streams(self):
        """Independent generators for truth, scans and waveform."""
        return [make_rng(s) for s in np.random.SeedSequence(self.seed).spawn(3)]


@dataclass(frozen=True)
class GroundTruth:
    states: tuple[SourceState, ...]
    predicted_tdoas: np.ndarray
    feasible: np.ndarray = field(repr=False)

    def as_array(self) -> np.ndarray:
        return np.array([s.as_array() for s in self.states])


def truth_from_states(states, sc: Scenario) -> GroundTruth:
    X = np.array([s.as_array() for s in states])
    h = np.array(sc.receiver_depths)
    g = np.array([predict_tdoas(x[0], x[1], hn, sc.env) for x, hn in zip(X, h)])
    feas = np.array([feasible_mask(x[1], hn, sc.env) for x, hn in zip(X, h)])
    return GroundTruth(tuple(states), g, feas)


def simulate_truth(sc: Scenario, rng: np.random.Generator | None = None) -> GroundTruth:
    """Sample a trajectory from the motion model, starting at ``initial_state``.

    Range folds at the receiver exactly as in the filter's prediction, so a
    source driven through range 0 passes the receiver and recedes.
    """
    rng = rng if rng is not None else sc.streams()[0]
    x = sc.initial_state.as_array()
    noisy = sc.motion.accel_noise_var > 0 or sc.motion.depth_noise_var > 0
    X = np.empty((sc.n_scans, 3))
    for n in range(sc.n_scans):
        if n:
            x = fold_range(sc.motion.propagate(x[None, :], rng if noisy else None))[0]
        if not (0.0 <= x[0] <= sc.max_range and 0.0 <= x[1] <= sc.env.seafloor_depth):
            raise ValueError(
                f"scan {n + 1}: source at range {x[0]:.1f} m, depth {x[1]:.1f} m "
                f"left the surveillance area"
            )
        X[n] = x
    return truth_from_states([SourceState.from_array(x) for x in X], sc)


def simulate_scans(
    gt: GroundTruth,
    sc: Scenario,
    rng: np.random.Generator | None = None,
    return_origins: bool = False,
):
    """Draw detections, noisy TDOAs and clutter for every scan.

    With ``return_origins`` a second list gives, per scan, the origin of each
    measurement in scan order: the 1-based pair index or 0 for clutter.
    """
    rng = rng if rng is not None else sc.streams()[1]
    sigma = np.asarray(sc.noise.sigma)
    scans, origins = [], []
    for n, t in enumerate(sc.timestamps):
        d = sc.detection.probabilities(gt.feasible[n])
        hit = rng.uniform(size=len(d)) < d
        noise = rng.standard_normal(len(d)) * sigma
        true_z = np.abs(gt.predicted_tdoas[n] + noise)[hit]
        n_fa = rng.poisson(sc.clutter.mean_count)
        fa = rng.uniform(0.0, sc.clutter.max_tdoa, size=n_fa)
        z = np.concatenate([true_z, fa])
        src = np.concatenate([np.nonzero(hit)[0] + 1, np.zeros(n_fa, dtype=int)])
        perm = rng.permutation(len(z))
        scans.append(TdoaScan(n + 1, float(t), tuple(z[perm])))
        origins.append(src[perm])
    return (scans, origins) if return_origins else scans


def bandlimited_noise(n: int, sample_rate: float, band, rng) -> np.ndarray:
    """Unit-variance Gaussian noise with a flat spectrum inside ``band``."""
    lo, hi = band
    if not 0 <= lo < hi <= sample_rate / 2:
        raise ValueError(f"band {band} not within (0, Nyquist={sample_rate / 2}]")
    spec = np.fft.rfft(rng.standard_normal(n))
    f = np.fft.rfftfreq(n, 1.0 / sample_rate)
    spec[(f < lo) | (f > hi)] = 0.0
    x = np.fft.irfft(spec, n)
    return x / x.std()


def render_multipath(
    source: np.ndarray,
    lead: int,
    block_len: int,
    taps,
    sample_rate: float,
) -> np.ndarray:
    """Pass ``source`` through a delay line whose taps change every block.

    ``taps`` is a sequence with one ``(delays_s, amplitudes)`` entry per block.
    Output sample ``i`` corresponds to ``source[lead + i]``; delays are
    fractional and applied in the frequency domain.
    """
    out = np.empty(len(taps) * block_len)
    for b, (delays, amps) in enumerate(taps):
        start = lead + b * block_len
        seg = source[start - lead: start + block_len]
        nfft = 1 << (len(seg) - 1).bit_length()
        f = np.fft.rfftfreq(nfft, 1.0 / sample_rate)
        H = np.zeros(len(f), dtype=complex)
        for tau, a in zip(delays, amps):
            H += a * np.exp(-2j * np.pi * f * tau)
        y = np.fft.irfft(np.fft.rfft(seg, nfft) * H, nfft)
        out[b * block_len:(b + 1) * block_len] = y[lead: lead + block_len]
    return out


def _add_noise(y: np.ndarray, snr_db: float, rng) -> np.ndarray:
    noise_std = math.sqrt(np.mean(y**2) / 10 ** (snr_db / 10))
    return y + noise_std * rng.standard_normal(len(y))


def multipath_waveform(
    delays,
    amplitudes,
    duration: float,
    sample_rate: float,
    band=(100.0, 2000.0),
    snr_db: float = 10.0,
    rng: np.random.Generator | None = None,
) -> WaveformSegment:
    """Static multipath: ``sum_k a_k s(t - tau_k)`` plus white noise at ``snr_db``."""
    rng = rng if rng is not None else make_rng(0)
    n = int(round(duration * sample_rate))
    lead = int(math.ceil(max(delays) * sample_rate)) + 256
    src = bandlimited_noise(n + lead, sample_rate, band, rng)
    y = render_multipath(src, lead, n, [(delays, amplitudes)], sample_rate)
    return WaveformSegment(_add_noise(y, snr_db, rng), sample_rate, 0.0)


def synthesize_waveform(
    gt: GroundTruth,
    sc: Scenario,
    sample_rate: float = 5000.0,
    band=(100.0, 2000.0),
    snr_db: float = 10.0,
    paths=tuple(PathKind),
    rng: np.random.Generator | None = None,
) -> WaveformSegment:
    """Received signal for the trajectory: one delay-line update per scan.

    Each selected path contributes the band-limited source delayed by its TOA
    (relative to the earliest selected path) with amplitude proportional to
    ``1 / q_k``.
    """
    rng = rng if rng is not None else sc.streams()[2]
    paths = [PathKind(p) for p in paths]
    block_len = int(round(sc.motion.scan_time * sample_rate))
    taps = []
    for x, h in zip(gt.states, sc.receiver_depths):
        q = path_lengths(x.range, x.depth, h, sc.env)[[int(p) for p in paths]]
        toa = q / sc.env.sound_speed
        taps.append((toa - toa.min(), q.min() / q))
    max_delay = max(float(d.max()) for d, _ in taps)
    lead = int(math.ceil(max_delay * sample_rate)) + 256
    src = bandlimited_noise(sc.n_scans * block_len + lead, sample_rate, band, rng)
    y = render_multipath(src, lead, block_len, taps, sample_rate)
    return WaveformSegment(_add_noise(y, snr_db, rng), sample_rate, 0.0)
