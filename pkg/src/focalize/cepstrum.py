"""Cepstral TDOA extraction from a single-hydrophone waveform.

Pipeline: magnitude STFT -> real cepstrum per window (cepstrogram) -> SVD
split into a low-rank source term and a residual propagation term ->
median-filter background -> local maxima above background -> DBSCAN to drop
isolated peaks -> per-scan TDOA lists.

Matrices are laid out ``(quefrency_or_frequency, window)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import ndimage, signal
from sklearn.cluster import DBSCAN

from .assoc import TdoaScan


@dataclass(frozen=True)
class WaveformSegment:
    samples: np.ndarray
    sample_rate: float
    start_time: float = 0.0

    def __post_init__(self):
        if not self.sample_rate > 0:
            raise ValueError(f"sample_rate must be > 0, got {self.sample_rate}")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("waveform contains non-finite samples")

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate

    @classmethod
    def from_file(cls, path, sample_rate: float, start_time: float = 0.0):
        """Read raw little-endian float32 mono samples."""
        samples = np.fromfile(path, dtype="<f4").astype(float)
        return cls(samples, sample_rate, start_time)

    def to_file(self, path) -> None:
        np.asarray(self.samples, dtype="<f4").tofile(path)


@dataclass(frozen=True)
class Spectrogram:
    values: np.ndarray
    freq_axis: np.ndarray
    time_axis: np.ndarray
    window_len: int
    hop: int
    sample_rate: float


@dataclass(frozen=True)
class Cepstrogram:
    values: np.ndarray
    quefrency_axis: np.ndarray
    time_axis: np.ndarray

    def with_values(self, values: np.ndarray) -> "Cepstrogram":
        return replace(self, values=values)

    @property
    def resolution(self) -> float:
        return float(self.quefrency_axis[1] - self.quefrency_axis[0])


@dataclass(frozen=True)
class PeakList:
    times: np.ndarray
    quefrencies: np.ndarray
    amplitudes: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self):
        for name in ("times", "quefrencies", "amplitudes"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        labels = self.labels
        if labels is None:
            labels = np.zeros(len(self.times), dtype=int)
        object.__setattr__(self, "labels", np.asarray(labels, dtype=int))

    def __len__(self) -> int:
        return len(self.times)

    def retained(self) -> "PeakList":
        keep = self.labels >= 0
        return PeakList(
            self.times[keep], self.quefrencies[keep], self.amplitudes[keep], self.labels[keep]
        )


def spectrogram(
    w: WaveformSegment, window_len: int, hop: int, window_fn: str = "hann"
) -> Spectrogram:
    """Magnitude STFT; time axis holds window centres."""
    x = np.asarray(w.samples, dtype=float)
    if window_len < 2 or window_len > len(x):
        raise ValueError(
            f"window of {window_len} samples does not fit a {len(x)}-sample segment"
        )
    if hop < 1:
        raise ValueError(f"hop must be >= 1, got {hop}")
    taper = signal.get_window(window_fn, window_len, fftbins=True)
    frames = sliding_window_view(x, window_len)[::hop]
    values = np.abs(np.fft.rfft(frames * taper, axis=1)).T
    fs = w.sample_rate
    starts = np.arange(frames.shape[0]) * hop
    return Spectrogram(
        values=values,
        freq_axis=np.fft.rfftfreq(window_len, 1.0 / fs),
        time_axis=w.start_time + (starts + window_len / 2) / fs,
        window_len=window_len,
        hop=hop,
        sample_rate=fs,
    )


def cepstrogram(
    s: Spectrogram, floor: float = 1e-12, max_quefrency: float | None = None
) -> Cepstrogram:
    """Real cepstrum of every window: inverse FFT of the log power spectrum.

    Power is clamped at ``floor`` times each window's maximum before the log.
    Only non-negative quefrencies up to half the window are kept, optionally
    truncated at ``max_quefrency``.  The bin width is ``1 / sample_rate``.
    """
    power = s.values**2
    peak = power.max(axis=0, keepdims=True)
    peak[peak == 0] = 1.0
    logp = np.log(np.maximum(power, floor * peak))
    ceps = np.fft.irfft(logp, n=s.window_len, axis=0)[: s.window_len // 2 + 1]
    q = np.arange(ceps.shape[0]) / s.sample_rate
    if max_quefrency is not None:
        keep = q <= max_quefrency
        ceps, q = ceps[keep], q[keep]
    return Cepstrogram(ceps, q, s.time_axis.copy())


def svd_filter(c: Cepstrogram, keep_source_rank: int) -> tuple[Cepstrogram, Cepstrogram]:
    """Split into the rank-``k`` source term and the residual propagation term."""
    X = c.values
    k = int(keep_source_rank)
    if not 1 <= k < min(X.shape):
        raise ValueError(f"source rank must lie in [1, {min(X.shape) - 1}], got {k}")
    U, S, Vt = np.linalg.svd(X, full_matrices=False)
    source = (U[:, :k] * S[:k]) @ Vt[:k]
    return c.with_values(source), c.with_values(X - source)


def _sorted_windows(A: np.ndarray, kq: int, kt: int):
    pq, pt = kq // 2, kt // 2
    padded = np.pad(A, ((pq, pq), (pt, pt)), constant_values=np.inf)
    win = sliding_window_view(padded, (kq, kt)).reshape(A.shape + (kq * kt,))
    return np.sort(win, axis=-1)


def estimate_background(
    c: Cepstrogram, kernel: tuple[int, int] = (5, 25), chunk: int = 64
) -> Cepstrogram:
    """2-D running median of ``|C|``; ``kernel`` is ``(time_bins, quefrency_bins)``.

    Cells near the border take the median over the part of the kernel that
    lies inside the matrix.
    """
    kt, kq = kernel
    if kt < 1 or kq < 1 or kt % 2 == 0 or kq % 2 == 0:
        raise ValueError(f"kernel dimensions must be odd and positive, got {kernel}")
    A = np.abs(c.values)
    counts = ndimage.uniform_filter(
        np.ones(A.shape), size=(kq, kt), mode="constant", cval=0.0
    ) * (kq * kt)
    n = np.rint(counts).astype(int)
    lo, hi = (n - 1) // 2, n // 2
    out = np.empty_like(A)
    pt = kt // 2
    for start in range(0, A.shape[1], chunk):
        stop = min(start + chunk, A.shape[1])
        a0, a1 = max(0, start - pt), min(A.shape[1], stop + pt)
        block = A[:, a0:a1]
        srt = _sorted_windows(block, kq, kt)[:, start - a0: start - a0 + (stop - start)]
        l_ = lo[:, start:stop, None]
        h_ = hi[:, start:stop, None]
        out[:, start:stop] = 0.5 * (
            np.take_along_axis(srt, l_, -1)[..., 0] + np.take_along_axis(srt, h_, -1)[..., 0]
        )
    return c.with_values(out)


def extract_peaks(
    c: Cepstrogram,
    background: Cepstrogram,
    gain: float = 3.0,
    guard: float = 0.002,
    max_quefrency: float | None = None,
    neighborhood: tuple[int, int] = (1, 3),
) -> PeakList:
    """Strict local maxima of ``|C|`` exceeding ``gain * background``.

    ``neighborhood`` is ``(time_bins, quefrency_bins)``; a cell is a maximum
    when it is larger than every other cell of the neighbourhood.  Quefrencies
    below ``guard`` or at or above ``max_quefrency`` are ignored.
    """
    if gain < 1:
        raise ValueError(f"gain must be >= 1, got {gain}")
    A = np.abs(c.values)
    nt, nq = neighborhood
    footprint = np.ones((nq, nt), dtype=bool)
    footprint[nq // 2, nt // 2] = False
    neighbours = ndimage.maximum_filter(
        A, footprint=footprint, mode="constant", cval=-np.inf
    )
    q = c.quefrency_axis[:, None]
    mask = (A > neighbours) & (A > gain * background.values) & (q >= guard)
    if max_quefrency is not None:
        # half-open, like the clutter support
        mask &= q < max_quefrency
    iq, it = np.nonzero(mask)
    order = np.lexsort((iq, it))
    iq, it = iq[order], it[order]
    return PeakList(c.time_axis[it], c.quefrency_axis[iq], c.values[iq, it])


def cluster_peaks(
    p: PeakList, eps_time: float, eps_quefrency: float, min_pts: int
) -> PeakList:
    """DBSCAN on ``(time / eps_time, quefrency / eps_quefrency)``; noise gets ``-1``."""
    if eps_time <= 0 or eps_quefrency <= 0 or min_pts < 1:
        raise ValueError("need eps_time > 0, eps_quefrency > 0 and min_pts >= 1")
    if len(p) == 0:
        return replace(p, labels=np.zeros(0, dtype=int))
    X = np.column_stack([p.times / eps_time, p.quefrencies / eps_quefrency])
    labels = DBSCAN(eps=1.0, min_samples=min_pts).fit_predict(X)
    return replace(p, labels=labels)


def scans_from_peaks(
    p: PeakList,
    scan_time: float,
    t0: float = 0.0,
    n_scans: int | None = None,
    merge: str = "cluster",
    merge_gap: float = 4e-4,
) -> list[TdoaScan]:
    """Bin retained peaks into scans of length ``scan_time`` starting at ``t0``.

    Each window of a scan sees the same echo again, so by default
    (``merge="cluster"``) the peaks of one cluster inside a scan are split
    wherever consecutive quefrencies differ by more than ``merge_gap`` and only
    the strongest peak of each group is kept.  ``merge="none"`` keeps every
    retained peak.
    """
    if scan_time <= 0:
        raise ValueError(f"scan_time must be > 0, got {scan_time}")
    if merge not in ("cluster", "none"):
        raise ValueError(f"unknown merge mode {merge!r}")
    kept = p.retained()
    idx = np.floor((kept.times - t0) / scan_time).astype(int)
    if n_scans is None:
        n_scans = int(idx.max()) + 1 if len(idx) else 0
    scans = []
    for n in range(n_scans):
        sel = np.nonzero(idx == n)[0]
        if merge == "cluster" and len(sel):
            sel = _strongest_per_group(kept, sel, merge_gap)
        z = np.sort(kept.quefrencies[sel]) if len(sel) else ()
        scans.append(TdoaScan(n + 1, t0 + n * scan_time, tuple(z)))
    return scans


def _strongest_per_group(p: PeakList, sel: np.ndarray, gap: float) -> np.ndarray:
    keep = []
    for lab in np.unique(p.labels[sel]):
        members = sel[p.labels[sel] == lab]
        members = members[np.argsort(p.quefrencies[members], kind="stable")]
        breaks = np.nonzero(np.diff(p.quefrencies[members]) > gap)[0] + 1
        for group in np.split(members, breaks):
            keep.append(group[np.argmax(np.abs(p.amplitudes[group]))])
    return np.array(sorted(keep))


@dataclass(frozen=True)
class CepstrumParams:
    window: float = 1.0
    overlap: float = 0.5
    window_fn: str = "hann"
    floor: float = 1e-12
    max_quefrency: float = 0.1
    guard: float = 0.002
    svd_rank: int = 3
    kernel_time: int = 5
    kernel_quefrency: int = 25
    gain: float = 3.0
    eps_time: float = 1.5
    eps_quefrency: float = 4e-4
    min_pts: int = 3
    merge: str = "cluster"

    def __post_init__(self):
        if not self.window > 0:
            raise ValueError(f"window must be > 0 s, got {self.window}")
        if not 0 <= self.overlap < 1:
            raise ValueError(f"overlap must lie in [0, 1), got {self.overlap}")
        if self.svd_rank < 0:
            raise ValueError(f"svd_rank must be >= 0, got {self.svd_rank}")


@dataclass
class Extraction:
    cepstrogram: Cepstrogram
    propagation: Cepstrogram
    background: Cepstrogram
    peaks: PeakList
    scans: list[TdoaScan] = field(default_factory=list)


def extract(
    w: WaveformSegment,
    params: CepstrumParams = CepstrumParams(),
    scan_time: float = 3.0,
    n_scans: int | None = None,
) -> Extraction:
    """Run the full front end; ``svd_rank=0`` skips the source/propagation split."""
    fs = w.sample_rate
    window_len = int(round(params.window * fs))
    hop = max(1, int(round(window_len * (1.0 - params.overlap))))
    spec = spectrogram(w, window_len, hop, params.window_fn)
    ceps = cepstrogram(spec, params.floor, params.max_quefrency)
    prop = ceps if params.svd_rank == 0 else svd_filter(ceps, params.svd_rank)[1]
    bg = estimate_background(prop, (params.kernel_time, params.kernel_quefrency))
    peaks = extract_peaks(prop, bg, params.gain, params.guard, params.max_quefrency)
    peaks = cluster_peaks(peaks, params.eps_time, params.eps_quefrency, params.min_pts)
    scans = scans_from_peaks(
        peaks, scan_time, w.start_time, n_scans, params.merge, params.eps_quefrency
    )
    return Extraction(ceps, prop, bg, peaks, scans)
