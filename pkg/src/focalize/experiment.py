"""Monte Carlo harness: repeated filter runs, per-scan metrics and plot data."""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .assoc import ClutterModel, TdoaScan, estimate_clutter_rate
from .cepstrum import WaveformSegment, extract
from .config import RunConfig
from .datafiles import (
    DataError,
    ingest_scans,
    read_receiver,
    read_rows,
    read_truth,
    write_csv,
)
from .filter import ParticleFilter
from .geometry import PAIRS, ReceiverState, predict_tdoas
from .sim import simulate_scans, simulate_truth, synthesize_waveform

log = logging.getLogger(__name__)

METRICS_COLUMNS = (
    "scan_index", "timestamp_s", "mean_range_m", "mean_true_range_m",
    "rmse_range_m", "mean_ess", "mean_measurements", "divergences",
)
TRIALS_COLUMNS = ("trial", "reinitialisations", "mean_abs_error_m", "diverged")
ESTIMATE_COLUMNS = (
    "scan_index", "timestamp_s", "range_m", "depth_m", "speed_mps",
    "ess", "n_measurements", "reinitialised", "true_range_m",
)
TDOA_PLOT_COLUMNS = ("scan_index", "timestamp_s", "series", "tdoa_s")
RANGE_PLOT_COLUMNS = ("scan_index", "timestamp_s", "mean_range_m", "true_range_m", "rmse_range_m")


@dataclass
class Dataset:
    """One realisation of the input of a filter run."""

    scans: list[TdoaScan]
    receivers: list[ReceiverState]
    truth: np.ndarray | None = None  # (n_scans, 3) or None
    waveform: WaveformSegment | None = None


@dataclass
class TrialResult:
    trial: int
    estimates: np.ndarray  # (n_scans, 3)
    ess: np.ndarray
    counts: np.ndarray
    reinitialised: np.ndarray  # bool per scan
    dataset: Dataset


@dataclass
class RunMetrics:
    scan_index: np.ndarray
    timestamp: np.ndarray
    mean_range: np.ndarray
    mean_true_range: np.ndarray
    rmse_range: np.ndarray
    mean_ess: np.ndarray
    mean_measurements: np.ndarray
    divergences: np.ndarray
    trial_reinit: np.ndarray
    trial_mae: np.ndarray
    trial_diverged: np.ndarray
    burn_in: int

    @property
    def n_trials(self) -> int:
        return len(self.trial_reinit)

    @property
    def window(self) -> slice:
        # scan indices burn_in..n inclusive, 1-based
        return slice(max(self.burn_in - 1, 0), None)

    @property
    def mean_rmse(self) -> float:
        return float(np.mean(self.rmse_range[self.window]))

    @property
    def divergence_fraction(self) -> float:
        return float(np.mean(self.trial_diverged))


def trial_seeds(seed: int, n_trials: int) -> list[np.random.SeedSequence]:
    return np.random.SeedSequence(seed).spawn(n_trials)


def _entropy(ss: np.random.SeedSequence) -> tuple[int, ...]:
    return tuple(int(x) for x in ss.generate_state(4))


def _frontend_scans(w: WaveformSegment, cfg: RunConfig, n_scans: int) -> list[TdoaScan]:
    return extract(w, cfg.cepstrum_params, cfg["motion.scan_time"], n_scans).scans


def load_dataset(cfg: RunConfig) -> Dataset | None:
    """Fixed input from files, or ``None`` when every trial simulates its own."""
    if cfg["data.measurements"] is not None:
        scans, receivers = ingest_scans(cfg["data.measurements"], cfg["data.receiver"])
    elif cfg["data.waveform"] is not None:
        if cfg["data.receiver"] is None:
            raise DataError("tracking from a waveform needs data.receiver")
        idx, ts, receivers = read_receiver(cfg["data.receiver"])
        w = WaveformSegment.from_file(cfg["data.waveform"], cfg["waveform.sample_rate"])
        scans = _frontend_scans(w, cfg, len(idx))
        scans = [TdoaScan(n, t, s.measurements) for n, t, s in zip(idx, ts, scans)]
    else:
        return None
    truth = None
    if cfg["data.truth"] is not None:
        idx, states = read_truth(cfg["data.truth"])
        if idx != [s.time_index for s in scans]:
            raise DataError("truth scan indices do not match the scans", cfg["data.truth"])
        truth = np.array([s.as_array() for s in states])
    for r in receivers:
        try:
            r.check(cfg.env)
        except ValueError as exc:
            raise DataError(str(exc), cfg["data.receiver"]) from None
    return Dataset(scans, receivers, truth)


def simulate_dataset(cfg: RunConfig, seed, waveform: bool = False) -> Dataset:
    """One synthetic realisation; the waveform is kept when asked for or used."""
    sc = cfg.scenario(seed)
    truth_rng, scan_rng, wave_rng = sc.streams()
    gt = simulate_truth(sc, truth_rng)
    w = None
    if waveform or cfg["run.frontend"] == "waveform":
        w = synthesize_waveform(
            gt, sc, cfg["waveform.sample_rate"], cfg.band, cfg["waveform.snr_db"], rng=wave_rng
        )
    if cfg["run.frontend"] == "waveform":
        scans = _frontend_scans(w, cfg, sc.n_scans)
    else:
        scans = simulate_scans(gt, sc, scan_rng)
    return Dataset(scans, sc.receivers, gt.as_array(), w if waveform else None)


def trial_dataset_seed(cfg: RunConfig, trial: int = 0) -> tuple[int, ...]:
    """The simulation seed used by trial ``trial`` of ``run_trials``."""
    ss = trial_seeds(cfg["run.seed"], trial + 1)[trial]
    return _entropy(ss.spawn(2)[0])


def run_trial(cfg: RunConfig, trial: int, ss: np.random.SeedSequence,
              dataset: Dataset | None = None) -> TrialResult:
    data_ss, filter_ss = ss.spawn(2)
    if dataset is None:
        dataset = simulate_dataset(cfg, _entropy(data_ss))
    models = cfg.models
    if cfg["clutter.estimate"]:
        rate = estimate_clutter_rate(dataset.scans, models.detection)
        models = replace(models, clutter=ClutterModel(rate, models.clutter.max_tdoa))
    pf = ParticleFilter(models, cfg.filter_config, filter_ss)
    recs = pf.run(dataset.scans, dataset.receivers)
    return TrialResult(
        trial,
        np.array([r.estimate.as_array() for r in recs]),
        np.array([r.ess for r in recs]),
        np.array([r.n_measurements for r in recs]),
        np.array([r.diverged for r in recs]),
        dataset,
    )


def _run_trial_args(args):
    return run_trial(*args)


def run_trials(cfg: RunConfig, jobs: int | None = None) -> list[TrialResult]:
    jobs = cfg["run.jobs"] if jobs is None else jobs
    fixed = load_dataset(cfg)
    seeds = trial_seeds(cfg["run.seed"], cfg["run.trials"])
    args = [(cfg, i, ss, fixed) for i, ss in enumerate(seeds)]
    if jobs > 1 and len(args) > 1:
        with ProcessPoolExecutor(max_workers=min(jobs, len(args))) as pool:
            results = list(pool.map(_run_trial_args, args))
    else:
        results = [_run_trial_args(a) for a in args]
    return sorted(results, key=lambda r: r.trial)


def compute_metrics(results: list[TrialResult], cfg: RunConfig) -> RunMetrics:
    first = results[0].dataset
    idx = np.array([s.time_index for s in first.scans])
    ts = np.array([s.timestamp for s in first.scans])
    est = np.stack([r.estimates[:, 0] for r in results])
    has_truth = all(r.dataset.truth is not None for r in results)
    burn = cfg["run.burn_in"]
    if has_truth:
        true = np.stack([r.dataset.truth[:, 0] for r in results])
        err = est - true
        rmse = np.sqrt(np.mean(err**2, axis=0))
        mean_true = true.mean(axis=0)
        mae = np.abs(err[:, max(burn - 1, 0):]).mean(axis=1)
    else:
        rmse = mean_true = np.full(len(idx), np.nan)
        mae = np.full(len(results), np.nan)
    reinit = np.stack([r.reinitialised for r in results])
    n_reinit = reinit.sum(axis=1)
    diverged = (n_reinit > 0) | (mae > cfg["run.divergence_error"])
    return RunMetrics(
        scan_index=idx,
        timestamp=ts,
        mean_range=est.mean(axis=0),
        mean_true_range=mean_true,
        rmse_range=rmse,
        mean_ess=np.stack([r.ess for r in results]).mean(axis=0),
        mean_measurements=np.stack([r.counts for r in results]).mean(axis=0),
        divergences=reinit.sum(axis=0),
        trial_reinit=n_reinit,
        trial_mae=mae,
        trial_diverged=diverged,
        burn_in=burn,
    )


def write_metrics(m: RunMetrics, outdir) -> None:
    outdir = Path(outdir)
    write_csv(outdir / "metrics.csv", METRICS_COLUMNS, zip(
        m.scan_index.tolist(), m.timestamp.tolist(), m.mean_range.tolist(),
        m.mean_true_range.tolist(), m.rmse_range.tolist(), m.mean_ess.tolist(),
        m.mean_measurements.tolist(), m.divergences.tolist(),
    ))
    write_csv(outdir / "trials.csv", TRIALS_COLUMNS, zip(
        range(m.n_trials), m.trial_reinit.tolist(), m.trial_mae.tolist(),
        m.trial_diverged.astype(int).tolist(),
    ))


def write_estimates(results: list[TrialResult], outdir) -> None:
    outdir = Path(outdir) / "trials"
    for r in results:
        scans = r.dataset.scans
        true = r.dataset.truth[:, 0] if r.dataset.truth is not None else np.full(len(scans), np.nan)
        rows = (
            (s.time_index, s.timestamp, *map(float, e), float(ess), int(c), int(d), float(t))
            for s, e, ess, c, d, t in zip(
                scans, r.estimates, r.ess, r.counts, r.reinitialised, true
            )
        )
        write_csv(outdir / f"estimates_{r.trial:03d}.csv", ESTIMATE_COLUMNS, rows)


def emit_plotdata(metrics: RunMetrics, truth, scans, receivers, env, outdir) -> None:
    """Measured vs modelled TDOAs, and mean range / RMSE per scan.

    ``truth`` is an ``(n_scans, 3)`` state array or ``None``; without it the
    TDOA file holds only the measurements.
    """
    outdir = Path(outdir)
    rows = []
    for n, s in enumerate(scans):
        for z in s.measurements:
            rows.append((s.time_index, s.timestamp, "measurement", float(z)))
        if truth is not None:
            g = predict_tdoas(truth[n, 0], truth[n, 1], receivers[n].depth, env)
            for pair, gl in zip(PAIRS, g):
                rows.append((s.time_index, s.timestamp, f"g{pair.index}", float(gl)))
    write_csv(outdir / "plot_tdoa.csv", TDOA_PLOT_COLUMNS, rows)
    true = truth[:, 0] if truth is not None else np.full(len(scans), np.nan)
    write_csv(outdir / "plot_range.csv", RANGE_PLOT_COLUMNS, zip(
        metrics.scan_index.tolist(), metrics.timestamp.tolist(), metrics.mean_range.tolist(),
        true.tolist(), metrics.rmse_range.tolist(),
    ))


def run_experiment(cfg: RunConfig, outdir=None, jobs: int | None = None) -> RunMetrics:
    """All trials, their metrics and, with ``outdir``, every output file."""
    results = run_trials(cfg, jobs)
    metrics = compute_metrics(results, cfg)
    log.info(
        "%d trials: mean RMSE %.1f m from scan %d, %.0f%% diverged",
        metrics.n_trials, metrics.mean_rmse, metrics.burn_in, 100 * metrics.divergence_fraction,
    )
    if outdir is not None:
        write_metrics(metrics, outdir)
        write_estimates(results, outdir)
        d0 = results[0].dataset
        emit_plotdata(metrics, d0.truth, d0.scans, d0.receivers, cfg.env, outdir)
    return metrics


def read_metrics(outdir) -> dict[str, np.ndarray]:
    """Columns of a written ``metrics.csv`` and ``trials.csv``."""
    outdir = Path(outdir)
    out = {}
    for name, cols in (("metrics.csv", METRICS_COLUMNS), ("trials.csv", TRIALS_COLUMNS)):
        path = outdir / name
        if not path.is_file():
            raise DataError("missing; run 'track' first", path)
        rows = read_rows(path, cols)
        try:
            arr = np.array([[float(v) for v in r] for _, r in rows]).reshape(-1, len(cols))
        except ValueError as exc:
            raise DataError(str(exc), path) from None
        for j, c in enumerate(cols):
            out[c] = arr[:, j]
    return out
