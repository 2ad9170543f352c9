"""Command line: ``focalize {simulate,track,extract,report}``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .cepstrum import WaveformSegment, extract
from .config import ConfigError, defaults, dump_config, load_config
from .datafiles import (
    DataError,
    write_csv,
    write_receiver,
    write_scans,
    write_truth,
)
from .experiment import read_metrics, run_experiment, simulate_dataset, trial_dataset_seed
from .geometry import SourceState

log = logging.getLogger("focalize")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4
PEAK_COLUMNS = ("time_s", "quefrency_s", "amplitude", "cluster")


def _config(args):
    cfg = load_config(args.config) if args.config else defaults()
    overrides = {}
    for item in args.set or ():
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v.strip()
    if args.seed is not None:
        overrides["run.seed"] = args.seed
    if getattr(args, "jobs", None) is not None:
        overrides["run.jobs"] = args.jobs
    return cfg.with_overrides(overrides) if overrides else cfg


def cmd_simulate(cfg, args) -> int:
    """Write one synthetic realisation: truth, receiver track, scans, optional waveform."""
    out = Path(args.out)
    ds = simulate_dataset(cfg, trial_dataset_seed(cfg), waveform=args.waveform)
    idx = [s.time_index for s in ds.scans]
    write_scans(out / "measurements.csv", ds.scans)
    write_receiver(out / "receiver.csv", ds.scans, depths=ds.receivers)
    write_truth(out / "truth.csv", idx, [SourceState.from_array(x) for x in ds.truth])
    if ds.waveform is not None:
        ds.waveform.to_file(out / "waveform.f32")
    print(f"wrote {len(ds.scans)} scans to {out}")
    return EXIT_OK


def cmd_track(cfg, args) -> int:
    """Run the Monte Carlo trials and write metrics, estimates and plot data."""
    m = run_experiment(cfg, args.out)
    (Path(args.out) / "config_resolved.cfg").write_text(dump_config(cfg))
    _print_summary(m.n_trials, m.mean_rmse, m.divergence_fraction, cfg["run.burn_in"])
    if m.divergence_fraction > cfg["run.max_divergence_fraction"]:
        log.warning(
            "%.0f%% of trials diverged (limit %.0f%%)",
            100 * m.divergence_fraction, 100 * cfg["run.max_divergence_fraction"],
        )
        return EXIT_DIVERGED
    return EXIT_OK


def cmd_extract(cfg, args) -> int:
    """Cepstrum front end on a float32 waveform: peaks and per-scan TDOAs."""
    path = args.waveform or cfg["data.waveform"]
    if path is None:
        raise ConfigError("no waveform: pass --waveform or set data.waveform")
    try:
        w = WaveformSegment.from_file(path, cfg["waveform.sample_rate"])
    except (OSError, ValueError) as exc:
        raise DataError(str(exc), path) from None
    ex = extract(w, cfg.cepstrum_params, cfg["motion.scan_time"])
    out = Path(args.out)
    p = ex.peaks
    write_csv(out / "peaks.csv", PEAK_COLUMNS, zip(
        p.times.tolist(), p.quefrencies.tolist(), p.amplitudes.tolist(), p.labels.tolist()
    ))
    write_scans(out / "measurements.csv", ex.scans)
    print(f"{len(p)} peaks, {sum(s.count for s in ex.scans)} measurements in "
          f"{len(ex.scans)} scans written to {out}")
    return EXIT_OK


def _print_summary(n_trials, mean_rmse, div_fraction, burn_in):
    print(f"trials: {n_trials}")
    print(f"mean range RMSE from scan {burn_in}: {mean_rmse:.2f} m")
    print(f"diverged trials: {100 * div_fraction:.1f}%")


def cmd_report(cfg, args) -> int:
    """Summarise the metrics written by a previous ``track`` into --out."""
    cols = read_metrics(args.out)
    rmse = cols["rmse_range_m"][max(cfg["run.burn_in"] - 1, 0):]
    div = cols["diverged"]
    frac = float(div.mean()) if len(div) else 0.0
    _print_summary(len(div), float(rmse.mean()) if len(rmse) else float("nan"),
                   frac, cfg["run.burn_in"])
    return EXIT_DIVERGED if frac > cfg["run.max_divergence_fraction"] else EXIT_OK


COMMANDS = {
    "simulate": cmd_simulate,
    "track": cmd_track,
    "extract": cmd_extract,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="focalize", description=__doc__)
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in COMMANDS.items():
        p = sub.add_parser(name, help=(fn.__doc__ or "").strip().split("\n")[0] or None)
        p.add_argument("--config", help="config file, or preset:<name>")
        p.add_argument("--seed", type=int, help="overrides run.seed")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override one config key (repeatable)")
        if name == "track":
            p.add_argument("--jobs", type=int, help="parallel trials (overrides run.jobs)")
        if name == "simulate":
            p.add_argument("--waveform", action="store_true",
                           help="also synthesise the received waveform")
        if name == "extract":
            p.add_argument("--waveform", help="float32 waveform file (overrides data.waveform)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        cfg = _config(args)
        return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        # invalid model or scenario values that slipped past config validation
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
