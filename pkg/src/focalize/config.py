"""Run configuration: flat ``section.key = value`` files with strict keys.

Every key has a type and a default.  Values are overridden, in order, by the
file, by environment variables (``FOCALIZE_FILTER__PARTICLES=2000`` sets
``filter.particles``) and by explicit overrides passed by the caller.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .assoc import ClutterModel, DetectionModel, NoiseModel
from .cepstrum import CepstrumParams
from .filter import FilterConfig, Models, MotionModel, Prior
from .geometry import Environment, SourceState
from .sim import Scenario, receiver_sweep

ENV_PREFIX = "FOCALIZE_"
PRESET_DIR = Path(__file__).parent / "presets"


class ConfigError(ValueError):
    def __init__(self, message: str, key: str | None = None, line: int | str | None = None):
        where = []
        if key:
            where.append(f"key {key!r}")
        if line is not None:
            where.append(f"line {line}")
        super().__init__(f"{', '.join(where)}: {message}" if where else message)
        self.key = key
        self.line = line


# key: (kind, default); kind is one of float, int, bool, str, "triple", "path"
SCHEMA: dict[str, tuple[Any, Any]] = {
    "env.seafloor_depth": (float, 65.0),
    "env.sound_speed": (float, 1508.0),
    "detection.d": ("triple", (0.12, 0.08, 0.06)),
    "detection.position_dependent": (bool, True),
    "clutter.mean_count": (float, 4.0),
    "clutter.max_tdoa": (float, 0.1),
    "clutter.estimate": (bool, False),
    "noise.sigma": ("triple", (5e-4, 5e-4, 5e-4)),
    "motion.scan_time": (float, 3.0),
    "motion.accel_noise_var": (float, 0.05),
    "motion.depth_noise_var": (float, 0.0),
    "prior.range_min": (float, 0.0),
    "prior.range_max": (float, 5000.0),
    "prior.depth_min": (float, 0.0),
    "prior.depth_max": (float, 0.0),
    "prior.speed_std": (float, 5.0),
    "filter.particles": (int, 10_000),
    "filter.ess_threshold": (float, 0.5),
    "filter.jitter": (float, 0.1),
    "filter.max_measurements": (int, 20),
    "filter.speed_jitter": (float, 1.0),
    "scenario.n_scans": (int, 100),
    "scenario.initial_range": (float, 500.0),
    "scenario.initial_depth": (float, 0.0),
    "scenario.initial_speed": (float, 3.0),
    "scenario.accel_noise_var": (float, 0.001),
    "scenario.depth_noise_var": (float, 0.0),
    "scenario.receiver_depth_min": (float, 5.0),
    "scenario.receiver_depth_max": (float, 40.0),
    "scenario.receiver_cycles": (float, 1.0),
    "waveform.sample_rate": (float, 5000.0),
    "waveform.band_low": (float, 100.0),
    "waveform.band_high": (float, 2000.0),
    "waveform.snr_db": (float, 10.0),
    "cepstrum.window": (float, 1.0),
    "cepstrum.overlap": (float, 0.5),
    "cepstrum.window_fn": (str, "hann"),
    "cepstrum.floor": (float, 1e-12),
    "cepstrum.max_quefrency": (float, 0.1),
    "cepstrum.guard": (float, 0.002),
    "cepstrum.svd_rank": (int, 3),
    "cepstrum.kernel_time": (int, 5),
    "cepstrum.kernel_quefrency": (int, 25),
    "cepstrum.gain": (float, 3.0),
    "cepstrum.eps_time": (float, 1.5),
    "cepstrum.eps_quefrency": (float, 4e-4),
    "cepstrum.min_pts": (int, 3),
    "cepstrum.merge": (str, "cluster"),
    "data.measurements": ("path", None),
    "data.receiver": ("path", None),
    "data.truth": ("path", None),
    "data.waveform": ("path", None),
    "run.trials": (int, 50),
    "run.seed": (int, 0),
    "run.jobs": (int, 1),
    "run.burn_in": (int, 20),
    "run.max_divergence_fraction": (float, 0.2),
    "run.divergence_error": (float, 500.0),
    "run.frontend": (str, "direct"),
}


def _parse_value(kind, text: str, key: str, line):
    text = text.strip()
    if len(text) >= 2 and text[0] == text[-1] and text[0] in "\"'":
        text = text[1:-1]
    try:
        if kind is bool:
            low = text.lower()
            if low in ("true", "yes", "1"):
                return True
            if low in ("false", "no", "0"):
                return False
            raise ValueError(f"expected a boolean, got {text!r}")
        if kind is int:
            v = float(text)
            if v != int(v):
                raise ValueError(f"expected an integer, got {text!r}")
            return int(v)
        if kind is float:
            return float(text)
        if kind == "triple":
            parts = [float(p) for p in text.strip("[]()").split(",") if p.strip()]
            if len(parts) == 1:
                parts *= 3
            if len(parts) != 3:
                raise ValueError(f"expected 1 or 3 comma-separated numbers, got {text!r}")
            return tuple(parts)
        return text or None
    except ValueError as exc:
        raise ConfigError(str(exc), key, line) from None


@dataclass
class RunConfig:
    values: dict[str, Any]
    source: Path | None = None
    lines: dict[str, int | str] = field(default_factory=dict)

    def __getitem__(self, key: str):
        return self.values[key]

    def with_overrides(self, overrides: dict[str, Any]) -> "RunConfig":
        vals = dict(self.values)
        lines = dict(self.lines)
        for key, raw in overrides.items():
            if key not in SCHEMA:
                raise ConfigError("unknown key", key, "override")
            kind = SCHEMA[key][0]
            vals[key] = _parse_value(kind, raw, key, "override") if isinstance(raw, str) else raw
            if kind == "path" and vals[key] is not None:
                vals[key] = Path(vals[key])
            lines[key] = "override"
        cfg = RunConfig(vals, self.source, lines)
        cfg.validate()
        return cfg

    def _fail(self, key: str, message: str):
        raise ConfigError(message, key, self.lines.get(key))

    def validate(self) -> None:
        v = self.values
        for l, p in enumerate(v["detection.d"], 1):
            if not 0.0 <= p <= 1.0:
                self._fail("detection.d", f"d_{l} = {p} outside [0, 1]")
        positive = [
            "env.seafloor_depth", "env.sound_speed", "clutter.max_tdoa",
            "motion.scan_time", "waveform.sample_rate", "cepstrum.window",
            "cepstrum.eps_time", "cepstrum.eps_quefrency", "cepstrum.max_quefrency",
        ]
        for key in positive:
            if not v[key] > 0:
                self._fail(key, f"must be > 0, got {v[key]}")
        if any(not s > 0 for s in v["noise.sigma"]):
            self._fail("noise.sigma", f"all sigmas must be > 0, got {v['noise.sigma']}")
        nonneg = [
            "clutter.mean_count", "motion.accel_noise_var", "motion.depth_noise_var",
            "prior.speed_std", "filter.jitter", "filter.speed_jitter", "scenario.accel_noise_var",
            "scenario.depth_noise_var", "run.burn_in", "cepstrum.svd_rank", "cepstrum.guard",
        ]
        for key in nonneg:
            if v[key] < 0:
                self._fail(key, f"must be >= 0, got {v[key]}")
        for key in ("filter.particles", "filter.max_measurements", "scenario.n_scans",
                    "run.trials", "run.jobs", "cepstrum.min_pts"):
            if v[key] < 1:
                self._fail(key, f"must be >= 1, got {v[key]}")
        for key in ("filter.ess_threshold", "run.max_divergence_fraction"):
            if not 0.0 <= v[key] <= 1.0:
                self._fail(key, f"must lie in [0, 1], got {v[key]}")
        if not 0.0 <= v["cepstrum.overlap"] < 1.0:
            self._fail("cepstrum.overlap", f"must lie in [0, 1), got {v['cepstrum.overlap']}")
        z = v["env.seafloor_depth"]
        for lo, hi in (("prior.range_min", "prior.range_max"), ("prior.depth_min", "prior.depth_max"),
                       ("scenario.receiver_depth_min", "scenario.receiver_depth_max")):
            if not 0.0 <= v[lo] <= v[hi]:
                self._fail(lo, f"need 0 <= {lo} <= {hi}, got {v[lo]} and {v[hi]}")
        if v["prior.depth_max"] > z:
            self._fail("prior.depth_max", f"below the seafloor ({z} m)")
        if v["scenario.receiver_depth_max"] > z:
            self._fail("scenario.receiver_depth_max", f"below the seafloor ({z} m)")
        if not 0.0 <= v["scenario.initial_depth"] <= z:
            self._fail("scenario.initial_depth", f"outside the water column [0, {z}]")
        if not 0.0 <= v["scenario.initial_range"] <= v["prior.range_max"]:
            self._fail("scenario.initial_range", "outside the surveillance range")
        if not 0 <= v["waveform.band_low"] < v["waveform.band_high"] <= v["waveform.sample_rate"] / 2:
            self._fail("waveform.band_high", "band must satisfy 0 <= low < high <= Nyquist")
        if v["run.frontend"] not in ("direct", "waveform"):
            self._fail("run.frontend", f"expected 'direct' or 'waveform', got {v['run.frontend']!r}")
        if not v["run.divergence_error"] > 0:
            self._fail("run.divergence_error", f"must be > 0, got {v['run.divergence_error']}")
        if v["cepstrum.merge"] not in ("cluster", "none"):
            self._fail("cepstrum.merge", f"expected 'cluster' or 'none', got {v['cepstrum.merge']!r}")
        for key in ("cepstrum.kernel_time", "cepstrum.kernel_quefrency"):
            if v[key] < 1 or v[key] % 2 == 0:
                self._fail(key, f"must be a positive odd integer, got {v[key]}")
        for key in ("data.measurements", "data.receiver", "data.truth", "data.waveform"):
            if v[key] is not None and not Path(v[key]).is_file():
                self._fail(key, f"file not found: {v[key]}")
        if (v["data.measurements"] is None) != (v["data.receiver"] is None):
            self._fail("data.receiver", "data.measurements and data.receiver go together")

    # -- model builders ---------------------------------------------------

    @property
    def env(self) -> Environment:
        return Environment(self["env.seafloor_depth"], self["env.sound_speed"])

    @property
    def detection(self) -> DetectionModel:
        return DetectionModel(self["detection.d"], self["detection.position_dependent"])

    @property
    def clutter(self) -> ClutterModel:
        return ClutterModel(self["clutter.mean_count"], self["clutter.max_tdoa"])

    @property
    def noise(self) -> NoiseModel:
        return NoiseModel(self["noise.sigma"])

    @property
    def motion(self) -> MotionModel:
        return MotionModel(
            self["motion.scan_time"], self["motion.accel_noise_var"], self["motion.depth_noise_var"]
        )

    @property
    def prior(self) -> Prior:
        return Prior(
            (self["prior.range_min"], self["prior.range_max"]),
            (self["prior.depth_min"], self["prior.depth_max"]),
            self["prior.speed_std"],
        )

    @property
    def models(self) -> Models:
        return Models(self.env, self.motion, self.prior, self.detection, self.clutter, self.noise)

    @property
    def filter_config(self) -> FilterConfig:
        return FilterConfig(
            self["filter.particles"], self["filter.ess_threshold"],
            self["filter.jitter"], self["filter.max_measurements"],
            self["filter.speed_jitter"],
        )

    @property
    def cepstrum_params(self) -> CepstrumParams:
        keys = CepstrumParams.__dataclass_fields__
        return CepstrumParams(**{k: self[f"cepstrum.{k}"] for k in keys if f"cepstrum.{k}" in SCHEMA})

    @property
    def band(self) -> tuple[float, float]:
        return (self["waveform.band_low"], self["waveform.band_high"])

    def scenario(self, seed) -> Scenario:
        n = self["scenario.n_scans"]
        return Scenario(
            env=self.env,
            receiver_depths=receiver_sweep(
                n, self["scenario.receiver_depth_min"], self["scenario.receiver_depth_max"],
                self["scenario.receiver_cycles"],
            ),
            motion=MotionModel(
                self["motion.scan_time"], self["scenario.accel_noise_var"],
                self["scenario.depth_noise_var"],
            ),
            initial_state=SourceState(
                self["scenario.initial_range"], self["scenario.initial_depth"],
                self["scenario.initial_speed"],
            ),
            n_scans=n,
            detection=self.detection,
            clutter=self.clutter,
            noise=self.noise,
            seed=seed,
            max_range=self["prior.range_max"],
        )


def defaults() -> RunConfig:
    return RunConfig({k: d for k, (_, d) in SCHEMA.items()})


def parse_config(text: str, base_dir: Path | None = None, source: Path | None = None,
                 environ: dict[str, str] | None = None) -> RunConfig:
    values = {k: d for k, (_, d) in SCHEMA.items()}
    lines: dict[str, int | str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {raw.strip()!r}", None, lineno)
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError("unknown key", key, lineno)
        if key in lines:
            raise ConfigError(f"duplicate key (first set on line {lines[key]})", key, lineno)
        values[key] = _parse_value(SCHEMA[key][0], value, key, lineno)
        lines[key] = lineno

    environ = os.environ if environ is None else environ
    known = {ENV_PREFIX + k.upper().replace(".", "__"): k for k in SCHEMA}
    for name, value in sorted(environ.items()):
        if not name.startswith(ENV_PREFIX):
            continue
        if name not in known:
            raise ConfigError(f"environment variable {name} names no config key", None, "env")
        key = known[name]
        values[key] = _parse_value(SCHEMA[key][0], value, key, f"env {name}")
        lines[key] = f"env {name}"

    for key, (kind, _) in SCHEMA.items():
        if kind == "path" and values[key] is not None:
            p = Path(values[key])
            if base_dir is not None and not p.is_absolute():
                p = base_dir / p
            values[key] = p
    cfg = RunConfig(values, source, lines)
    cfg.validate()
    return cfg


def load_config(path, environ: dict[str, str] | None = None) -> RunConfig:
    """Read, override from the environment, and validate a config file.

    ``path`` may also be ``preset:<name>`` for a bundled preset.
    """
    path = str(path)
    if path.startswith("preset:"):
        path = PRESET_DIR / f"{path.split(':', 1)[1]}.cfg"
        if not path.is_file():
            names = sorted(p.stem for p in PRESET_DIR.glob("*.cfg"))
            raise ConfigError(f"unknown preset; available: {', '.join(names)}")
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc.strerror}") from None
    return parse_config(text, path.parent, path, environ)


def dump_config(cfg: RunConfig) -> str:
    out = []
    for key, (kind, _) in SCHEMA.items():
        v = cfg[key]
        if v is None:
            continue
        if kind == "triple":
            v = ", ".join(repr(float(x)) for x in v)
        elif kind is bool:
            v = str(v).lower()
        out.append(f"{key} = {v}")
    return "\n".join(out) + "\n"
