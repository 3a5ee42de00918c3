"""Experiment config files: flat INI sections mapped onto the config dataclasses.

Layout::

    [model]   ModelConfig fields        (bottom = 32, 16)
    [stream]  StreamConfig fields plus the drift keys
              anchor_times, drift_magnitude, popularity_drift
    [prune]   PruneConfig fields
    [d2s]     D2SConfig fields          (monitor_threshold = none disables)
    [eval]    window, posthorizon, seeds
    [bench]   sizes, sparsities, repetitions, seed

Missing keys keep their defaults; unknown sections or keys are errors. The
per-seed ``seed`` fields of model, stream and drift are re-keyed from
``[eval] seeds`` at run time and cannot be set directly.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
from dataclasses import dataclass
from pathlib import Path

from .datastream import DriftSchedule, StreamConfig
from .errors import ConfigError
from .kernels import BENCH_SIZES, BENCH_SPARSITIES
from .nn import ModelConfig
from .orchestrator import D2SConfig, EvalConfig, ExperimentConfig
from .pruning import PruneConfig

SECTIONS = ("model", "stream", "prune", "d2s", "eval", "bench")
DRIFT_KEYS = ("anchor_times", "drift_magnitude", "popularity_drift")
_RESERVED = {"seed"}


@dataclass(frozen=True)
class BenchConfig:
    sizes: tuple = BENCH_SIZES
    sparsities: tuple = BENCH_SPARSITIES
    repetitions: int = 5
    seed: int = 0


def _parse_value(text: str, default, where: str):
    text = text.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in ("true", "yes", "on", "1"):
                return True
            if low in ("false", "no", "off", "0"):
                return False
            raise ValueError(text)
        if isinstance(default, tuple):
            kind = float if default and isinstance(default[0], float) else int
            parts = [p for p in text.replace(",", " ").split()]
            return tuple(kind(p) for p in parts)
        if default is None or isinstance(default, float):
            if text.lower() == "none":
                return None
            return float(text)
        if isinstance(default, int):
            return int(text)
        return text
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {text!r}") from None


def _format_value(value) -> str:
    if isinstance(value, tuple):
        return ", ".join(str(v) for v in value)
    if value is None:
        return "none"
    return str(value)


def _build(cls, section: dict, where: str, reserved=_RESERVED):
    defaults = cls()
    known = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, text in section.items():
        if key not in known or key in reserved:
            raise ConfigError(f"[{where}] {key}: unknown key")
        kwargs[key] = _parse_value(text, getattr(defaults, key), f"[{where}] {key}")
    try:
        return dataclasses.replace(defaults, **kwargs)
    except ConfigError as exc:
        raise ConfigError(f"[{where}] {exc}") from None


def parse_config(text: str) -> tuple[ExperimentConfig, BenchConfig]:
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    for name in cp.sections():
        if name not in SECTIONS:
            raise ConfigError(f"[{name}]: unknown section; expected one of {SECTIONS}")
    sec = {name: dict(cp[name]) if cp.has_section(name) else {} for name in SECTIONS}

    stream_keys = {k: v for k, v in sec["stream"].items() if k not in DRIFT_KEYS}
    drift_keys = {k: v for k, v in sec["stream"].items() if k in DRIFT_KEYS}
    eval_keys = dict(sec["eval"])
    seeds_text = eval_keys.pop("seeds", "0")

    model = _build(ModelConfig, sec["model"], "model")
    stream = _build(StreamConfig, stream_keys, "stream")
    drift = _build(DriftSchedule, drift_keys, "stream")
    prune = _build(PruneConfig, sec["prune"], "prune")
    d2s = _build(D2SConfig, sec["d2s"], "d2s")
    ev = _build(EvalConfig, eval_keys, "eval")
    seeds = _parse_value(seeds_text, (0,), "[eval] seeds")
    if not seeds:
        raise ConfigError("[eval] seeds: at least one seed is required")
    try:
        exp = ExperimentConfig(model, stream, drift, prune, d2s, ev, seeds)
    except ConfigError as exc:
        raise ConfigError(f"config: {exc}") from None
    bench = _build(BenchConfig, sec["bench"], "bench", reserved=())
    return exp, bench


def load_config(path) -> tuple[ExperimentConfig, BenchConfig]:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    return parse_config(path.read_text())


def dump_config(cfg: ExperimentConfig, bench: BenchConfig | None = None) -> str:
    """Inverse of :func:`parse_config`; every field written explicitly."""
    bench = bench or BenchConfig()
    sections = {
        "model": _fields(cfg.model),
        "stream": {**_fields(cfg.stream), **{k: getattr(cfg.drift, k) for k in DRIFT_KEYS}},
        "prune": _fields(cfg.prune),
        "d2s": _fields(cfg.d2s),
        "eval": {**_fields(cfg.eval), "seeds": tuple(cfg.seeds)},
        "bench": _fields(bench, reserved=()),
    }
    lines = []
    for name, values in sections.items():
        lines.append(f"[{name}]")
        lines += [f"{k} = {_format_value(v)}" for k, v in values.items()]
        lines.append("")
    return "\n".join(lines)


def _fields(obj, reserved=_RESERVED) -> dict:
    return {f.name: getattr(obj, f.name) for f in dataclasses.fields(obj) if f.name not in reserved}


def content_hash(data: bytes | str) -> str:
    """Git blob id of the content: sha1 over 'blob <len>\\0' + bytes."""
    if isinstance(data, str):
        data = data.encode()
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def benchmark_config(seeds=(0, 1, 2, 3, 4)) -> ExperimentConfig:
    """The fixed benchmark: defaults plus the calibrated pruning and refresh settings.

    r = 20 puts exactly one refresh at the middle of the 2M-sample stream.
    Popularity drift is kept low so the teacher drift dominates the signal.
    """
    return ExperimentConfig(
        drift=DriftSchedule(popularity_drift=0.05),
        prune=PruneConfig(lam=1.5e-3, aux_lr=10.0),
        d2s=D2SConfig(r=20),
        seeds=tuple(seeds),
    )
