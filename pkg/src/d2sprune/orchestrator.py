"""Incremental training and the dense-to-sparse refresh schedule.

Everything runs as a sequential simulation over a sample-counted virtual
clock. The dense lineage trains on every window; sparse lineages are forked
from dense snapshots, pruned and fine-tuned on the windows that follow the
fork, and then served. Each window's examples are generated once and fed to
every lineage active on it.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .datastream import DataStream, DriftSchedule, StreamConfig
from .errors import ConfigError, DataError, ScheduleError
from .metrics import MetricsRecord, lookahead_window_ce, relative_ce
from .nn import ModelConfig, RecModel, load_snapshot, save_snapshot
from .pruning import ALGORITHMS, Pruner, PruneConfig, layer_sparsities, mop_adapt_step, sparsity

VARIANTS = ("dense-only", "fixed-mask", "aux-adapt", "mop-adapt", "d2s")
JOB_KINDS = ("dense-incr", "sparse-incr", "prune-finetune")


@dataclass(frozen=True)
class D2SConfig:
    delta: int = 50_000
    horizon: int = 2_000_000
    r: int = 8
    p: int = 2
    monitor_threshold: float | None = None
    lr: float = 0.05
    adagrad_eps: float = 1e-8
    pretrain_samples: int = 1_000_000

    def __post_init__(self):
        if self.delta < 1 or self.horizon < 0 or self.horizon % self.delta:
            raise ConfigError("horizon must be a non-negative multiple of delta >= 1")
        if self.r < 1 or not 1 <= self.p <= self.r:
            raise ConfigError("need r >= 1 and 1 <= p <= r")
        if self.lr <= 0 or self.adagrad_eps <= 0:
            raise ConfigError("lr and adagrad_eps must be positive")

    @property
    def steps(self) -> int:
        return self.horizon // self.delta


@dataclass(frozen=True)
class EvalConfig:
    window: int = 25_000
    posthorizon: int = 0


@dataclass(frozen=True)
class ExperimentConfig:
    model: ModelConfig = ModelConfig()
    stream: StreamConfig = StreamConfig()
    drift: DriftSchedule = DriftSchedule()
    prune: PruneConfig = PruneConfig()
    d2s: D2SConfig = D2SConfig()
    eval: EvalConfig = EvalConfig()
    seeds: tuple = (0,)

    def __post_init__(self):
        self.stream.check_student(self.model)
        span = self.d2s.p * self.d2s.delta
        if self.prune.prune_phase_samples > span:
            raise ConfigError(f"prune_phase_samples exceeds the p*delta = {span} prune window")

    def for_seed(self, seed: int) -> "ExperimentConfig":
        """Same experiment with every random source re-keyed on ``seed``."""
        return dataclasses.replace(
            self,
            model=dataclasses.replace(self.model, seed=seed),
            stream=dataclasses.replace(self.stream, seed=seed),
            drift=dataclasses.replace(self.drift, seed=seed),
            seeds=(seed,),
        )


@dataclass(frozen=True)
class Job:
    kind: str
    lineage: str
    source_time: int
    window: tuple
    output_time: int


@dataclass
class JobLog:
    jobs: list = field(default_factory=list)

    def __iter__(self):
        return iter(self.jobs)

    def __len__(self):
        return len(self.jobs)

    def for_lineage(self, lineage: str) -> list[Job]:
        return [j for j in self.jobs if j.lineage == lineage]

    def lineages(self) -> list[str]:
        return list(dict.fromkeys(j.lineage for j in self.jobs))

    def deployments(self) -> list[tuple[int, str]]:
        return [(j.output_time, j.lineage) for j in self.jobs if j.kind == "prune-finetune"]

    def active_at(self, t: float) -> list[Job]:
        return [j for j in self.jobs if j.window[0] <= t < j.window[1]]

    def to_rows(self) -> list[dict]:
        return [dict(kind=j.kind, lineage=j.lineage, source_time=j.source_time,
                     window_start=j.window[0], window_end=j.window[1], output_time=j.output_time)
                for j in self.jobs]

    def write_csv(self, path) -> Path:
        import csv

        rows = self.to_rows()
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]) if rows else ["kind"])
            w.writeheader()
            w.writerows(rows)
        return Path(path)


def _sparse_jobs(log: JobLog, name: str, source: int, deploy: int, until: int, delta: int) -> None:
    log.jobs.append(Job("prune-finetune", name, source, (source, deploy), deploy))
    # served from `deploy`; trained on each window whose output lands before replacement
    t = deploy
    while t + delta <= until:
        log.jobs.append(Job("sparse-incr", name, t, (t, t + delta), t + delta))
        t += delta


def d2s_schedule(cfg: D2SConfig, refreshes: bool = True) -> JobLog:
    """Job skeleton for the dense lineage plus every scheduled sparse refresh.

    Sparse model k >= 1 is pruned from the dense snapshot at (k*r - p)*delta
    on data [(k*r - p)*delta, k*r*delta) and served from k*r*delta. The
    initial sparse model (k = 0) is pruned from the t = 0 snapshot on
    [0, p*delta). With ``refreshes=False`` only k = 0 is scheduled.
    """
    d, T = cfg.delta, cfg.horizon
    log = JobLog()
    for t in range(0, T, d):
        log.jobs.append(Job("dense-incr", "dense", t, (t, t + d), t + d))
    deploys = [(0, cfg.p * d)]
    k = 1
    while refreshes and k * cfg.r * d < T:
        deploys.append(((k * cfg.r - cfg.p) * d, k * cfg.r * d))
        k += 1
    for i, (source, deploy) in enumerate(deploys):
        if deploy > T:
            break
        # the predecessor stops training one window before its replacement goes live
        until = T if i + 1 == len(deploys) else deploys[i + 1][1] - d
        _sparse_jobs(log, f"sparse-{i}", source, deploy, until, d)
    return log


def divergence_monitor(dense_metrics, sparse_metrics, threshold: float) -> bool:
    """True once relative CE exceeds ``threshold`` on two consecutive windows.

    Both inputs are aligned sequences of CE values, or of MetricsRecord /
    (time, ce) pairs whose times must match.
    """
    dense_metrics, sparse_metrics = list(dense_metrics), list(sparse_metrics)
    if len(dense_metrics) != len(sparse_metrics):
        raise DataError("dense and sparse metrics are not aligned")
    prev = False
    for d, s in zip(dense_metrics, sparse_metrics):
        if isinstance(d, tuple):
            if d[0] != s[0]:
                raise DataError(f"misaligned windows at {d[0]} vs {s[0]}")
            d, s = d[1], s[1]
        above = relative_ce(s, d) > threshold
        if above and prev:
            return True
        prev = above
    return False


class SnapshotStore:
    """Immutable snapshots keyed by (lineage, virtual time); optional on-disk copy."""

    def __init__(self, directory=None):
        self._snaps: dict[tuple[str, int], RecModel] = {}
        self.directory = Path(directory) if directory else None
        if self.directory:
            self.directory.mkdir(parents=True, exist_ok=True)

    def put(self, lineage: str, t: int, model: RecModel) -> None:
        key = (lineage, t)
        if key in self._snaps:
            raise ScheduleError(f"snapshot {key} already written")
        self._snaps[key] = model.copy()
        if self.directory:
            save_snapshot(model, self.directory / f"{lineage}_{t}.npz")

    def get(self, lineage: str, t: int) -> RecModel:
        try:
            return self._snaps[(lineage, t)].copy()
        except KeyError:
            raise ScheduleError(f"no snapshot for {lineage} at t={t}") from None

    def times(self, lineage: str) -> list[int]:
        return sorted(t for (name, t) in self._snaps if name == lineage)


def incremental_step(model: RecModel, stream: DataStream, t0: int, t1: int, step=None,
                     batch_size: int | None = None, lr: float = 0.05, eps: float = 1e-8) -> RecModel:
    """Single pass over [t0, t1), advancing the model's clock to t1.

    ``step(model, batch)`` defaults to a plain Adagrad training step.
    """
    if model.time != t0:
        raise ScheduleError(f"model is at t={model.time}, window starts at {t0}")
    if t1 < t0:
        raise ScheduleError("window end precedes start")
    step = step or (lambda m, b: m.train_step(b, lr, eps))
    for batch in stream.batches(t0, t1, batch_size):
        step(model, batch)
    model.time = t1
    return model


def pretrain(cfg: ExperimentConfig, stream: DataStream) -> RecModel:
    """Dense model trained on the stationary offline stream; clock at t=0."""
    model = RecModel(cfg.model)
    for batch in stream.batches(0, cfg.d2s.pretrain_samples, offline=True):
        model.train_step(batch, cfg.d2s.lr, cfg.d2s.adagrad_eps)
    model.time = 0
    return model


@dataclass
class _Lineage:
    name: str
    model: RecModel
    prune_start: int
    mode: str
    pruner: Pruner
    next_refresh: int = 0


def parse_variant(variant: str) -> tuple[str, str | None]:
    """Split ``"fixed-mask:MP"`` into ("fixed-mask", "MP"); the suffix is optional."""
    base, _, algo = variant.partition(":")
    if base not in VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}; choose from {VARIANTS}")
    if algo and algo not in ALGORITHMS:
        raise ConfigError(f"unknown algorithm {algo!r} in variant {variant!r}")
    return base, algo or None


def _variant_prune_cfg(cfg: ExperimentConfig, variant: str) -> PruneConfig:
    base, algo = parse_variant(variant)
    if base == "aux-adapt":
        algo = "AUX"
    elif base == "mop-adapt":
        algo = "MoP"
    return dataclasses.replace(cfg.prune, algorithm=algo) if algo else cfg.prune


class Experiment:
    """One seed, one or more variants sharing a dense lineage and a stream."""

    def __init__(self, cfg: ExperimentConfig, stream: DataStream | None = None,
                 pretrained: RecModel | None = None, snapshot_dir=None):
        self.cfg = cfg
        self.stream = stream or DataStream(cfg.stream, cfg.drift)
        self.pretrained = pretrained
        self.snapshot_dir = snapshot_dir
        self.logs: dict[str, JobLog] = {}
        self.final_models: dict[str, RecModel] = {}
        self.posthorizon: dict[str, dict] = {}

    def _step_fn(self, lin: _Lineage):
        d = self.cfg.d2s
        phase = lin.pruner.cfg.prune_phase_samples

        def step(model, batch):
            t = batch.virtual_time
            if lin.mode == "aux-adapt" or t < lin.prune_start + phase:
                lin.pruner.step(model, batch)
            elif lin.mode == "mop-adapt":
                refresh = t + len(batch) >= lin.next_refresh
                if refresh:
                    lin.next_refresh += lin.pruner.cfg.refresh_interval
                mop_adapt_step(model, batch, lin.pruner.cfg, d.lr, d.adagrad_eps, refresh)
            else:
                model.train_step(batch, d.lr, d.adagrad_eps)

        return step

    def run(self, variants=("dense-only",)) -> dict[str, list[MetricsRecord]]:
        bases = {v: parse_variant(v)[0] for v in variants}
        cfg, d = self.cfg, self.cfg.d2s
        seed = cfg.seeds[0] if cfg.seeds else 0
        dense = (self.pretrained or pretrain(cfg, self.stream)).copy()
        dense.time = 0
        store = SnapshotStore(self.snapshot_dir)
        dynamic = d.monitor_threshold is not None

        # per-variant job logs; the dense lineage is shared
        for v in variants:
            if bases[v] == "dense-only":
                self.logs[v] = JobLog([j for j in d2s_schedule(d) if j.kind == "dense-incr"])
            else:
                self.logs[v] = d2s_schedule(d, refreshes=(bases[v] == "d2s" and not dynamic))

        lineages: dict[tuple[str, str], _Lineage] = {}
        serving: dict[str, str | None] = {v: None for v in variants}
        history: dict[str, list[tuple[float, float]]] = {v: [] for v in variants}
        last_mask: dict[str, list[np.ndarray] | None] = {v: None for v in variants}
        records: dict[str, list[MetricsRecord]] = {v: [] for v in variants}

        self._lineages, self._store = lineages, store
        for t in range(0, d.horizon, d.delta):
            store.put("dense", t, dense)
            # fork lineages whose prune job starts now, and switch deployments
            for v in variants:
                for job in list(self.logs[v]):
                    if job.kind != "prune-finetune":
                        continue
                    if job.window[0] == t:
                        self._fork(v, job.lineage, t)
                        if serving[v] is None:
                            serving[v] = job.lineage
                    if job.output_time == t:
                        serving[v] = job.lineage
                        history[v] = []

            dense_ce = lookahead_window_ce(dense, self.stream, t, cfg.eval.window)
            for v in variants:
                if serving[v] is None:
                    model, name, ce = dense, "dense", dense_ce
                else:
                    name = serving[v]
                    model = lineages[(v, name)].model
                    ce = lookahead_window_ce(model, self.stream, t, cfg.eval.window)
                masks = [l.mask.copy() for l in model.masked_layers()]
                prev = last_mask[v]
                changes = [int((a != b).sum()) for a, b in zip(masks, prev)] if prev else [0] * len(masks)
                last_mask[v] = masks
                records[v].append(MetricsRecord(
                    virtual_time=t, lookahead_ce=ce, dense_ce=dense_ce,
                    relative_ce=relative_ce(ce, dense_ce), overall_sparsity=sparsity(model),
                    per_layer_sparsity=layer_sparsities(model), mask_changes=changes,
                    variant=v, seed=seed, lineage=name))
                history[v].append((dense_ce, ce))
                if dynamic and bases[v] == "d2s":
                    self._maybe_refresh(v, t, history[v])

            # train every lineage that has a job on [t, t + delta)
            active = []
            for v in variants:
                for job in self.logs[v].active_at(t):
                    if job.lineage != "dense":
                        active.append(lineages[(v, job.lineage)])
            steps = [(lin.model, self._step_fn(lin)) for lin in active]
            for batch in self.stream.batches(t, t + d.delta, cfg.stream.batch_size):
                dense.train_step(batch, d.lr, d.adagrad_eps)
                for model, step in steps:
                    step(model, batch)
            dense.time = t + d.delta
            for model, _ in steps:
                model.time = t + d.delta

        for (v, name), lin in lineages.items():
            if serving[v] == name:
                self.final_models[v] = lin.model
        self.final_models["dense"] = dense
        self.store = store
        self.posthorizon = self._posthorizon(variants) if cfg.eval.posthorizon > 0 else {}
        return records

    def _posthorizon(self, variants) -> dict[str, dict]:
        """Frozen CE on the last 10% of a held-out extension [T, T + posthorizon)."""
        T, length = self.cfg.d2s.horizon, self.cfg.eval.posthorizon
        start = T + length - max(length // 10, 1)
        dense = self.final_models["dense"]
        dense_ce = lookahead_window_ce(dense, self.stream, start, T + length - start)
        out = {}
        for v in variants:
            model = self.final_models.get(v, dense)
            ce = lookahead_window_ce(model, self.stream, start, T + length - start)
            out[v] = dict(ce=ce, dense_ce=dense_ce, relative_ce=relative_ce(ce, dense_ce), window=(start, T + length))
        return out

    def _fork(self, variant: str, name: str, t: int) -> None:
        d = self.cfg.d2s
        pcfg = _variant_prune_cfg(self.cfg, variant)
        model = self._store.get("dense", t)
        for layer in model.masked_layers():
            layer.reset_mask_state()
        base = parse_variant(variant)[0]
        mode = base if base in ("aux-adapt", "mop-adapt") else "fixed"
        self._lineages[(variant, name)] = _Lineage(
            name, model, t, mode, Pruner(pcfg, d.lr, d.adagrad_eps),
            next_refresh=t + pcfg.prune_phase_samples + pcfg.refresh_interval)

    def _maybe_refresh(self, v: str, t: int, hist) -> None:
        """Dynamic mode: fork a new sparse model from the dense snapshot at t."""
        d = self.cfg.d2s
        log = self.logs[v]
        if any(j.kind == "prune-finetune" and j.window[1] > t for j in log):
            return
        dense_ces = [h[0] for h in hist[-2:]]
        sparse_ces = [h[1] for h in hist[-2:]]
        if len(hist) < 2 or not divergence_monitor(dense_ces, sparse_ces, d.monitor_threshold):
            return
        deploy = t + d.p * d.delta
        if deploy >= d.horizon:
            return
        # the served lineage stops training one window before its replacement goes live
        log.jobs = [j for j in log.jobs
                    if not (j.kind == "sparse-incr" and j.window[0] >= deploy - d.delta)]
        name = f"sparse-{sum(1 for j in log if j.kind == 'prune-finetune')}"
        _sparse_jobs(log, name, t, deploy, d.horizon, d.delta)
        self._fork(v, name, t)


def run_experiment(cfg: ExperimentConfig, stream: DataStream | None = None, variant: str = "dense-only",
                   pretrained: RecModel | None = None) -> list[MetricsRecord]:
    return Experiment(cfg, stream, pretrained).run((variant,))[variant]
