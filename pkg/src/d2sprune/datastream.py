"""Synthetic non-stationary click stream.

A small teacher click model produces labels. Its parameters are
piecewise-linearly interpolated between random anchor sets, and the
popularity ranking of categorical entities is blended between anchor
permutations, so the joint distribution of (features, label) drifts
gradually with the sample index ``t``.

Every example is a pure function of (StreamConfig, DriftSchedule, t): the
stream is cut into fixed-size chunks and chunk ``c`` draws from a generator
seeded by ``(seed, c)``, so any slicing of ``[t, t+n)`` yields the same data.
"""

from __future__ import annotations

import functools
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError
from .nn import Batch, ModelConfig, RecModel, _interact


@dataclass(frozen=True)
class StreamConfig:
    dense_dim: int = 16
    table_rows: tuple = (1000, 1000, 1000, 1000)
    multiplicity: tuple = (2, 2, 2, 2)
    label_noise: float = 0.1
    batch_size: int = 256
    zipf_exponent: float = 1.05
    chunk_size: int = 1024
    teacher_bottom: tuple = (16, 8)
    teacher_top: tuple = (16, 1)
    teacher_logit_std: float = 2.0
    seed: int = 0

    def __post_init__(self):
        for name in ("table_rows", "multiplicity", "teacher_bottom", "teacher_top"):
            object.__setattr__(self, name, tuple(int(v) for v in getattr(self, name)))
        if len(self.table_rows) != len(self.multiplicity):
            raise ConfigError("table_rows and multiplicity must have equal length")
        if not 0.0 <= self.label_noise <= 0.5:
            raise ConfigError("label_noise must be in [0, 0.5]")
        if self.batch_size < 1 or self.chunk_size < 1 or min(self.multiplicity) < 1:
            raise ConfigError("batch_size, chunk_size and multiplicities must be positive")

    def check_student(self, model_cfg: ModelConfig) -> None:
        if model_cfg.dense_dim != self.dense_dim or model_cfg.table_rows != self.table_rows:
            raise ConfigError("stream and student model disagree on feature dimensions")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class DriftSchedule:
    anchor_times: tuple = (0, 400_000, 800_000, 1_200_000, 1_600_000, 2_000_000)
    drift_magnitude: float = 0.5
    popularity_drift: float = 0.2
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "anchor_times", tuple(int(t) for t in self.anchor_times))
        times = self.anchor_times
        if not times or times[0] != 0 or any(b <= a for a, b in zip(times, times[1:])):
            raise ConfigError("anchor_times must start at 0 and be strictly increasing")
        if self.drift_magnitude < 0:
            raise ConfigError("drift_magnitude must be >= 0")
        if not 0.0 <= self.popularity_drift <= 1.0:
            raise ConfigError("popularity_drift must be in [0, 1]")

    def locate(self, t: float) -> tuple[int, float]:
        """Return (j, u) such that time t sits at fraction u between anchors j and j+1."""
        times = self.anchor_times
        if t >= times[-1]:
            return len(times) - 1, 0.0
        j = int(np.searchsorted(times, t, side="right")) - 1
        return j, (t - times[j]) / (times[j + 1] - times[j])

    def to_dict(self) -> dict:
        return asdict(self)


def _teacher_config(cfg: StreamConfig, seed: int) -> ModelConfig:
    return ModelConfig(
        dense_dim=cfg.dense_dim,
        bottom=cfg.teacher_bottom,
        table_rows=cfg.table_rows,
        emb_dim=cfg.teacher_bottom[-1],
        top=cfg.teacher_top,
        masked=False,
        seed=seed,
    )


class TeacherModel:
    """Ground-truth click model whose parameters drift between anchors."""

    def __init__(self, cfg: StreamConfig, schedule: DriftSchedule):
        self.cfg = cfg
        self.schedule = schedule
        self.model_config = _teacher_config(cfg, schedule.seed)
        rng = np.random.default_rng([schedule.seed, 7919])
        base = RecModel(self.model_config)
        # heavier-than-Glorot embeddings so categorical interactions carry signal
        for t in base.embeddings:
            t.table[...] = rng.normal(0.0, 1.0 / np.sqrt(t.dim), size=t.table.shape)
        self._model = base
        self._rescale_logits(rng)
        anchors = [base.param_vector()]
        for _ in schedule.anchor_times[1:]:
            prev = anchors[-1]
            step = rng.normal(size=prev.shape)
            step *= schedule.drift_magnitude * np.linalg.norm(prev) / np.linalg.norm(step)
            anchors.append(prev + step)
        self.anchors = anchors

    def _rescale_logits(self, rng: np.random.Generator) -> None:
        """Redraw the output layer so logits have the configured spread and mean 0."""
        n = 4096
        ids = tuple(rng.integers(0, r, size=(n, m)) for r, m in zip(self.cfg.table_rows, self.cfg.multiplicity))
        probe = Batch(rng.normal(size=(n, self.cfg.dense_dim)), ids, np.zeros(n))
        hidden = _last_hidden(self._model, probe)
        last = self._model.top[-1]
        w = rng.normal(size=last.values.shape[1])
        last.values[0] = w * self.cfg.teacher_logit_std / max(np.std(hidden @ w), 1e-12)
        last.bias[...] = -np.mean(hidden @ last.values[0])

    def params_at(self, t: float) -> np.ndarray:
        if t < 0:
            raise DataError("virtual time must be >= 0")
        j, u = self.schedule.locate(t)
        if u == 0.0:
            return self.anchors[j].copy()
        # difference form: identical anchors interpolate to themselves exactly
        return self.anchors[j] + u * (self.anchors[j + 1] - self.anchors[j])

    def model_at(self, t: float) -> RecModel:
        self._model.load_param_vector(self.params_at(t))
        return self._model


def _last_hidden(model: RecModel, batch: Batch) -> np.ndarray:
    """Input activations of the teacher's final layer."""
    z, _, _ = model._mlp(model.bottom, batch.dense, final_linear=False)
    inter = _interact(np.stack([z] + model.embed(batch), axis=1))
    h, _, _ = model._mlp(model.top[:-1], inter, final_linear=False)
    return h


def teacher_at(teacher: TeacherModel, t: float) -> np.ndarray:
    """Flattened teacher parameters at virtual time t."""
    return teacher.params_at(t)


def drift_distance(teacher: TeacherModel, t1: float, t2: float) -> float:
    return float(np.linalg.norm(teacher.params_at(t1) - teacher.params_at(t2)))


def zipf_cdf(rows: int, exponent: float) -> np.ndarray:
    w = np.arange(1, rows + 1, dtype=np.float64) ** -exponent
    cdf = np.cumsum(w)
    return cdf / cdf[-1]


class DataStream:
    """Chunked, cached realization of the drifting stream.

    Instances are read-only after construction apart from an internal chunk
    cache, whose contents are a pure function of the chunk index.
    """

    def __init__(self, cfg: StreamConfig, schedule: DriftSchedule, cache_chunks: int = 160):
        self.cfg = cfg
        self.schedule = schedule
        self.teacher = TeacherModel(cfg, schedule)
        self._cdfs = [zipf_cdf(r, cfg.zipf_exponent) for r in cfg.table_rows]
        self._perms = self._build_permutations()
        self._chunk = functools.lru_cache(maxsize=cache_chunks)(self._make_chunk)

    def _build_permutations(self) -> list[list[np.ndarray]]:
        """perms[f][j] maps popularity rank -> entity id at anchor j."""
        rng = np.random.default_rng([self.schedule.seed, 104729])
        perms = []
        for rows in self.cfg.table_rows:
            seq = [rng.permutation(rows)]
            k = int(round(self.schedule.popularity_drift * rows))
            for _ in self.schedule.anchor_times[1:]:
                nxt = seq[-1].copy()
                if k >= 2:
                    pos = rng.choice(rows, size=k, replace=False)
                    nxt[pos] = nxt[rng.permutation(pos)]
                seq.append(nxt)
            perms.append(seq)
        return perms

    def _make_chunk(self, index: int, offline: bool) -> Batch:
        cfg = self.cfg
        n = cfg.chunk_size
        t0 = 0 if offline else index * n
        rng = np.random.default_rng([cfg.seed, index, 1 if offline else 0])
        dense = rng.standard_normal((n, cfg.dense_dim))
        j, u = self.schedule.locate(t0)
        cats = []
        for f, (cdf, m) in enumerate(zip(self._cdfs, cfg.multiplicity)):
            ranks = np.minimum(np.searchsorted(cdf, rng.random((n, m)), side="right"), cdf.size - 1)
            seq = self._perms[f]
            nxt = seq[min(j + 1, len(seq) - 1)]
            use_next = rng.random((n, m)) < u
            cats.append(np.where(use_next, nxt[ranks], seq[j][ranks]))
        batch = Batch(dense, tuple(cats), np.zeros(n), t0)
        probs = self.teacher.model_at(t0).predict(batch)
        labels = rng.random(n) < probs
        flip = rng.random(n) < cfg.label_noise
        batch.labels = (labels ^ flip).astype(np.float64)
        return batch

    def batch(self, t: int, n: int, offline: bool = False) -> Batch:
        """Examples [t, t+n) of the stream (or of the stationary offline stream)."""
        if n < 1:
            raise DataError("n must be >= 1")
        if t < 0:
            raise DataError("t must be >= 0")
        size = self.cfg.chunk_size
        first, last = t // size, (t + n - 1) // size
        parts = [self._chunk(c, offline) for c in range(first, last + 1)]
        whole = parts[0] if len(parts) == 1 else Batch.concat(parts)
        lo = t - first * size
        out = whole.slice(lo, lo + n)
        out.virtual_time = t
        return out

    def batches(self, t0: int, t1: int, batch_size: int | None = None, offline: bool = False):
        """Yield consecutive batches covering [t0, t1); the last may be short."""
        bs = batch_size or self.cfg.batch_size
        t = t0
        while t < t1:
            n = min(bs, t1 - t)
            yield self.batch(t, n, offline=offline)
            t += n


@functools.lru_cache(maxsize=8)
def _stream(cfg: StreamConfig, schedule: DriftSchedule) -> DataStream:
    return DataStream(cfg, schedule)


def sample_batch(cfg: StreamConfig, schedule: DriftSchedule, t: int, n: int) -> Batch:
    return _stream(cfg, schedule).batch(t, n)


# -- record file export ---------------------------------------------------------
#
# Layout (little-endian):
#   file header : b"D2SS" | u32 version | u32 dense_dim | u32 num_features | u32[num_features] multiplicity
#   per record  : u64 virtual_time | u32 n | f64[n*dense_dim] dense (row-major)
#                 | for each feature: i64[n*multiplicity] ids (row-major) | u8[n] labels

_MAGIC = b"D2SS"
_VERSION = 1


def export_stream(stream: DataStream, path, t0: int, t1: int, batch_size: int | None = None) -> int:
    cfg = stream.cfg
    count = 0
    with open(path, "wb") as fh:
        fh.write(_MAGIC + struct.pack("<III", _VERSION, cfg.dense_dim, len(cfg.multiplicity)))
        fh.write(struct.pack(f"<{len(cfg.multiplicity)}I", *cfg.multiplicity))
        for b in stream.batches(t0, t1, batch_size):
            fh.write(struct.pack("<QI", b.virtual_time, len(b)))
            fh.write(b.dense.astype("<f8").tobytes())
            for ids in b.categorical:
                fh.write(ids.astype("<i8").tobytes())
            fh.write(b.labels.astype(np.uint8).tobytes())
            count += 1
    return count


def read_stream(path):
    """Yield the batches stored by :func:`export_stream`."""
    data = Path(path).read_bytes()
    if data[:4] != _MAGIC:
        raise DataError("not a stream record file")
    version, dense_dim, nf = struct.unpack_from("<III", data, 4)
    if version != _VERSION:
        raise DataError(f"unsupported stream file version {version}")
    off = 16
    mult = struct.unpack_from(f"<{nf}I", data, off)
    off += 4 * nf
    while off < len(data):
        t, n = struct.unpack_from("<QI", data, off)
        off += 12
        dense = np.frombuffer(data, "<f8", n * dense_dim, off).reshape(n, dense_dim)
        off += 8 * n * dense_dim
        cats = []
        for m in mult:
            cats.append(np.frombuffer(data, "<i8", n * m, off).reshape(n, m))
            off += 8 * n * m
        labels = np.frombuffer(data, np.uint8, n, off)
        off += n
        yield Batch(dense.copy(), tuple(c.copy() for c in cats), labels.astype(np.float64), int(t))
