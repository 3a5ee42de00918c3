"""Look-ahead evaluation, relative/normalized CE and layer reports."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .errors import DataError, ProtocolError
from .nn import MaskedLayer, RecModel, ce_loss

HIST_BINS = 64


@dataclass
class MetricsRecord:
    virtual_time: int
    lookahead_ce: float
    dense_ce: float
    relative_ce: float
    overall_sparsity: float
    per_layer_sparsity: list
    mask_changes: list = field(default_factory=list)
    variant: str = ""
    seed: int = 0
    lineage: str = ""

    def __post_init__(self):
        if not self.lookahead_ce > 0:
            raise DataError("lookahead_ce must be positive")
        if self.relative_ce < -1:
            raise DataError("relative_ce must be >= -1")


RECORD_FIELDS = [f.name for f in fields(MetricsRecord)]


def lookahead_window_ce(model: RecModel, stream, t: int, window: int, chunk: int = 8192) -> float:
    """Mean CE of a frozen model on stream examples [t, t+window).

    The model must not have trained on any of that data yet.
    """
    if model.time > t:
        raise ProtocolError(f"model has consumed data up to {model.time}, cannot evaluate at {t}")
    total = 0.0
    for b in stream.batches(t, t + window, chunk):
        total += ce_loss(model.predict(b), b.labels) * len(b)
    return total / window


def relative_ce(ce_pruned: float, ce_full: float) -> float:
    if not ce_full > 0:
        raise DataError("reference CE must be positive")
    return ce_pruned / ce_full - 1.0


def binary_entropy(q: float) -> float:
    return -q * math.log(q) - (1.0 - q) * math.log1p(-q)


def normalized_ce(ce: float, label_prevalence: float) -> float:
    """CE divided by the CE of always predicting the background rate."""
    if not 0.0 < label_prevalence < 1.0:
        raise DataError("label prevalence must be strictly between 0 and 1")
    return ce / binary_entropy(label_prevalence)


def posthorizon_ce(model: RecModel, stream, horizon: int, length: int) -> float:
    """Frozen evaluation on [horizon, horizon+length) after training has ended."""
    return lookahead_window_ce(model, stream, horizon, length)


@dataclass
class LayerHistogram:
    name: str
    edges: np.ndarray
    pruned: np.ndarray
    active: np.ndarray


HistogramReport = list[LayerHistogram]


def histogram_report(model: RecModel, bins: int = HIST_BINS) -> HistogramReport:
    """Histograms of |theta| per masked layer, pruned vs. active, on shared edges."""
    out = []
    for name, layer in zip(model.layer_names(), model.layers):
        if not isinstance(layer, MaskedLayer):
            continue
        mag = np.abs(layer.values).ravel()
        hi = mag.max() if mag.size and mag.max() > 0 else 1.0
        edges = np.linspace(0.0, hi, bins + 1)
        mask = layer.mask.ravel()
        out.append(LayerHistogram(
            name,
            edges,
            np.histogram(mag[~mask], bins=edges)[0],
            np.histogram(mag[mask], bins=edges)[0],
        ))
    return out


def sparsity_vs_structure_report(model: RecModel, tag: str = "") -> list[dict]:
    """One row per masked layer: depth (0 = nearest the input), size, sparsity."""
    rows = []
    masked = [(n, l) for n, l in zip(model.layer_names(), model.layers) if isinstance(l, MaskedLayer)]
    smallest = min((l.values.size for _, l in masked), default=1)
    for depth, (name, layer) in enumerate(masked):
        rows.append(dict(
            tag=tag,
            layer=name,
            depth=depth,
            size=int(layer.values.size),
            relative_size=layer.values.size / smallest,
            sparsity=float((layer.aux <= 0).mean()),
        ))
    return rows


# -- metrics stream files -----------------------------------------------------

def _row(rec: MetricsRecord) -> dict:
    return asdict(rec)


def write_metrics(records, path, fmt: str = "jsonl") -> Path:
    """Write records as JSON lines (keyed) or CSV with list fields JSON-encoded."""
    path = Path(path)
    if fmt == "jsonl":
        with open(path, "w") as fh:
            for rec in records:
                fh.write(json.dumps(_row(rec), sort_keys=True) + "\n")
    elif fmt == "csv":
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=RECORD_FIELDS)
            w.writeheader()
            for rec in records:
                row = _row(rec)
                for k in ("per_layer_sparsity", "mask_changes"):
                    row[k] = json.dumps(row[k])
                w.writerow(row)
    else:
        raise DataError(f"unknown metrics format {fmt!r}")
    return path


def read_metrics(path) -> list[MetricsRecord]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"metrics file not found: {path}")
    if path.suffix == ".jsonl":
        with open(path) as fh:
            return [MetricsRecord(**json.loads(line)) for line in fh if line.strip()]
    with open(path, newline="") as fh:
        out = []
        for row in csv.DictReader(fh):
            out.append(MetricsRecord(
                virtual_time=int(row["virtual_time"]),
                lookahead_ce=float(row["lookahead_ce"]),
                dense_ce=float(row["dense_ce"]),
                relative_ce=float(row["relative_ce"]),
                overall_sparsity=float(row["overall_sparsity"]),
                per_layer_sparsity=json.loads(row["per_layer_sparsity"]),
                mask_changes=json.loads(row["mask_changes"]),
                variant=row["variant"],
                seed=int(row["seed"]),
                lineage=row["lineage"],
            ))
        return out


def window_mean(records, start: float, stop: float) -> float:
    """Mean relative CE over records with start <= virtual_time < stop."""
    vals = [r.relative_ce for r in records if start <= r.virtual_time < stop]
    if not vals:
        raise DataError(f"no records in [{start}, {stop})")
    return float(np.mean(vals))
