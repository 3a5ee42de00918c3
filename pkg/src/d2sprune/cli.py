"""Command-line front end: run, compare, bench, gen-stream, inspect-snapshot."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from collections import defaultdict
from pathlib import Path

import numpy as np

from . import plots
from .config import BenchConfig, content_hash, dump_config, load_config, parse_config
from .datastream import DataStream, export_stream
from .errors import ComparisonError, ConfigError, D2SError
from .kernels import bench
from .metrics import histogram_report, read_metrics, sparsity_vs_structure_report, write_metrics
from .nn import load_snapshot, save_snapshot
from .orchestrator import Experiment, ExperimentConfig, parse_variant
from .pruning import export_masks, layer_sparsities, sparsity

log = logging.getLogger("d2sprune")

MANIFEST = "manifest.json"


def _slug(variant: str) -> str:
    return variant.replace(":", "-")


def _read_config(path) -> tuple[ExperimentConfig, "BenchConfig", str]:
    if path is None:
        text = dump_config(ExperimentConfig())
        exp, bcfg = parse_config(text)
        return exp, bcfg, text
    text = Path(path).read_text() if Path(path).exists() else None
    exp, bcfg = load_config(path)
    return exp, bcfg, text


def _write_rows(rows: list[dict], path: Path, fmt: str) -> Path:
    path = path.with_suffix("." + fmt)
    if fmt == "jsonl":
        with open(path, "w") as fh:
            for row in rows:
                fh.write(json.dumps(row, sort_keys=True) + "\n")
    else:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]) if rows else ["empty"])
            w.writeheader()
            w.writerows(rows)
    return path


def run_command(config_path, variants, seeds, out, fmt="jsonl") -> dict:
    """Library form of ``run``; returns the manifest dict it wrote."""
    exp, _, text = _read_config(config_path)
    for v in variants:
        parse_variant(v)
    seeds = tuple(seeds) if seeds else tuple(exp.seeds)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    echo = dump_config(exp)
    manifest = {
        "config": echo,
        "config_hash": content_hash(text if text is not None else echo),
        "seeds": list(seeds),
        "variants": list(variants),
        "stream": {**exp.stream.to_dict(), **exp.drift.to_dict()},
        "format": fmt,
        "outputs": {"metrics": {}, "jobs": {}, "structure": {}, "histograms": {},
                    "snapshots": {}, "masks": {}},
        "status": {},
    }
    for seed in seeds:
        cfg = exp.for_seed(seed)
        log.info("seed %d: running %s", seed, ", ".join(variants))
        ex = Experiment(cfg)
        records = ex.run(tuple(variants))
        for v in variants:
            key = f"{_slug(v)}_seed{seed}"
            path = write_metrics(records[v], out / f"metrics_{key}.{fmt}", fmt)
            manifest["outputs"]["metrics"][key] = path.name
            jobs = ex.logs[v].write_csv(out / f"jobs_{key}.csv")
            manifest["outputs"]["jobs"][key] = jobs.name
            model = ex.final_models.get(v, ex.final_models["dense"])
            rows = sparsity_vs_structure_report(model, tag=v)
            manifest["outputs"]["structure"][key] = _write_rows(rows, out / f"structure_{key}", fmt).name
            hist = [dict(layer=h.name, bin_lo=float(lo), bin_hi=float(hi), pruned=int(p), active=int(a))
                    for h in histogram_report(model)
                    for lo, hi, p, a in zip(h.edges[:-1], h.edges[1:], h.pruned, h.active)]
            manifest["outputs"]["histograms"][key] = _write_rows(hist, out / f"hist_{key}", fmt).name
            snap = save_snapshot(model, out / f"snapshot_{key}.npz", extra={"variant": v, "seed": seed})
            manifest["outputs"]["snapshots"][key] = snap.name
            manifest["outputs"]["masks"][key] = export_masks(model, out / f"masks_{key}.npz").name
            if v in ex.posthorizon:
                manifest.setdefault("posthorizon", {})[key] = ex.posthorizon[v]
            manifest["status"][key] = "ok"
    (out / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def _load_manifest(path) -> tuple[dict, Path]:
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    return json.loads(path.read_text()), path.parent


def _mean_curve(record_lists) -> list[tuple[int, float]]:
    by_t = defaultdict(list)
    for recs in record_lists:
        for r in recs:
            by_t[r.virtual_time].append(r.relative_ce)
    return [(t, float(np.mean(v))) for t, v in sorted(by_t.items())]


def compare_command(manifest_paths, out, fmt="csv") -> dict:
    """Library form of ``compare``: curves, last-window table and sparsity scatters."""
    loaded = [_load_manifest(p) for p in manifest_paths]
    ref = loaded[0][0]["stream"]
    for (m, base) in loaded[1:]:
        if m["stream"] != ref:
            raise ComparisonError(f"stream config of {base} differs from {loaded[0][1]}")
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    multi = len(loaded) > 1
    curves, last_rows, scatter_size, scatter_depth = {}, [], {}, {}
    for i, (m, base) in enumerate(loaded):
        per_variant = defaultdict(list)
        for key, name in sorted(m["outputs"]["metrics"].items()):
            path = base / name
            if not path.exists():
                raise FileNotFoundError(f"metrics file listed in {base / MANIFEST} is missing: {path}")
            recs = read_metrics(path)
            variant = recs[0].variant if recs else key
            label = f"{i}:{variant}" if multi else variant
            per_variant[label].append(recs)
            if recs:
                last_rows.append(dict(label=label, seed=recs[-1].seed,
                                      last_window_relative_ce=recs[-1].relative_ce,
                                      final_sparsity=recs[-1].overall_sparsity))
        for key, name in sorted(m["outputs"].get("structure", {}).items()):
            path = base / name
            if not path.exists():
                raise FileNotFoundError(f"structure file missing: {path}")
            rows = _read_rows(path)
            label = f"{i}:{key}" if multi else key
            scatter_size[label] = [(float(r["relative_size"]), float(r["sparsity"])) for r in rows]
            scatter_depth[label] = [(float(r["depth"]), float(r["sparsity"])) for r in rows]
        for label, lists in per_variant.items():
            curves[label] = _mean_curve(lists)

    first = next(iter(curves.values()), [])
    curve_rows = []
    for label, pts in curves.items():
        gap = dict((t, y) for t, y in first)
        for t, y in pts:
            curve_rows.append(dict(label=label, virtual_time=t, relative_ce=y,
                                   gap_vs_first=y - gap.get(t, float("nan"))))
    outputs = {
        "curves": _write_rows(curve_rows, out / "curves", fmt).name,
        "last_window": _write_rows(last_rows, out / "last_window", fmt).name,
        "curves_svg": plots.line_chart(
            {k: [(t, 100 * y) for t, y in v] for k, v in curves.items()}, out / "relative_ce.svg",
            "Relative look-ahead CE", "virtual time (samples)", "relative CE (%)").name,
        "size_svg": plots.scatter_plot(scatter_size, out / "sparsity_vs_size.svg",
                                       "Layer sparsity vs relative size", "relative size", "sparsity").name,
        "depth_svg": plots.scatter_plot(scatter_depth, out / "sparsity_vs_depth.svg",
                                        "Layer sparsity vs depth", "depth", "sparsity").name,
    }
    return {"outputs": outputs, "last_window": last_rows, "curves": curves}


def _read_rows(path: Path) -> list[dict]:
    if path.suffix == ".jsonl":
        return [json.loads(line) for line in path.read_text().splitlines() if line.strip()]
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def bench_command(config_path, out=None, fmt="csv", sparsities=None, sizes=None) -> list[dict]:
    _, bcfg, _ = _read_config(config_path)
    results = bench(sizes or bcfg.sizes, sparsities if sparsities is not None else bcfg.sparsities,
                    bcfg.repetitions, bcfg.seed)
    rows = [dict(size=r.size, sparsity=r.sparsity, dense_time=r.dense_time, sparse_time=r.sparse_time,
                 speedup=r.speedup, flops_dense=r.flops_dense, flops_sparse=r.flops_sparse,
                 flop_ratio=str(r.flop_ratio),
                 realized_sparsity=str(r.realized_sparsity)) for r in results]
    if out is not None:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        path = _write_rows(rows, out / "bench", fmt)
        mpath = out / MANIFEST
        manifest = json.loads(mpath.read_text()) if mpath.exists() else {"outputs": {}}
        manifest.setdefault("outputs", {})["bench"] = path.name
        manifest["bench"] = rows
        mpath.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return rows


def inspect_snapshot(path) -> dict:
    model, extra = load_snapshot(path)
    layers = []
    for name, layer in zip(model.layer_names(), model.layers):
        row = dict(name=name, shape=list(layer.values.shape))
        if hasattr(layer, "aux"):
            row["sparsity"] = sparsity(layer)
        layers.append(row)
    return dict(config=model.config.to_dict(), time=model.time, extra=extra,
                overall_sparsity=sparsity(model) if model.masked_layers() else 0.0,
                layer_sparsity=layer_sparsities(model), layers=layers)


cmd_run, cmd_compare, cmd_bench = run_command, compare_command, bench_command


def _seeds(text: str | None):
    if text is None:
        return None
    try:
        return [int(s) for s in text.replace(",", " ").split()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad seed list {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="d2sprune", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run variants for each seed and write metrics + manifest")
    r.add_argument("--config")
    r.add_argument("--variant", action="append", required=True,
                   help="dense-only, fixed-mask, aux-adapt, mop-adapt or d2s, optionally :MP/:TP/:MoP/:AUX; "
                        "repeat or comma-separate for several")
    r.add_argument("--seeds", type=_seeds)
    r.add_argument("--out", required=True)
    r.add_argument("--format", choices=("csv", "jsonl"), default="jsonl")

    c = sub.add_parser("compare", help="compare manifests: curves, last-window table, scatters")
    c.add_argument("manifests", nargs="+")
    c.add_argument("--out", required=True)
    c.add_argument("--format", choices=("csv", "jsonl"), default="csv")

    b = sub.add_parser("bench", help="dense vs CSR matvec timing table")
    b.add_argument("--config")
    b.add_argument("--out")
    b.add_argument("--format", choices=("csv", "jsonl"), default="csv")
    b.add_argument("--sparsities", type=lambda s: [float(x) for x in s.split(",")])
    b.add_argument("--sizes", type=lambda s: [int(x) for x in s.split(",")])

    g = sub.add_parser("gen-stream", help="export a slice of the stream to a record file")
    g.add_argument("--config")
    g.add_argument("--seeds", type=_seeds, help="seed for the stream (first entry used)")
    g.add_argument("--start", type=int, default=0)
    g.add_argument("--stop", type=int, default=10_000)
    g.add_argument("--out", required=True)

    s = sub.add_parser("inspect-snapshot", help="print a snapshot summary as JSON")
    s.add_argument("path")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        if args.command == "run":
            variants = [v for item in args.variant for v in item.split(",") if v]
            try:
                for v in variants:
                    parse_variant(v)
            except ConfigError as exc:
                parser.error(str(exc))
            m = run_command(args.config, variants, args.seeds, args.out, args.format)
            print(json.dumps(m["outputs"]["metrics"], indent=2))
        elif args.command == "compare":
            res = compare_command(args.manifests, args.out, args.format)
            for row in res["last_window"]:
                print(f"{row['label']:<28} seed {row['seed']:<3} "
                      f"last-window relative CE {100 * row['last_window_relative_ce']:+.3f}%")
        elif args.command == "bench":
            rows = bench_command(args.config, args.out, args.format, args.sparsities, args.sizes)
            print(f"{'size':>6} {'sparsity':>8} {'dense_s':>10} {'sparse_s':>10} {'speedup':>8} {'flops':>6}")
            for r in rows:
                print(f"{r['size']:>6} {r['sparsity']:>8.2f} {r['dense_time']:>10.2e} "
                      f"{r['sparse_time']:>10.2e} {r['speedup']:>8.2f} {r['flop_ratio']:>6}")
        elif args.command == "gen-stream":
            exp, _, _ = _read_config(args.config)
            if args.seeds:
                exp = exp.for_seed(args.seeds[0])
            n = export_stream(DataStream(exp.stream, exp.drift), args.out, args.start, args.stop)
            print(f"wrote {n} batches to {args.out}")
        elif args.command == "inspect-snapshot":
            print(json.dumps(inspect_snapshot(args.path), indent=2))
    except (D2SError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
