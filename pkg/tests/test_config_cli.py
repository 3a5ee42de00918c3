import json
import subprocess

import numpy as np
import pytest
from test_orchestrator import tiny_config

from d2sprune import cli
from d2sprune.config import BenchConfig, benchmark_config, content_hash, dump_config, parse_config
from d2sprune.errors import ComparisonError, ConfigError
from d2sprune.metrics import read_metrics


def write_tiny(tmp_path, name="tiny.ini", **over):
    text = dump_config(tiny_config(**over), BenchConfig(sizes=(32,), sparsities=(0.0, 0.9), repetitions=1))
    path = tmp_path / name
    path.write_text(text)
    return path


# -- config ----------------------------------------------------------------------------

def test_round_trip():
    cfg = benchmark_config()
    bench = BenchConfig(sizes=(64, 128), repetitions=3)
    again, b2 = parse_config(dump_config(cfg, bench))
    assert again == cfg and b2 == bench


def test_partial_config_keeps_defaults():
    cfg, bench = parse_config("[prune]\nlam = 0.002\n[eval]\nseeds = 3, 4\n")
    assert cfg.prune.lam == 0.002 and cfg.seeds == (3, 4)
    assert cfg.model == type(cfg.model)() and bench == BenchConfig()


@pytest.mark.parametrize("text, fragment", [
    ("[prune]\nlam = x\n", "[prune] lam"),
    ("[prune]\nbogus = 1\n", "[prune] bogus"),
    ("[model]\nseed = 1\n", "[model] seed"),
    ("[nope]\na = 1\n", "[nope]"),
    ("[d2s]\nr = 2\np = 3\n", "d2s"),
    ("[eval]\nseeds = \n", "[eval] seeds"),
    ("no section header\n", "malformed"),
])
def test_parse_errors_name_the_field(text, fragment):
    with pytest.raises(ConfigError, match=None) as info:
        parse_config(text)
    assert fragment in str(info.value)


def test_content_hash_is_git_blob_id():
    assert content_hash(b"") == "e69de29bb2d1d6434b8b29ae775ad8c2e48c5391"
    assert content_hash("hello\n") == "ce013625030ba8dba906f756967f9e9ca394464a"


# -- run / compare ------------------------------------------------------------------------

@pytest.fixture(scope="module")
def run_dirs(tmp_path_factory):
    base = tmp_path_factory.mktemp("cli")
    cfg = write_tiny(base)
    a = cli.run_command(cfg, ["dense-only", "d2s"], [0], base / "a")
    b = cli.run_command(cfg, ["dense-only", "d2s"], [0], base / "b")
    return base, cfg, a, b


def test_run_is_deterministic(run_dirs):
    base, _, a, b = run_dirs
    for key, name in a["outputs"]["metrics"].items():
        assert (base / "a" / name).read_bytes() == (base / "b" / name).read_bytes()
    assert a["config_hash"] == b["config_hash"]


def test_run_outputs_exist(run_dirs):
    base, cfg, a, _ = run_dirs
    manifest = json.loads((base / "a" / "manifest.json").read_text())
    assert manifest["config_hash"] == content_hash(cfg.read_text())
    for kind, files in manifest["outputs"].items():
        for name in files.values():
            assert (base / "a" / name).exists(), (kind, name)
    recs = read_metrics(base / "a" / manifest["outputs"]["metrics"]["d2s_seed0"])
    assert recs and all(r.variant == "d2s" for r in recs)


def test_compare_self_has_zero_gap(run_dirs, tmp_path):
    base, _, _, _ = run_dirs
    res = cli.compare_command([base / "a", base / "b"], tmp_path / "cmp")
    assert (tmp_path / "cmp" / "relative_ce.svg").exists()
    assert res["curves"]["0:d2s"] == res["curves"]["1:d2s"]
    rows = (tmp_path / "cmp" / "curves.csv").read_text().splitlines()
    assert len(rows) > 1


def test_compare_rejects_other_stream(run_dirs, tmp_path):
    base, _, _, _ = run_dirs
    other = json.loads((base / "a" / "manifest.json").read_text())
    other["stream"]["batch_size"] = 999
    (tmp_path / "o").mkdir()
    (tmp_path / "o" / "manifest.json").write_text(json.dumps(other))
    with pytest.raises(ComparisonError):
        cli.compare_command([base / "a", tmp_path / "o"], tmp_path / "cmp")


def test_compare_missing_metrics_file(run_dirs, tmp_path):
    base, _, _, _ = run_dirs
    m = json.loads((base / "a" / "manifest.json").read_text())
    m["outputs"]["metrics"]["d2s_seed0"] = "gone.jsonl"
    (tmp_path / "m").mkdir()
    (tmp_path / "m" / "manifest.json").write_text(json.dumps(m))
    with pytest.raises(FileNotFoundError, match="gone.jsonl"):
        cli.compare_command([tmp_path / "m"], tmp_path / "cmp")


def test_inspect_snapshot(run_dirs):
    base, _, a, _ = run_dirs
    info = cli.inspect_snapshot(base / "a" / a["outputs"]["snapshots"]["d2s_seed0"])
    assert info["extra"]["variant"] == "d2s" and 0 < info["overall_sparsity"] < 1


# -- bench / main --------------------------------------------------------------------------

def test_bench_default_grid_shape():
    rows = cli.bench_command(None, sizes=[16, 32, 48], sparsities=None)
    assert len(rows) == 3 * 4


def test_bench_zero_sparsity_ratio_is_one(tmp_path):
    rows = cli.bench_command(write_tiny(tmp_path), tmp_path / "out", sparsities=[0.0])
    assert [r["flop_ratio"] for r in rows] == ["1"]
    assert json.loads((tmp_path / "out" / "manifest.json").read_text())["outputs"]["bench"] == "bench.csv"


def test_main_unknown_variant_exits_2(tmp_path, capsys):
    with pytest.raises(SystemExit) as info:
        cli.main(["run", "--variant", "bogus", "--out", str(tmp_path)])
    assert info.value.code == 2


def test_main_missing_config_exits_1(tmp_path, capsys):
    assert cli.main(["run", "--config", str(tmp_path / "no.ini"), "--variant", "dense-only",
                     "--out", str(tmp_path)]) == 1
    assert "not found" in capsys.readouterr().err


def test_gen_stream(tmp_path):
    cfg = write_tiny(tmp_path)
    assert cli.main(["gen-stream", "--config", str(cfg), "--start", "0", "--stop", "256",
                     "--out", str(tmp_path / "s.npz")]) == 0
    assert (tmp_path / "s.npz").exists()


def test_console_script_help():
    out = subprocess.run(["d2sprune", "--help"], capture_output=True, text=True)
    assert out.returncode == 0 and "compare" in out.stdout


def test_shipped_benchmark_ini_matches_code():
    from pathlib import Path

    from d2sprune.config import load_config
    cfg, _ = load_config(Path(__file__).parent.parent / "configs" / "benchmark.ini")
    assert cfg == benchmark_config()


def test_dense_only_single_seed_manifest(tmp_path):
    m = cli.cmd_run(write_tiny(tmp_path), ["dense-only"], [0], tmp_path / "out")
    assert list(m["outputs"]["metrics"]) == ["dense-only_seed0"]
    recs = read_metrics(tmp_path / "out" / m["outputs"]["metrics"]["dense-only_seed0"])
    assert all(r.relative_ce == 0.0 for r in recs)


def test_every_output_listed_once(run_dirs):
    base, _, a, _ = run_dirs
    listed = [name for files in a["outputs"].values() for name in files.values()]
    assert len(listed) == len(set(listed))
    on_disk = {p.name for p in (base / "a").iterdir()} - {"manifest.json"}
    assert on_disk == set(listed)


def test_bench_repeat_flops_identical():
    keys = ("size", "sparsity", "flops_dense", "flops_sparse", "flop_ratio", "realized_sparsity")
    a, b = (cli.cmd_bench(None, sizes=[64], sparsities=[0.5, 0.9]) for _ in range(2))
    assert [{k: r[k] for k in keys} for r in a] == [{k: r[k] for k in keys} for r in b]
