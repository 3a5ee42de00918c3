"""Small end-to-end walk-through: one seed, every variant, a tiny stream.

Runs in well under a minute. Writes to ./demo_out unless a directory is given.

    python demos/quickstart.py [out_dir]
"""

import sys
from pathlib import Path

from d2sprune import D2SConfig, DriftSchedule, EvalConfig, ExperimentConfig, ModelConfig, PruneConfig, StreamConfig
from d2sprune.cli import compare_command, run_command
from d2sprune.config import dump_config

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out")
out.mkdir(parents=True, exist_ok=True)

# a stream and model small enough to simulate 12 windows in seconds
cfg = ExperimentConfig(
    model=ModelConfig(dense_dim=4, bottom=(8, 4), table_rows=(50, 40), emb_dim=4, top=(8, 4, 1)),
    stream=StreamConfig(dense_dim=4, table_rows=(50, 40), multiplicity=(2, 1), teacher_bottom=(4, 3),
                        teacher_top=(4, 1), chunk_size=256, batch_size=64),
    drift=DriftSchedule(anchor_times=(0, 10_000, 20_000)),
    prune=PruneConfig(lam=2e-2, prune_phase_samples=1000, refresh_interval=500),
    d2s=D2SConfig(delta=1000, horizon=12_000, r=4, p=2, pretrain_samples=4000),
    eval=EvalConfig(window=500),
)
ini = out / "quickstart.ini"
ini.write_text(dump_config(cfg))

variants = ["dense-only", "fixed-mask", "fixed-mask:MP", "aux-adapt", "mop-adapt", "d2s"]
manifest = run_command(ini, variants, [0], out / "run")
result = compare_command([out / "run"], out / "compare")

print(f"{'variant':<16} {'last-window rel CE':>18} {'sparsity':>9}")
for row in result["last_window"]:
    print(f"{row['label']:<16} {100 * row['last_window_relative_ce']:>17.2f}% {row['final_sparsity']:>9.3f}")
print(f"\ncurves and scatter plots in {out / 'compare'}")
