"""AUX ablations on the benchmark pretraining + pruning phase.

Compares the full rescaled update against a reduced form without the
magnitude term (w2 = 0) and against the signed, un-normalised update. Reported only; the
direction is informative, not an acceptance gate.

    python demos/ablation.py [seed]
"""

import dataclasses
import sys

from d2sprune import DataStream, Pruner, benchmark_config, lookahead_window_ce, relative_ce, sparsity
from d2sprune.orchestrator import pretrain

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 0
cfg = benchmark_config().for_seed(seed)
stream = DataStream(cfg.stream, cfg.drift)
print("pretraining dense model ...", flush=True)
dense = pretrain(cfg, stream)
phase = cfg.prune.prune_phase_samples
window = (0, cfg.d2s.p * cfg.d2s.delta)

variants = {
    "AUX (w1=w2=0.5)": cfg.prune,
    "AUX w2=0": dataclasses.replace(cfg.prune, w1=1.0, w2=0.0),
}
# The signed update is dominated by the uniform penalty: all aux values fall at nearly the
# same rate, so sparsity jumps from 0 to 1 around a threshold lam instead of ranking weights.
for lam in (0.02, 0.025, 0.03):
    variants[f"vanilla lam={lam:g}"] = dataclasses.replace(cfg.prune, vanilla=True, rescale=False,
                                                           aux_lr=0.1, lam=lam)

# dense reference trained over the same window
ref = dense.copy()
for b in stream.batches(*window, cfg.stream.batch_size):
    ref.train_step(b, cfg.d2s.lr)
ref.time = window[1]
ref_ce = lookahead_window_ce(ref, stream, window[1], cfg.eval.window)

for name, pcfg in variants.items():
    model = dense.copy()
    for layer in model.masked_layers():
        layer.reset_mask_state()
    pruner = Pruner(pcfg, cfg.d2s.lr)
    for b in stream.batches(*window, cfg.stream.batch_size):
        if b.virtual_time < phase:
            pruner.step(model, b)
        else:
            model.train_step(b, cfg.d2s.lr)
    model.time = window[1]
    ce = lookahead_window_ce(model, stream, window[1], cfg.eval.window)
    print(f"{name:<18} sparsity {sparsity(model):.3f}  relative CE {100 * relative_ce(ce, ref_ce):+.2f}%")
