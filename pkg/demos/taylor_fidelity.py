"""How well first-order Taylor scores rank single-weight removals.

At initialisation the ranking agrees well with brute-force zeroing. After
training, curvature terms matter more and the agreement drops.

    python demos/taylor_fidelity.py
"""

import sys
from pathlib import Path

import numpy as np
from scipy.stats import spearmanr

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "tests"))
from oracles import brute_force_deltas  # noqa: E402

from d2sprune import DataStream, DriftSchedule, ModelConfig, RecModel, StreamConfig, taylor_scores  # noqa: E402

for trained in (0, 20_000):
    print(f"after {trained} training samples")
    for seed in range(3):
        sc = StreamConfig(dense_dim=4, table_rows=(50, 40), multiplicity=(2, 1), teacher_bottom=(4, 3),
                          teacher_top=(4, 1), seed=seed)
        stream = DataStream(sc, DriftSchedule(anchor_times=(0,), seed=seed))
        model = RecModel(ModelConfig(dense_dim=4, bottom=(4,), table_rows=(50, 40), emb_dim=4, top=(8, 1),
                                     seed=seed))
        for b in stream.batches(0, trained, 64):
            model.train_step(b, 0.05)
        batch = stream.batch(20_000, 256)
        model.forward(batch)
        model.backward(batch)
        rho = [spearmanr(taylor_scores(l, l.grad_masked).scores.ravel(),
                         brute_force_deltas(model, l, batch).ravel())[0] for l in model.masked_layers()]
        print(f"  seed {seed}: rho per layer {np.round(rho, 3).tolist()}")
