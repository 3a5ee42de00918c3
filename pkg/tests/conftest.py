import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import settings

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile("default", max_examples=40, deadline=None)
settings.load_profile("default")

from d2sprune.datastream import DriftSchedule, StreamConfig  # noqa: E402
from d2sprune.nn import Batch, ModelConfig, RecModel  # noqa: E402


def toy_config(**kw) -> ModelConfig:
    base = dict(dense_dim=3, bottom=(4, 2), table_rows=(6, 5), emb_dim=2, top=(3, 1), seed=0)
    base.update(kw)
    return ModelConfig(**base)


def random_batch(cfg: ModelConfig, n: int, seed: int = 0, mult=2) -> Batch:
    rng = np.random.default_rng(seed)
    return Batch(
        rng.standard_normal((n, cfg.dense_dim)),
        tuple(rng.integers(0, r, size=(n, mult)) for r in cfg.table_rows),
        (rng.random(n) < 0.5).astype(float),
    )


def live_model(cfg: ModelConfig, seed: int = 0) -> RecModel:
    """Model with positive random biases so no ReLU is dead on typical inputs."""
    model = RecModel(cfg)
    rng = np.random.default_rng(seed + 100)
    for layer in model.layers:
        layer.bias[...] = rng.uniform(0.1, 0.5, size=layer.bias.shape)
    return model


@pytest.fixture
def toy_cfg():
    return toy_config()


@pytest.fixture
def small_stream_cfg():
    return StreamConfig(dense_dim=4, table_rows=(50, 40), multiplicity=(2, 1), teacher_bottom=(4, 3),
                        teacher_top=(4, 1), chunk_size=256, batch_size=64)


@pytest.fixture
def small_schedule():
    return DriftSchedule(anchor_times=(0, 10_000, 20_000), drift_magnitude=0.5, popularity_drift=0.2)


# -- acceptance reporting ---------------------------------------------------------------

ACCEPTANCE: dict[int, str] = {}


@pytest.fixture
def report(capsys):
    """Record and print one PASS/FAIL line for an acceptance criterion."""

    def emit(number: int, ok: bool, detail: str) -> bool:
        line = f"ACCEPTANCE {number:>2} {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE[number] = line
        with capsys.disabled():
            print("\n" + line)
        return ok

    return emit


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
