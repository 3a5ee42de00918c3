"""Auxiliary-mask pruning and dense-to-sparse incremental training at desk scale."""

from .config import BenchConfig, benchmark_config, content_hash, dump_config, load_config, parse_config
from .datastream import DataStream, DriftSchedule, StreamConfig, TeacherModel, drift_distance, sample_batch, teacher_at
from .errors import (ComparisonError, ConfigError, D2SError, DataError, ProtocolError, ScheduleError,
                     StateError)
from .kernels import BenchResult, CsrMatrix, bench, sparse_forward, spmm, spmv, to_csr
from .metrics import (MetricsRecord, histogram_report, lookahead_window_ce, normalized_ce, relative_ce,
                      sparsity_vs_structure_report)
from .nn import (Batch, DenseParam, EmbeddingTable, MaskedLayer, ModelConfig, RecModel, adagrad_step,
                 ce_loss, dot_interaction, load_snapshot, save_snapshot)
from .orchestrator import (D2SConfig, EvalConfig, Experiment, ExperimentConfig, JobLog, SnapshotStore,
                           d2s_schedule, divergence_monitor, incremental_step, run_experiment)
from .pruning import (ImportanceScore, Pruner, PruneConfig, apply_mask, aux_step, finetune_step_fixed_mask,
                      magnitude_scores, momentum_update, mop_importance, mop_refresh, mp_ratio_at, rank_prune,
                      sparsity, taylor_scores)

__version__ = "0.1.0"
