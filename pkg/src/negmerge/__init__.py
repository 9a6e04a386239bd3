"""Checkpoint-level task-vector merging with sign-consensus masking.

Core surface: a binary checkpoint container (``tensor_store``), task-vector
arithmetic with a sparse lookup form (``task_vector``), pool merging
strategies (``merging``), one-model-at-a-time consensus accumulation
(``consensus_stream``), sparsity/coefficient analytics (``analysis``), and a
self-contained unlearning experiment harness (``harness``).
"""

from . import analysis, consensus_stream, errors, harness, merging, task_vector, tensor_store
from .analysis import GroupingRule, LambdaSweep, SparsityReport, sparsity_report, sweep_lambda
from .consensus_stream import SignConsensusState, finalize, init, load_state, save_state, update
from .kernels import BACKEND
from .merging import (
    ConsensusMask,
    MergeSpec,
    consensus_mask,
    greedy_soup,
    merge,
    merge_conflict,
    merge_magmax,
    merge_negmerge,
    merge_ties,
    merge_uniform,
)
from .task_vector import (
    NegationConfig,
    SparseTaskVector,
    TaskVector,
    apply,
    apply_sparse,
    densify,
    diff,
    load_sparse,
    load_task_vector,
    save_sparse,
    sparsify,
)
from .tensor_store import Schema, TensorMap, check_compatible, load, save, schema_of

__version__ = "0.1.0"
