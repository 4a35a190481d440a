"""Multi-exit intent classifiers with entropy-gated early exit.

Submodules: ``tensor`` (autograd), ``models`` (backbones and exit heads),
``engine`` (joint loss, calibration, routing), ``cost`` (params/FLOPs),
``data`` (corpora), ``metrics``, ``persist`` (model files), ``cli``.
"""

__version__ = "0.1.0"

from .cost import (
    CostReport,
    ExitDistribution,
    count_flops,
    count_params,
    cost_report,
    expected_complexity,
    measure_exit_distribution,
    relative_savings,
)
from .data import Dataset, Example, Vocab, build_vocab, load_tsv, split, synth_generate, tokenize
from .engine import (
    AlphaSchedule,
    BranchyModel,
    ExitTrace,
    ThresholdSet,
    TrainConfig,
    alpha_weights,
    calibrate_thresholds,
    entropy,
    infer_early_exit,
    joint_loss,
    train_branchy,
)
from .metrics import accuracy, macro_f1
from .models import ArchSpec
from .persist import load_model, persist_model
from .tensor import Tensor
