"""Parameter and FLOP accounting per exit path, and expected inference cost.

Convention: one multiply-accumulate is one FLOP, activations are free,
and evaluating an exit's softmax plus entropy costs ``C + feature_dim``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .engine import _token_lists, gate_cost, infer_early_exit
from .errors import ConfigError
from .models import DNN


@dataclass
class ExitDistribution:
    probs: tuple

    def __post_init__(self):
        self.probs = tuple(float(p) for p in self.probs)
        if any(p < 0 for p in self.probs) or abs(math.fsum(self.probs) - 1.0) > 1e-9:
            raise ConfigError(f"exit distribution must be non-negative and sum to 1, got {self.probs}")

    def __len__(self):
        return len(self.probs)


@dataclass
class CostReport:
    per_exit: list  # dicts with cumulative_params, cumulative_flops
    baseline: dict
    seq_len_assumed: int = None

    @property
    def flops_per_exit(self):
        return [e["cumulative_flops"] for e in self.per_exit]

    def to_dict(self):
        return {
            "per_exit": [dict(e) for e in self.per_exit],
            "baseline": dict(self.baseline),
            "seq_len_assumed": self.seq_len_assumed,
        }


def dense_params(n_in, n_out):
    return n_in * n_out + n_out


def dense_flops(n_in, n_out):
    return n_in * n_out


def lstm_params(n_in, hidden):
    return 4 * (n_in * hidden + hidden * hidden + hidden)


def lstm_step_flops(n_in, hidden):
    return 4 * (n_in * hidden + hidden * hidden)


def _layer_dims(model):
    dims = [model.arch.embed_dim] + list(model.backbone.hidden_sizes)
    return list(zip(dims[:-1], dims[1:]))


def _check_exit(model, upto_exit):
    if not 1 <= upto_exit <= model.n_exits:
        raise IndexError(f"exit {upto_exit} outside 1..{model.n_exits}")


def _backbone_costs(model, seq_len):
    """(params, flops) of each backbone layer."""
    if model.kind == DNN:
        return [(dense_params(i, o), dense_flops(i, o)) for i, o in _layer_dims(model)]
    return [(lstm_params(i, h), seq_len * lstm_step_flops(i, h)) for i, h in _layer_dims(model)]


def count_params(model, upto_exit, include_embedding=False):
    """Parameters needed to reach a decision at ``upto_exit`` (1-based)."""
    _check_exit(model, upto_exit)
    total = model.arch.vocab_size * model.arch.embed_dim if include_embedding else 0
    for layer_params, _ in _backbone_costs(model, 1)[:upto_exit]:
        total += layer_params
    for head in model.heads[:upto_exit]:
        total += dense_params(head.feature_dim, head.n_classes)
    return total


def count_flops(model, upto_exit, seq_len=1):
    """FLOPs to reach a decision at ``upto_exit``; ``seq_len`` only matters for the LSTM."""
    _check_exit(model, upto_exit)
    if seq_len < 1:
        raise ConfigError(f"sequence length must be positive, got {seq_len}")
    total = 0
    for _, layer_flops in _backbone_costs(model, seq_len)[:upto_exit]:
        total += layer_flops
    for head in model.heads[:upto_exit]:
        total += dense_flops(head.feature_dim, head.n_classes) + gate_cost(head)
    return total


def baseline_cost(model, seq_len=1, include_embedding=False):
    """Same backbone with a single output layer after the last layer and no exit gates."""
    costs = _backbone_costs(model, seq_len)
    last = model.heads[-1]
    params = sum(p for p, _ in costs) + dense_params(last.feature_dim, last.n_classes)
    if include_embedding:
        params += model.arch.vocab_size * model.arch.embed_dim
    flops = sum(f for _, f in costs) + dense_flops(last.feature_dim, last.n_classes)
    return {"params": params, "flops": flops}


def cost_report(model, seq_len=1, include_embedding=False):
    per_exit = [
        {
            "exit": n,
            "cumulative_params": count_params(model, n, include_embedding),
            "cumulative_flops": count_flops(model, n, seq_len),
        }
        for n in range(1, model.n_exits + 1)
    ]
    return CostReport(
        per_exit,
        baseline_cost(model, seq_len, include_embedding),
        seq_len if model.kind != DNN else None,
    )


def expected_complexity(flops_per_exit, dist):
    """Exit-probability-weighted mean of the cumulative per-exit cost."""
    probs = dist.probs if isinstance(dist, ExitDistribution) else tuple(dist)
    if len(probs) != len(flops_per_exit):
        raise ConfigError(f"{len(flops_per_exit)} exit costs but {len(probs)} exit probabilities")
    return math.fsum(p * f for p, f in zip(probs, flops_per_exit))


def relative_savings(expected, baseline_flops):
    """Fractional reduction against the baseline; negative means more work."""
    if not baseline_flops > 0:
        raise ConfigError(f"baseline FLOPs must be positive, got {baseline_flops}")
    return (baseline_flops - expected) / baseline_flops


def exit_histogram(chosen_exits, n_exits):
    counts = np.bincount(np.asarray(chosen_exits, dtype=np.int64) - 1, minlength=n_exits)
    return ExitDistribution(counts / counts.sum())


def measure_exit_distribution(model, data):
    """Fraction of ``data`` egressing at each exit under early-exit routing."""
    token_lists = _token_lists(data)
    if not token_lists:
        raise ConfigError("cannot measure an exit distribution on an empty dataset")
    chosen = [infer_early_exit(model, tokens).chosen_exit for tokens in token_lists]
    return exit_histogram(chosen, model.n_exits)


def default_seq_len(token_lists, max_len):
    """Mean (truncated) utterance length, rounded up."""
    lengths = [min(len(t), max_len) for t in token_lists]
    return max(1, math.ceil(np.mean(lengths))) if lengths else 1
