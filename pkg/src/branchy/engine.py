"""Multi-exit training, entropy thresholds and early-exit routing."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import (
    CalibrationError,
    ConfigError,
    EmptyUtteranceError,
    NumericalError,
    StateError,
    TrainingError,
)
from .models import (
    DNN,
    ArchSpec,
    check_indices,
    dnn_layer,
    exit_logits,
    init_parameters,
    lstm_layer,
    mean_embed_batch,
)
from .tensor import Tensor

log = logging.getLogger(__name__)


def alpha_weights(n_exits, r_l=0.3, r_u=1.0):
    """Loss weight of exit n is ``r_l + (r_u - r_l) / n`` for n = 1..N."""
    if int(n_exits) != n_exits or n_exits < 1:
        raise ConfigError(f"exit count must be a positive integer, got {n_exits}")
    if not (0 < r_l <= r_u) or not (math.isfinite(r_l) and math.isfinite(r_u)):
        raise ConfigError(f"alpha bounds need 0 < r_l <= r_u, got r_l={r_l}, r_u={r_u}")
    # n = 1 written out so the first weight is exactly r_u
    return [r_u] + [r_l + (r_u - r_l) / n for n in range(2, int(n_exits) + 1)]


@dataclass
class AlphaSchedule:
    r_l: float
    r_u: float
    n_exits: int
    mode: str = "fixed"
    weights: Tensor = None

    def __post_init__(self):
        if self.mode not in ("fixed", "trainable"):
            raise ConfigError(f"alpha mode must be 'fixed' or 'trainable', got {self.mode!r}")
        if self.weights is None:
            self.weights = Tensor(alpha_weights(self.n_exits, self.r_l, self.r_u))
        else:
            alpha_weights(self.n_exits, self.r_l, self.r_u)
        if self.weights.shape != (self.n_exits,):
            raise ConfigError(f"{self.weights.shape[0]} alpha weights for {self.n_exits} exits")
        self.weights.requires_grad = self.mode == "trainable"

    @property
    def trainable(self):
        return self.mode == "trainable"

    @property
    def values(self):
        return self.weights.data.copy()

    def clamp(self):
        """Keep trainable weights inside [r_l / 10, 10 r_u]."""
        np.clip(self.weights.data, self.r_l / 10, 10 * self.r_u, out=self.weights.data)


@dataclass
class ThresholdSet:
    thresholds: tuple
    n_classes: int = None

    def __post_init__(self):
        self.thresholds = tuple(float(t) for t in self.thresholds)
        upper = math.log(self.n_classes) if self.n_classes else math.inf
        for t in self.thresholds:
            if not (0.0 <= t <= upper):
                raise CalibrationError(f"threshold {t} outside [0, {upper}]")

    def __len__(self):
        return len(self.thresholds)

    def __getitem__(self, n):
        return self.thresholds[n]


@dataclass
class ExitTrace:
    entropies: list
    chosen_exit: int  # 1-based
    prediction: int
    probs_at_exit: np.ndarray
    layers_evaluated: int = 0


@dataclass
class BranchyModel:
    arch: ArchSpec
    embedding: object
    backbone: object
    heads: list
    alphas: AlphaSchedule
    thresholds: ThresholdSet = None
    max_len: int = 32
    vocab: object = None
    label_names: list = None
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        if not (len(self.heads) == self.backbone.n_exits == self.alphas.n_exits):
            raise ConfigError(
                f"{len(self.heads)} heads, {self.backbone.n_exits} backbone exits, "
                f"{self.alphas.n_exits} alpha weights"
            )

    @classmethod
    def create(cls, arch, seed, r_l=0.3, r_u=1.0, alpha_mode="fixed", max_len=32):
        p = init_parameters(arch, seed)
        alphas = AlphaSchedule(r_l, r_u, len(arch.hidden_sizes), alpha_mode)
        return cls(arch, p.embedding, p.backbone, p.heads, alphas, max_len=max_len)

    @property
    def kind(self):
        return self.arch.kind

    @property
    def n_exits(self):
        return len(self.heads)

    @property
    def n_classes(self):
        return self.arch.n_classes

    @property
    def calibrated(self):
        return self.thresholds is not None

    def named_parameters(self):
        """Every numeric array in the model, trainable or not, in a fixed order."""
        yield "embedding", self.embedding.weights
        if self.kind == DNN:
            for k, (W, b) in enumerate(self.backbone.layers):
                yield f"layer{k}.W", W
                yield f"layer{k}.b", b
        else:
            for k, cell in enumerate(self.backbone.cells):
                for name, p in cell.named_parameters():
                    yield f"lstm{k}.{name}", p
        for k, head in enumerate(self.heads):
            yield f"head{k}.W", head.W
            yield f"head{k}.b", head.b
        yield "alphas", self.alphas.weights

    def parameters(self):
        """Tensors updated by training."""
        return [p for _, p in self.named_parameters() if p.requires_grad]


class FeatureStream:
    """Computes backbone features one layer at a time, only on request."""

    def __init__(self, model, token_lists):
        self.model = model
        self.layers_evaluated = 0
        self._features = []
        token_lists = [list(t)[: model.max_len] for t in token_lists]
        if model.kind == DNN:
            self._state = mean_embed_batch(token_lists, model.embedding)
            self._masks = None
        else:
            self._state, self._masks = _sequence_inputs(model, token_lists)

    def feature(self, n):
        """Feature for exit ``n`` (0-based), extending the forward pass as needed."""
        while len(self._features) <= n:
            k = len(self._features)
            if self.model.kind == DNN:
                self._state = dnn_layer(self._state, self.model.backbone.layers[k])
                self._features.append(self._state)
            else:
                self._state = lstm_layer(self._state, self.model.backbone.cells[k], self._masks)
                self._features.append(self._state[-1])
            self.layers_evaluated += 1
        return self._features[n]


def _sequence_inputs(model, token_lists):
    lengths = [len(t) for t in token_lists]
    if min(lengths) == 0:
        raise EmptyUtteranceError("utterance has no tokens")
    for t in token_lists:
        check_indices(t, model.embedding.vocab_size)
    steps = max(lengths)
    idx = np.zeros((len(token_lists), steps), dtype=np.int64)
    mask = np.zeros((len(token_lists), steps))
    for b, toks in enumerate(token_lists):
        idx[b, : len(toks)] = toks
        mask[b, : len(toks)] = 1.0
    emb = T.take_rows(model.embedding.weights, idx)
    inputs = [emb[:, t, :] for t in range(steps)]
    masks = None if mask.all() else [Tensor(mask[:, t : t + 1]) for t in range(steps)]
    return inputs, masks


def gate_cost(head):
    """Operations charged for softmax plus entropy at one exit."""
    return head.n_classes + head.feature_dim


def _exit_probs(stream, n, rows):
    head = stream.model.heads[n]
    probs = T.softmax(exit_logits(stream.feature(n), head)).data
    T.record_macs(rows * gate_cost(head))
    return probs


def forward_logits(model, token_lists):
    """Logits at every exit for a batch; records the graph for training."""
    stream = FeatureStream(model, token_lists)
    return [exit_logits(stream.feature(n), head) for n, head in enumerate(model.heads)]


def exit_probabilities(model, token_lists, batch_size=512):
    """Full forward pass: one [B x C] probability matrix per exit."""
    token_lists = list(token_lists)
    out = [[] for _ in range(model.n_exits)]
    with T.no_grad():
        for start in range(0, len(token_lists), batch_size):
            chunk = token_lists[start : start + batch_size]
            stream = FeatureStream(model, chunk)
            for n in range(model.n_exits):
                out[n].append(_exit_probs(stream, n, len(chunk)))
    return [np.concatenate(parts) for parts in out]


def joint_loss(logits_per_exit, label, schedule):
    """Alpha-weighted sum of per-exit cross-entropies.

    ``schedule`` is an :class:`AlphaSchedule` or a plain sequence of weights.
    With a batch of logits the per-exit cross-entropy is the batch mean.
    """
    if isinstance(schedule, AlphaSchedule):
        weights = schedule.weights if schedule.trainable else list(schedule.values)
    else:
        weights = list(schedule)
    if len(weights) != len(logits_per_exit):
        raise ConfigError(f"{len(logits_per_exit)} exits but {len(weights)} alpha weights")
    total = None
    for n, logits in enumerate(logits_per_exit):
        term = T.cross_entropy(T.softmax(logits), label) * weights[n]
        total = term if total is None else total + term
    return total


def entropy(probs):
    """Natural-log entropy of one distribution, with 0 ln 0 taken as 0."""
    p = np.asarray(probs.data if isinstance(probs, Tensor) else probs, dtype=np.float64)
    nz = p[p > 0]
    return max(0.0, float(-(nz * np.log(nz)).sum()))


def row_entropies(P):
    P = np.asarray(P, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(P > 0, P * np.log(np.where(P > 0, P, 1.0)), 0.0)
    return np.maximum(0.0, -terms.sum(axis=-1))


def _token_lists(data):
    if hasattr(data, "examples"):
        return [ex.tokens for ex in data.examples]
    return [list(t) for t in data]


def mean_exit_entropies(model, data):
    """Mean entropy at each exit under a full forward pass over ``data``."""
    probs = exit_probabilities(model, _token_lists(data))
    return [float(np.mean(row_entropies(P))) for P in probs]


def calibrate_thresholds(model, data):
    """Threshold of each exit = mean entropy of that exit over ``data``."""
    token_lists = _token_lists(data)
    if not token_lists:
        raise CalibrationError("cannot calibrate thresholds on an empty dataset")
    means = mean_exit_entropies(model, token_lists)
    upper = math.log(model.n_classes)
    return ThresholdSet([min(max(m, 0.0), upper) for m in means], model.n_classes)


def infer_early_exit(model, tokens, force_exit=None):
    """Scan exits 1..N and stop at the first whose entropy is below its threshold.

    The last exit is taken unconditionally.  With ``force_exit`` set, the
    scan ignores thresholds and stops at that (1-based) exit instead.
    """
    if force_exit is None:
        if model.thresholds is None:
            raise StateError("model has no calibrated thresholds")
        last = model.n_exits
    else:
        if not 1 <= force_exit <= model.n_exits:
            raise IndexError(f"exit {force_exit} outside 1..{model.n_exits}")
        last = force_exit
    entropies = []
    with T.no_grad():
        stream = FeatureStream(model, [tokens])
        for n in range(last):
            probs = _exit_probs(stream, n, 1)[0]
            h = entropy(probs)
            entropies.append(h)
            if force_exit is None and n < last - 1 and h < model.thresholds[n]:
                break
    chosen = len(entropies)
    return ExitTrace(entropies, chosen, int(np.argmax(probs)), probs, stream.layers_evaluated)


@dataclass
class TrainConfig:
    lr: float = 0.1
    epochs: int = 20
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.lr < 0:
            raise ConfigError(f"learning rate must be non-negative, got {self.lr}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be positive")


@dataclass
class EpochStats:
    epoch: int
    loss: float
    dev_accuracy: float
    dev_exit_accuracy: list


@dataclass
class TrainResult:
    model: BranchyModel
    history: list
    best_epoch: int


def exit_accuracies(model, data):
    probs = exit_probabilities(model, _token_lists(data))
    gold = np.array([ex.label for ex in data.examples])
    return [float(np.mean(np.argmax(P, axis=1) == gold)) for P in probs]


def train_branchy(model, train, dev, config):
    """Shuffled mini-batch SGD on the joint loss.

    Keeps the parameters of the epoch with the best final-exit dev
    accuracy (earliest epoch on ties).
    """
    if not train.examples or not dev.examples:
        raise ConfigError("training and dev sets must be non-empty")
    if len(train.label_names) != model.n_classes or list(dev.label_names) != list(train.label_names):
        raise ConfigError("train/dev label spaces do not match the model")
    rng = np.random.default_rng(config.seed)
    params = model.parameters()
    named = list(model.named_parameters())
    token_lists = [ex.tokens for ex in train.examples]
    labels = np.array([ex.label for ex in train.examples], dtype=np.int64)
    best = None
    history = []
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(token_lists))
        total, batches = 0.0, 0
        for b, start in enumerate(range(0, len(order), config.batch_size), start=1):
            idx = order[start : start + config.batch_size]
            try:
                logits = forward_logits(model, [token_lists[i] for i in idx])
                loss = joint_loss(logits, labels[idx], model.alphas)
                if not math.isfinite(loss.item()):
                    raise NumericalError("loss is not finite")
                loss.backward()
                for p in params:
                    if not np.all(np.isfinite(p.grad)):
                        raise NumericalError("gradient is not finite")
                T.sgd_step(params, config.lr)
            except NumericalError as err:
                raise TrainingError(f"training diverged: {err}", epoch, b) from err
            if model.alphas.trainable:
                model.alphas.clamp()
            total += loss.item()
            batches += 1
        accs = exit_accuracies(model, dev)
        stats = EpochStats(epoch, total / batches, accs[-1], accs)
        history.append(stats)
        log.info("epoch %d loss %.4f dev accuracy %.4f", epoch, stats.loss, stats.dev_accuracy)
        if best is None or stats.dev_accuracy > best[0]:
            best = (stats.dev_accuracy, epoch, [p.data.copy() for _, p in named])
    for (_, p), saved in zip(named, best[2]):
        p.data[...] = saved
    return TrainResult(model, history, best[1])
