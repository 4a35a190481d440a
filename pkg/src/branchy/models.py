"""Backbones with one feature per exit point, plus the exit heads.

Two architectures are provided: a ReLU feed-forward stack over the mean
word embedding, and a stacked unidirectional LSTM whose layer-k feature is
the hidden state at the last time step.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError, EmptyUtteranceError
from .tensor import Tensor

DNN = "dnn"
LSTM = "stacked-lstm"
KINDS = (DNN, LSTM)


@dataclass
class EmbeddingTable:
    weights: Tensor
    trainable: bool = True

    @property
    def vocab_size(self):
        return self.weights.shape[0]

    @property
    def dim(self):
        return self.weights.shape[1]


@dataclass
class DnnBackbone:
    layers: list  # (W, b) pairs, ReLU after each

    @property
    def hidden_sizes(self):
        return [W.shape[1] for W, _ in self.layers]

    @property
    def n_exits(self):
        return len(self.layers)

    @property
    def feature_dims(self):
        return self.hidden_sizes

    def parameters(self):
        for W, b in self.layers:
            yield W
            yield b


@dataclass
class LstmCellParams:
    W_i: Tensor
    W_f: Tensor
    W_o: Tensor
    W_g: Tensor
    U_i: Tensor
    U_f: Tensor
    U_o: Tensor
    U_g: Tensor
    b_i: Tensor
    b_f: Tensor
    b_o: Tensor
    b_g: Tensor

    def __post_init__(self):
        d, h = self.W_i.shape
        for gate in "ifog":
            if getattr(self, f"W_{gate}").shape != (d, h):
                raise DimensionError(f"W_{gate} has shape {getattr(self, f'W_{gate}').shape}, expected {(d, h)}")
            if getattr(self, f"U_{gate}").shape != (h, h):
                raise DimensionError(f"U_{gate} has shape {getattr(self, f'U_{gate}').shape}, expected {(h, h)}")
            if getattr(self, f"b_{gate}").shape != (h,):
                raise DimensionError(f"b_{gate} has shape {getattr(self, f'b_{gate}').shape}, expected {(h,)}")

    @property
    def input_dim(self):
        return self.W_i.shape[0]

    @property
    def hidden_dim(self):
        return self.W_i.shape[1]

    def parameters(self):
        for f in fields(self):
            yield getattr(self, f.name)

    def named_parameters(self):
        for f in fields(self):
            yield f.name, getattr(self, f.name)


@dataclass
class StackedLstmBackbone:
    cells: list

    def __post_init__(self):
        for k in range(1, len(self.cells)):
            if self.cells[k].input_dim != self.cells[k - 1].hidden_dim:
                raise DimensionError(
                    f"LSTM layer {k + 1} expects input {self.cells[k].input_dim}, "
                    f"layer {k} produces {self.cells[k - 1].hidden_dim}"
                )

    @property
    def n_exits(self):
        return len(self.cells)

    @property
    def hidden_sizes(self):
        return [c.hidden_dim for c in self.cells]

    @property
    def feature_dims(self):
        return self.hidden_sizes

    def parameters(self):
        for cell in self.cells:
            yield from cell.parameters()


@dataclass
class ExitHead:
    W: Tensor
    b: Tensor

    @property
    def feature_dim(self):
        return self.W.shape[0]

    @property
    def n_classes(self):
        return self.W.shape[1]

    def parameters(self):
        yield self.W
        yield self.b


@dataclass(frozen=True)
class ArchSpec:
    kind: str
    vocab_size: int
    embed_dim: int
    hidden_sizes: tuple
    n_classes: int
    trainable_embeddings: bool = True

    def __post_init__(self):
        object.__setattr__(self, "hidden_sizes", tuple(int(h) for h in self.hidden_sizes))
        if self.kind not in KINDS:
            raise ConfigError(f"unknown model kind {self.kind!r}; expected one of {KINDS}")
        for name in ("vocab_size", "embed_dim", "n_classes"):
            if int(getattr(self, name)) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.n_classes < 2:
            raise ConfigError("need at least 2 classes")
        if not self.hidden_sizes or any(h <= 0 for h in self.hidden_sizes):
            raise ConfigError(f"hidden sizes must be positive, got {self.hidden_sizes}")


def mean_embed(tokens, table):
    """Mean of the embedding rows of one utterance."""
    tokens = list(tokens)
    if not tokens:
        raise EmptyUtteranceError("utterance has no tokens")
    check_indices(tokens, table.vocab_size)
    return T.mean_rows(table.weights, [tokens])[0]


def mean_embed_batch(token_lists, table):
    for tokens in token_lists:
        if len(tokens) == 0:
            raise EmptyUtteranceError("utterance has no tokens")
        check_indices(tokens, table.vocab_size)
    return T.mean_rows(table.weights, token_lists)


def check_indices(tokens, vocab_size):
    arr = np.asarray(tokens)
    if arr.min() < 0 or arr.max() >= vocab_size:
        raise IndexError(f"token index out of range [0, {vocab_size})")


def dnn_layer(x, layer):
    W, b = layer
    return T.relu(T.affine(x, W, b))


def dnn_forward(x, backbone):
    """Post-ReLU activation of every hidden layer, in order."""
    features = []
    h = x
    for layer in backbone.layers:
        h = dnn_layer(h, layer)
        features.append(h)
    return features


def lstm_cell_step(x_t, h_prev, c_prev, cell, mask=None):
    """One LSTM step.

    ``mask`` (shape [batch x 1], entries 0/1) freezes the state of rows
    whose sequence has already ended.
    """
    if x_t.shape[-1] != cell.input_dim:
        raise DimensionError(f"LSTM input has shape {x_t.shape}, cell expects {cell.input_dim} features")
    if h_prev.shape[-1] != cell.hidden_dim or c_prev.shape != h_prev.shape:
        raise DimensionError(
            f"LSTM state shapes {h_prev.shape}/{c_prev.shape} do not match hidden size {cell.hidden_dim}"
        )

    def gate(W, U, b):
        return T.affine(x_t, W, b) + T.matmul(h_prev, U)

    i = T.sigmoid(gate(cell.W_i, cell.U_i, cell.b_i))
    f = T.sigmoid(gate(cell.W_f, cell.U_f, cell.b_f))
    o = T.sigmoid(gate(cell.W_o, cell.U_o, cell.b_o))
    g = T.tanh(gate(cell.W_g, cell.U_g, cell.b_g))
    c = f * c_prev + i * g
    h = o * T.tanh(c)
    if mask is not None:
        keep = 1.0 - mask.data
        h = h * mask + h_prev * Tensor(keep)
        c = c * mask + c_prev * Tensor(keep)
    return h, c


def lstm_layer(inputs, cell, masks=None):
    """Run one LSTM layer over a sequence; returns the full hidden sequence."""
    if not inputs:
        raise EmptyUtteranceError("sequence has no time steps")
    batch_shape = inputs[0].shape[:-1]
    h = Tensor(np.zeros(batch_shape + (cell.hidden_dim,)))
    c = Tensor(np.zeros(batch_shape + (cell.hidden_dim,)))
    outputs = []
    for t, x_t in enumerate(inputs):
        h, c = lstm_cell_step(x_t, h, c, cell, None if masks is None else masks[t])
        outputs.append(h)
    return outputs


def stacked_lstm_forward(inputs, backbone, masks=None):
    """Last-time-step hidden state of every stacked layer, in order."""
    features = []
    seq = list(inputs)
    for cell in backbone.cells:
        seq = lstm_layer(seq, cell, masks)
        features.append(seq[-1])
    return features


def exit_logits(feature, head):
    return T.affine(feature, head.W, head.b)


def glorot(rng, fan_in, fan_out):
    s = np.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-s, s, size=(fan_in, fan_out)), requires_grad=True)


def zeros(n, value=0.0):
    return Tensor(np.full(n, value, dtype=np.float64), requires_grad=True)


@dataclass
class Parameters:
    embedding: EmbeddingTable
    backbone: object
    heads: list = field(default_factory=list)


def init_parameters(spec, seed):
    """Glorot-uniform weights, zero biases, forget-gate bias 1.0."""
    rng = np.random.default_rng(seed)
    emb_scale = np.sqrt(6.0 / (spec.vocab_size + spec.embed_dim))
    embedding = EmbeddingTable(
        Tensor(
            rng.uniform(-emb_scale, emb_scale, size=(spec.vocab_size, spec.embed_dim)),
            requires_grad=spec.trainable_embeddings,
        ),
        trainable=spec.trainable_embeddings,
    )
    dims = (spec.embed_dim,) + spec.hidden_sizes
    if spec.kind == DNN:
        backbone = DnnBackbone(
            [(glorot(rng, dims[k], dims[k + 1]), zeros(dims[k + 1])) for k in range(len(dims) - 1)]
        )
    else:
        cells = []
        for k in range(len(dims) - 1):
            d, h = dims[k], dims[k + 1]
            kw = {f"W_{g}": glorot(rng, d, h) for g in "ifog"}
            kw.update({f"U_{g}": glorot(rng, h, h) for g in "ifog"})
            kw.update({f"b_{g}": zeros(h, 1.0 if g == "f" else 0.0) for g in "ifog"})
            cells.append(LstmCellParams(**kw))
        backbone = StackedLstmBackbone(cells)
    heads = [ExitHead(glorot(rng, h, spec.n_classes), zeros(spec.n_classes)) for h in spec.hidden_sizes]
    return Parameters(embedding, backbone, heads)
