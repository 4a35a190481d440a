"""Utterance/intent datasets: tokenizing, vocabularies, TSV and embedding files,
splitting, and a synthetic intent corpus."""

from __future__ import annotations

import logging
import math
from collections import Counter
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, LabelError, ParseError
from .models import EmbeddingTable
from .tensor import Tensor

log = logging.getLogger(__name__)

UNK = "<unk>"
PUNCTUATION = ".,!?;:'\""


def tokenize(text):
    """Lowercase, split on whitespace, strip edge punctuation, drop empties."""
    tokens = (tok.strip(PUNCTUATION) for tok in text.lower().split())
    return [tok for tok in tokens if tok]


@dataclass
class Vocab:
    index_to_token: list  # index 0 is the unknown token

    def __post_init__(self):
        self.index_to_token = list(self.index_to_token)
        if not self.index_to_token or self.index_to_token[0] != UNK:
            self.index_to_token.insert(0, UNK)
        self.token_to_index = {tok: i for i, tok in enumerate(self.index_to_token)}
        if len(self.token_to_index) != len(self.index_to_token):
            raise ConfigError("vocabulary contains duplicate tokens")

    @property
    def size(self):
        return len(self.index_to_token)

    def __len__(self):
        return self.size

    def __eq__(self, other):
        return isinstance(other, Vocab) and self.index_to_token == other.index_to_token

    def index(self, token):
        return self.token_to_index.get(token, 0)

    def encode(self, tokens):
        return [self.token_to_index.get(tok, 0) for tok in tokens]


def build_vocab(corpus, min_count=1):
    """Tokens seen at least ``min_count`` times, most frequent first, ties alphabetical."""
    if min_count < 1:
        raise ConfigError(f"min_count must be at least 1, got {min_count}")
    counts = Counter(tok for tokens in corpus for tok in tokens)
    counts.pop(UNK, None)
    kept = sorted((t for t, c in counts.items() if c >= min_count), key=lambda t: (-counts[t], t))
    return Vocab([UNK] + kept)


@dataclass(frozen=True)
class Example:
    tokens: tuple
    label: int
    raw_text: str


@dataclass
class Dataset:
    examples: list
    vocab: Vocab
    label_names: list
    max_len: int = 32
    skipped: int = field(default=0, compare=False)

    def __len__(self):
        return len(self.examples)

    @property
    def n_classes(self):
        return len(self.label_names)

    @property
    def token_lists(self):
        return [list(ex.tokens) for ex in self.examples]

    @property
    def labels(self):
        return np.array([ex.label for ex in self.examples], dtype=np.int64)

    def subset(self, indices):
        return replace(self, examples=[self.examples[i] for i in indices], skipped=0)


def make_dataset(pairs, vocab=None, label_names=None, max_len=32, min_count=1):
    """Build a Dataset from (utterance, label-name) pairs.

    With ``label_names`` given the label set is frozen; otherwise labels are
    indexed in order of first appearance.
    """
    rows, skipped = [], 0
    for text, label in pairs:
        tokens = tokenize(text)
        if not tokens:
            skipped += 1
            continue
        rows.append((text, tokens, label))
    if vocab is None:
        vocab = build_vocab([tokens for _, tokens, _ in rows], min_count)
    frozen = label_names is not None
    labels = list(label_names) if frozen else []
    label_index = {name: i for i, name in enumerate(labels)}
    examples = []
    for text, tokens, label in rows:
        if label not in label_index:
            if frozen:
                raise LabelError(f"label {label!r} is not in the model's label set")
            label_index[label] = len(labels)
            labels.append(label)
        examples.append(Example(tuple(vocab.encode(tokens)), label_index[label], text))
    if skipped:
        log.warning("skipped %d utterances with no tokens", skipped)
    return Dataset(examples, vocab, labels, max_len, skipped)


def read_tsv(path):
    """(utterance, label) pairs from an ``utterance<TAB>label`` file."""
    pairs = []
    with open(path, encoding="utf-8", newline="") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n").rstrip("\r")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise ParseError(f"expected 'utterance<TAB>label', got {len(parts) - 1} tabs", lineno)
            text, label = parts
            if not label.strip():
                raise ParseError("empty label", lineno)
            pairs.append((text, label.strip()))
    return pairs


def load_tsv(path, vocab=None, label_names=None, max_len=32, min_count=1):
    """Load a TSV dataset, building a vocabulary unless one is supplied."""
    return make_dataset(read_tsv(path), vocab, label_names, max_len, min_count)


def save_tsv(dataset, path):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for ex in dataset.examples:
            fh.write(f"{ex.raw_text}\t{dataset.label_names[ex.label]}\n")


def random_embedding_table(vocab_size, dim, seed=0, trainable=True):
    rng = np.random.default_rng(seed)
    s = math.sqrt(6.0 / (vocab_size + dim))
    weights = Tensor(rng.uniform(-s, s, size=(vocab_size, dim)), requires_grad=trainable)
    return EmbeddingTable(weights, trainable)


def load_embeddings(path, vocab, dim, table=None, seed=0):
    """Overwrite rows of ``table`` from a ``token v1 .. vD`` text file.

    Returns ``(table, coverage)`` where coverage counts distinct vocabulary
    tokens (excluding the unknown token) found in the file.  Rows for tokens
    not in the file keep their current values.
    """
    if table is None:
        table = random_embedding_table(vocab.size, dim, seed)
    if table.dim != dim or table.vocab_size != vocab.size:
        raise ConfigError(f"embedding table shape {table.weights.shape} != {(vocab.size, dim)}")
    covered = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != dim + 1:
                raise ParseError(f"expected {dim} values after the token, got {len(parts) - 1}", lineno)
            try:
                values = [float(v) for v in parts[1:]]
            except ValueError as err:
                raise ParseError(str(err), lineno) from None
            idx = vocab.token_to_index.get(parts[0], 0)
            if idx == 0:
                continue
            table.weights.data[idx] = values
            covered.add(idx)
    return table, len(covered)


def synth_generate(n_classes, n_per_class, vocab_per_class=20, noise=0.0, seed=0):
    """Synthetic intent corpus.

    Every class owns a disjoint set of signature words.  An utterance is 3-8
    words drawn from its class's set; each word is independently swapped for
    a word of a different class with probability ``noise``.
    """
    if n_classes < 2 or n_per_class < 1 or vocab_per_class < 1:
        raise ConfigError("need n_classes >= 2, n_per_class >= 1 and vocab_per_class >= 1")
    if not 0 <= noise < 1:
        raise ConfigError(f"noise must lie in [0, 1), got {noise}")
    rng = np.random.default_rng(seed)
    words = [[f"c{c}w{j}" for j in range(vocab_per_class)] for c in range(n_classes)]
    labels = [f"intent_{c}" for c in range(n_classes)]
    pairs = []
    for c in range(n_classes):
        for _ in range(n_per_class):
            length = int(rng.integers(3, 9))
            utterance = []
            for _ in range(length):
                if noise and rng.random() < noise:
                    other = int(rng.integers(n_classes - 1))
                    other += other >= c
                    utterance.append(words[other][int(rng.integers(vocab_per_class))])
                else:
                    utterance.append(words[c][int(rng.integers(vocab_per_class))])
            pairs.append((" ".join(utterance), labels[c]))
    return make_dataset(pairs, label_names=labels)


def split(data, fractions=(0.8, 0.1, 0.1), seed=0):
    """Shuffled train/dev/test partition; dev and test sizes are floored, the rest is train."""
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or any(f <= 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigError(f"split fractions must be three positive numbers summing to 1, got {fractions}")
    n = len(data.examples)
    order = np.random.default_rng(seed).permutation(n)
    n_dev = int(math.floor(fractions[1] * n + 1e-9))
    n_test = int(math.floor(fractions[2] * n + 1e-9))
    n_train = n - n_dev - n_test
    if min(n_train, n_dev, n_test) < 1:
        raise ConfigError(f"split of {n} examples by {fractions} leaves an empty part")
    train = data.subset(order[:n_train])
    dev = data.subset(order[n_train : n_train + n_dev])
    test = data.subset(order[n_train + n_dev :])
    return train, dev, test

