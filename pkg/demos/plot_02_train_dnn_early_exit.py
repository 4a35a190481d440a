"""
Training a three-exit feed-forward classifier
=============================================

A synthetic intent corpus, a three-layer network with a classifier after
every layer, joint training, entropy thresholds and early-exit inference.
"""

import numpy as np

from branchy import (
    ArchSpec,
    BranchyModel,
    TrainConfig,
    calibrate_thresholds,
    infer_early_exit,
    split,
    synth_generate,
    train_branchy,
)
from branchy.cost import exit_histogram

data = synth_generate(n_classes=6, n_per_class=80, vocab_per_class=12, noise=0.3, seed=1)
train, dev, test = split(data, (0.8, 0.1, 0.1), seed=1)
print(len(train), "train /", len(dev), "dev /", len(test), "test utterances")
print("example:", train.examples[0].raw_text, "->", train.label_names[train.examples[0].label])

###############################################################################
# Each exit's loss is weighted by a decaying schedule; the first exit gets
# the largest weight.
model = BranchyModel.create(ArchSpec("dnn", data.vocab.size, 16, (16, 16, 16), data.n_classes), seed=0)
print("exit weights", np.round(model.alphas.values, 4))

result = train_branchy(model, train, dev, TrainConfig(lr=0.5, epochs=15, batch_size=32, seed=0))
for stats in result.history[::3]:
    print(f"epoch {stats.epoch:2d}  loss {stats.loss:.4f}  dev {stats.dev_accuracy:.3f}")
print("kept epoch", result.best_epoch)

###############################################################################
# The threshold for exit n is the mean entropy that exit produces on the
# training data when every exit is computed.
model.thresholds = calibrate_thresholds(model, train)
print("thresholds", np.round(model.thresholds.thresholds, 4))

###############################################################################
# At inference each exit is tried in order and the first one whose entropy
# falls below its threshold answers.
traces = [infer_early_exit(model, ex.tokens) for ex in test.examples]
early = np.mean([t.prediction == ex.label for t, ex in zip(traces, test.examples)])
final = np.mean([infer_early_exit(model, ex.tokens, force_exit=3).prediction == ex.label
                 for ex in test.examples])
dist = exit_histogram([t.chosen_exit for t in traces], model.n_exits)
print(f"early-exit accuracy {early:.3f}, final-exit accuracy {final:.3f}")
print("share leaving at each exit", np.round(dist.probs, 3))
