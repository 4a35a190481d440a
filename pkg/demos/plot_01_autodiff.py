"""
Reverse-mode gradients on a tiny tape
=====================================

Every operation on a ``Tensor`` records how to push gradients back to its
inputs. Here we check a softmax classifier's gradient against the closed
form ``probs - onehot`` and against central differences.
"""

import numpy as np

from branchy import tensor as T
from branchy.tensor import Tensor

rng = np.random.default_rng(0)
x = Tensor(rng.normal(size=(1, 4)))
W = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
b = Tensor(np.zeros(3), requires_grad=True)

probs = T.softmax(T.affine(x, W, b))
loss = T.cross_entropy(probs, 2)
loss.backward()
print("loss", loss.item())

###############################################################################
# For softmax followed by cross-entropy the bias gradient is simply the
# predicted distribution minus the one-hot target.
print("bias grad  ", b.grad)
print("probs - 1hot", probs.data[0] - np.eye(3)[2])

###############################################################################
# Central differences agree with the tape to many digits.
h = 1e-6
numeric = np.zeros_like(W.data)
for i, j in np.ndindex(W.shape):
    old = W.data[i, j]
    W.data[i, j] = old + h
    up = T.cross_entropy(T.softmax(T.affine(x, W, b)), 2).item()
    W.data[i, j] = old - h
    down = T.cross_entropy(T.softmax(T.affine(x, W, b)), 2).item()
    W.data[i, j] = old
    numeric[i, j] = (up - down) / (2 * h)
print("max |analytic - numeric|", np.abs(W.grad - numeric).max())

###############################################################################
# The graph is released after ``backward``; calling it twice is an error.
try:
    loss.backward()
except Exception as err:
    print(type(err).__name__, err)
