"""
Expected inference cost under an exit distribution
==================================================

If a fraction p_n of queries leave at exit n, the average cost is the
p-weighted sum of the per-exit cumulative costs.
"""

import numpy as np

from branchy.cost import expected_complexity, relative_savings

K = 1000.0
dnn_flops = np.array([32.5, 38.7, 40.6]) * K
lstm_flops = np.array([23.1, 46.1, 69.2]) * K
dnn_share = [0.2780, 0.0192, 0.7020]
lstm_share = [0.1532, 0.0071, 0.8397]

dnn = expected_complexity(dnn_flops, dnn_share)
lstm = expected_complexity(lstm_flops, lstm_share)
print(f"feed-forward: {dnn / K:.2f}K expected vs {dnn_flops[-1] / K:.1f}K at the last exit")
print(f"stacked LSTM: {lstm / K:.2f}K expected vs {lstm_flops[-1] / K:.1f}K at the last exit")
print(f"LSTM saving: {100 * relative_savings(lstm, lstm_flops[-1]):.1f}%")

###############################################################################
# Moving probability mass to shallower exits can only lower the cost.
for first in (0.0, 0.15, 0.3, 0.6):
    share = [first, 0.0, 1 - first]
    print(f"p1 = {first:.2f}: {expected_complexity(lstm_flops, share) / K:.2f}K")
