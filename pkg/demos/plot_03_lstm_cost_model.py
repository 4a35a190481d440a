"""
Where the FLOPS go in a stacked LSTM
====================================

Analytic parameter and multiply-accumulate counts for each exit point,
checked against an instrumented forward pass.
"""

from branchy import ArchSpec, BranchyModel
from branchy import tensor as T
from branchy.cost import cost_report, count_flops
from branchy.engine import infer_early_exit

model = BranchyModel.create(ArchSpec("stacked-lstm", 500, 32, (32, 32, 32), 25), seed=0)
T_STEPS = 6
report = cost_report(model, seq_len=T_STEPS)

print("exit  params   flops")
for row in report.per_exit:
    print(f"{row['exit']:4d}  {row['cumulative_params']:6d}  {row['cumulative_flops']:7d}")
print("plain network (no side exits):", report.baseline)

###############################################################################
# One LSTM layer costs ``T * 4 * (in*h + h*h)`` multiply-accumulates; each
# exit adds a ``h * C`` head plus a small entropy gate. The counter inside
# the tensor library sees exactly the same numbers.
tokens = list(range(1, T_STEPS + 1))
for n in range(1, model.n_exits + 1):
    with T.count_macs() as counter:
        infer_early_exit(model, tokens, force_exit=n)
    print(f"exit {n}: counted {counter.total}, analytic {count_flops(model, n, seq_len=T_STEPS)}")
