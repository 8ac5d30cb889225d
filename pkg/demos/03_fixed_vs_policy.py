"""
Learned allocation versus fixed splits
======================================

On the desk-scale benchmark (20 Gaussian classes, 10 initial classes and five
phases of two) a static old/new split is compared with a policy trained only
on pseudo tasks cut from the initial-phase data.

Set ``RMM_DEMO_EPOCHS`` to shorten training (default 300, about two minutes
per policy on one core).
"""

import os

import numpy as np

from rmm.taskgen import benchmark_task, phase0_source
from rmm.trainer import TrainConfig, crossval_fixed, evaluate_policy, run_fixed_baseline, train_rmm

task = benchmark_task()
seeds = 5

# %%
# Static splits
# -------------
# The default keeps a quarter of memory for exemplars; cross-validation tries
# every tenth and keeps the best.
default = run_fixed_baseline(task, 0.25, seeds)
best, reports = crossval_fixed(task, seeds)
for f, r in reports.items():
    print(f"fixed {float(f):.1f}: average accuracy {100 * r.average:.2f}")
print(f"default 0.25: {100 * default.average:.2f}   best fixed: {float(best)}")

# %%
# A learned policy
# ----------------
# Training sees only pseudo tasks built from the first phase's training data.
config = TrainConfig(epochs=int(os.environ.get("RMM_DEMO_EPOCHS", 300)))
state, history = train_rmm(config, phase0_source(task))
print("mean return, first/last 20 updates:",
      round(np.mean([h["mean_return"] for h in history[:20]]), 3),
      round(np.mean([h["mean_return"] for h in history[-20:]]), 3))

policy = evaluate_policy(state.params, task, seeds)
diff = np.array(policy.averages) - np.array(reports[best].averages)
print(f"policy: {100 * policy.average:.2f}  per-seed gain over best fixed: {np.round(100 * diff, 2)}")
