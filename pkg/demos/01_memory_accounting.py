"""
Splitting a fixed memory budget
===============================

A replay memory of ``M`` samples is shared by exemplars of old classes and
training data of the classes arriving now. This walk-through shows how the
two action levels turn into exact integer sample counts.
"""

from fractions import Fraction

from rmm.memory import MemoryLedger, PhaseAllocation, apply_level1, apply_level2, apportion

# %%
# Level 1: the old/new split
# --------------------------
# The first incremental phase picks an absolute share for old classes; every
# later phase nudges it by -0.1, 0 or +0.1. Counts are rounded half up once,
# from the running total, so no rounding error accumulates.
ledger = MemoryLedger(7000)
for phase, action in enumerate([Fraction(3, 10), Fraction(1, 10), Fraction(0), Fraction(-1, 10)], 1):
    ledger = apply_level1(ledger, action, phase)
    print(f"phase {phase}: action {str(action):>5}  cumulative {ledger.cumulative_level1}  "
          f"old {ledger.old_budget:5d}  new {ledger.new_budget:5d}")

# %%
# Apportioning with largest remainders
# ------------------------------------
# Whenever a count has to be spread over several parts, each part gets the
# floor of its exact share and the leftover units go to the largest
# remainders (lowest index first on ties).
print(apportion(10, [1, 1, 1]))      # [4, 3, 3]
print(apportion(100, [50, 2, 2]))    # phase shares by class count

# %%
# Level 2: hard and easy classes
# ------------------------------
# Each old phase's classes are split by predictive entropy into a harder
# group A and an easier group B. The level-2 action is the share of that
# phase's exemplar memory that goes to group A; it is fixed once the phase
# has been through its first split.
history = [
    PhaseAllocation(0, (3, 7, 1), (0, 2), recorded_level2=Fraction(6, 10)),
    PhaseAllocation(1, (5,), (9,)),
]
for alloc in apply_level2(ledger.old_budget, history, Fraction(8, 10)):
    print(f"phase {alloc.phase_index}: ratio {alloc.recorded_level2}  "
          f"A={alloc.group_a_budget} B={alloc.group_b_budget}  {alloc.per_class_counts}")

# %%
# Classes that do not have enough retained samples are capped; the surplus is
# left unused rather than silently moved to other classes.
capped = apply_level2(100, [PhaseAllocation(0, (0,), (1,))], Fraction(1, 2), {0: 10, 1: 80})
print(capped[0].per_class_counts, "allocated", capped[0].allocated, "of 100")
