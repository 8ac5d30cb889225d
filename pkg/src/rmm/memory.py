"""Integer accounting for a fixed replay-memory budget.

All fractions are kept as :class:`fractions.Fraction` and turned into sample
counts once, at the end, so budgets are conserved exactly.
"""

from __future__ import annotations

import math

from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Mapping, Sequence

TENTH = Fraction(1, 10)
LEVEL1_INITIAL_VALUES = tuple(Fraction(k, 10) for k in range(1, 10))
LEVEL1_DELTA_VALUES = (Fraction(-1, 10), Fraction(0), Fraction(1, 10))
LEVEL2_VALUES = LEVEL1_INITIAL_VALUES


class ContractViolation(RuntimeError):
    """A caller broke a documented precondition (not a bad user value)."""


def as_fraction(value) -> Fraction:
    if isinstance(value, Fraction):
        return value
    if isinstance(value, float):
        # floats like 0.3 are meant as their shortest decimal repr
        return Fraction(repr(value))
    return Fraction(value)


def round_half_up(x: Fraction) -> int:
    return (x + Fraction(1, 2)).__floor__()


def apportion(total: int, weights: Sequence) -> list[int]:
    """Largest-remainder apportionment of ``total`` over ``weights``.

    Every output is the floor or ceiling of its exact proportional share and
    the outputs sum to ``total``. Remainder ties go to the lowest index.

    >>> apportion(10, [1, 1, 1])
    [4, 3, 3]
    """
    if total < 0:
        raise ValueError(f"total must be non-negative, got {total}")
    if all(type(w) is int for w in weights):
        ints = list(weights)
        n = len(ints)
        if n and ints[0] > 0 and ints.count(ints[0]) == n:
            # equal remainders everywhere: the first ``extra`` indices get one more
            base, extra = divmod(total, n)
            return [base + 1] * extra + [base] * (n - extra)
    else:
        ws = [as_fraction(w) for w in weights]
        # common denominator: quotas and remainders become integer comparisons
        den = 1
        for w in ws:
            den = den * w.denominator // math.gcd(den, w.denominator)
        ints = [int(w * den) for w in ws]
    if any(w < 0 for w in ints):
        raise ValueError("weights must be non-negative")
    wsum = sum(ints)
    if wsum == 0:
        raise ValueError("at least one weight must be positive")
    # quota_j = total * w_j / wsum = counts_j + rems_j / wsum
    counts, rems = zip(*(divmod(total * w, wsum) for w in ints))
    counts = list(counts)
    left = total - sum(counts)
    # stable sort keeps lowest index first among equal remainders
    order = sorted(range(len(ints)), key=lambda j: -rems[j])
    for j in order[:left]:
        counts[j] += 1
    return counts


def validate_level1(value, phase_index: int) -> Fraction:
    v = as_fraction(value)
    if phase_index < 1:
        raise ContractViolation("level-1 actions start at phase 1")
    legal = LEVEL1_INITIAL_VALUES if phase_index == 1 else LEVEL1_DELTA_VALUES
    if v not in legal:
        raise ValueError(f"level-1 action {value} not allowed in phase {phase_index}")
    return v


def validate_level2(value) -> Fraction:
    v = as_fraction(value)
    if v not in LEVEL2_VALUES:
        raise ValueError(f"level-2 action {value} is not one of 0.1, ..., 0.9")
    return v


def is_feasible_level1(cumulative, candidate) -> bool:
    """True iff ``cumulative + candidate`` stays inside (0, 1]."""
    c = as_fraction(cumulative) + as_fraction(candidate)
    return 0 < c <= 1


@dataclass(frozen=True)
class PhaseAllocation:
    phase_index: int
    group_a_classes: tuple[int, ...]
    group_b_classes: tuple[int, ...]
    recorded_level2: Fraction | None = None
    group_a_budget: int = 0
    group_b_budget: int = 0
    per_class_counts: Mapping[int, int] = field(default_factory=dict)

    @property
    def class_count(self) -> int:
        return len(self.group_a_classes) + len(self.group_b_classes)

    @property
    def allocated(self) -> int:
        return sum(self.per_class_counts.values())


@dataclass(frozen=True)
class ActionHistory:
    level1_values: tuple[Fraction, ...] = ()
    level2_values: tuple[Fraction, ...] = ()

    def append(self, level1, level2) -> "ActionHistory":
        i = len(self.level1_values) + 1
        return ActionHistory(
            self.level1_values + (validate_level1(level1, i),),
            self.level2_values + (validate_level2(level2),),
        )


@dataclass(frozen=True)
class MemoryLedger:
    """Split of ``total_budget`` between exemplars (old) and new data.

    ``cumulative_level1`` is zero only before the first level-1 action.
    """

    total_budget: int
    cumulative_level1: Fraction = Fraction(0)
    old_budget: int = 0
    new_budget: int = 0
    phase_allocations: tuple[PhaseAllocation, ...] = ()

    def __post_init__(self):
        if self.total_budget < 0:
            raise ValueError("total budget must be non-negative")

    @classmethod
    def with_fraction(cls, total_budget: int, fraction) -> "MemoryLedger":
        """Ledger for an arbitrary exact old-memory fraction in (0, 1]."""
        return cls(total_budget)._set_cumulative(as_fraction(fraction))

    def _set_cumulative(self, c: Fraction) -> "MemoryLedger":
        if not 0 < c <= 1:
            raise ContractViolation(f"cumulative level-1 value {c} outside (0, 1]")
        old = round_half_up(c * self.total_budget)
        return replace(self, cumulative_level1=c, old_budget=old,
                       new_budget=self.total_budget - old)


def apply_level1(ledger: MemoryLedger, action, phase_index: int) -> MemoryLedger:
    """Add a level-1 action to the running old-memory fraction.

    Phase 1 takes an absolute fraction in {0.1, ..., 0.9}; later phases a
    delta in {-0.1, 0, +0.1}.
    """
    a = validate_level1(action, phase_index)
    if phase_index == 1:
        if ledger.cumulative_level1 != 0:
            raise ContractViolation("phase-1 action applied to an initialized ledger")
        return ledger._set_cumulative(a)
    if ledger.cumulative_level1 == 0:
        raise ContractViolation(f"phase {phase_index} action before any phase-1 action")
    return ledger._set_cumulative(ledger.cumulative_level1 + a)


def level1_schedule_budget(total_budget: int, actions: Sequence) -> int:
    """Old budget from one cumulative sum of level-1 actions, rounded once."""
    c = sum((as_fraction(a) for a in actions), Fraction(0))
    if not 0 < c <= 1:
        raise ContractViolation(f"cumulative level-1 value {c} outside (0, 1]")
    return round_half_up(c * total_budget)


def split_binary(total: int, fraction: Fraction) -> tuple[int, int]:
    # round_half_up(fraction * total) in integer arithmetic
    p, q = fraction.numerator, fraction.denominator
    a = (2 * p * total + q) // (2 * q)
    return a, total - a


def apply_level2(
    old_budget: int,
    history: Sequence[PhaseAllocation],
    new_action,
    retained_caps: Mapping[int, int] | None = None,
) -> list[PhaseAllocation]:
    """Distribute the exemplar budget over old phases, groups and classes.

    ``history`` lists phases 0..i-1 with their entropy groups. The newest
    entry takes ``new_action`` as its level-2 ratio; older entries keep the
    ratio recorded when they first became old. A group with no classes hands
    its share to the other group of the same phase. Class counts above
    ``retained_caps`` are clipped and the surplus stays unallocated.
    """
    if not history:
        raise ContractViolation("level-2 allocation needs at least one old phase")
    if old_budget < 0:
        raise ValueError("old budget must be non-negative")
    caps = retained_caps or {}
    newest = validate_level2(new_action)

    shares = apportion(old_budget, [p.class_count for p in history])
    out = []
    for pos, (phase, share) in enumerate(zip(history, shares)):
        ratio = newest if pos == len(history) - 1 else phase.recorded_level2
        if ratio is None:
            raise ContractViolation(f"phase {phase.phase_index} has no recorded level-2 ratio")
        a_classes, b_classes = phase.group_a_classes, phase.group_b_classes
        if not b_classes:
            a_budget, b_budget = share, 0
        elif not a_classes:
            a_budget, b_budget = 0, share
        else:
            a_budget, b_budget = split_binary(share, ratio)

        counts = {}
        for classes, budget in ((a_classes, a_budget), (b_classes, b_budget)):
            if not classes:
                continue
            for c, n in zip(classes, apportion(budget, [1] * len(classes))):
                counts[c] = min(n, caps[c]) if c in caps else n
        out.append(PhaseAllocation(phase.phase_index, a_classes, b_classes, ratio,
                                   a_budget, b_budget, counts))
    return out
