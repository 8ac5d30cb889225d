import itertools
from fractions import Fraction as F

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rmm.memory import (
    ActionHistory,
    ContractViolation,
    MemoryLedger,
    PhaseAllocation,
    apply_level1,
    apply_level2,
    apportion,
    is_feasible_level1,
    level1_schedule_budget,
    round_half_up,
    split_binary,
)


def brute_force_apportion(total, weights):
    """Among all integer vectors summing to total, the closest to the exact
    quotas in squared error; ties prefer extra units at lower indices."""
    ws = [F(w) for w in weights]
    quotas = [total * w / sum(ws) for w in ws]
    ranges = [range(q.__floor__(), q.__floor__() + 2) for q in quotas]
    best = None
    for cand in itertools.product(*ranges):
        if sum(cand) != total or min(cand) < 0:
            continue
        key = (sum((c - q) ** 2 for c, q in zip(cand, quotas)), tuple(-c for c in cand))
        if best is None or key < best[0]:
            best = (key, list(cand))
    return best[1]


class TestApportion:
    def test_three_way_tie_goes_to_lowest_index(self):
        assert apportion(10, [1, 1, 1]) == [4, 3, 3]

    def test_zero_total(self):
        assert apportion(0, [1, 2]) == [0, 0]

    def test_exact_shares(self):
        assert apportion(5, [2, 3]) == [2, 3]

    def test_all_zero_weights_rejected(self):
        with pytest.raises(ValueError):
            apportion(3, [0, 0])

    @given(st.integers(0, 60), st.lists(st.integers(0, 9), min_size=1, max_size=5))
    def test_matches_brute_force(self, total, weights):
        if sum(weights) == 0:
            return
        assert apportion(total, weights) == brute_force_apportion(total, weights)

    @given(st.integers(0, 200), st.lists(st.integers(0, 50), min_size=1, max_size=8),
           st.integers(1, 7))
    def test_scale_equivariant(self, total, weights, scale):
        if sum(weights) == 0:
            return
        assert apportion(total, weights) == apportion(total, [w * scale for w in weights])

    @given(st.integers(0, 200), st.lists(st.integers(1, 50), min_size=1, max_size=8))
    def test_sums_to_total_within_one_of_quota(self, total, weights):
        out = apportion(total, weights)
        assert sum(out) == total
        for n, w in zip(out, weights):
            assert abs(n - F(total * w, sum(weights))) < 1


class TestLevel1:
    def test_first_phase(self):
        led = apply_level1(MemoryLedger(1000), 0.3, 1)
        assert (led.old_budget, led.new_budget) == (300, 700)

    def test_cumulative_step(self):
        led = apply_level1(apply_level1(MemoryLedger(1000), 0.3, 1), 0.1, 2)
        assert led.cumulative_level1 == F(2, 5)
        assert (led.old_budget, led.new_budget) == (400, 600)

    def test_cifar_budget(self):
        # 7000 * 3/10 by exact rational arithmetic
        expected = F(7000) * F(3, 10)
        assert expected.denominator == 1
        led = apply_level1(MemoryLedger(7000), F(3, 10), 1)
        assert (led.old_budget, led.new_budget) == (int(expected), 7000 - int(expected))

    def test_round_half_up(self):
        led = MemoryLedger.with_fraction(5, F(1, 2))
        assert (led.old_budget, led.new_budget) == (3, 2)

    @pytest.mark.parametrize("value,phase", [(0.35, 1), (0.0, 1), (1.0, 1), (0.2, 2), (0.05, 3)])
    def test_non_discrete_rejected(self, value, phase):
        led = MemoryLedger(100) if phase == 1 else apply_level1(MemoryLedger(100), 0.5, 1)
        with pytest.raises(ValueError):
            apply_level1(led, value, phase)

    def test_infeasible_cumulative(self):
        led = apply_level1(MemoryLedger(100), 0.1, 1)
        with pytest.raises(ContractViolation):
            apply_level1(led, -0.1, 2)

    def test_delta_before_initial(self):
        with pytest.raises(ContractViolation):
            apply_level1(MemoryLedger(100), 0.1, 2)

    @pytest.mark.parametrize("cum,cand,ok", [
        (F(95, 100), F(1, 10), False), (F(95, 100), 0, True), (F(1, 10), F(-1, 10), False),
        (F(9, 10), F(1, 10), True)])
    def test_feasibility(self, cum, cand, ok):
        assert is_feasible_level1(cum, cand) is ok


@st.composite
def legal_sequences(draw):
    first = draw(st.integers(1, 9))
    deltas, c = [], first
    for _ in range(draw(st.integers(0, 9))):
        d = draw(st.sampled_from([-1, 0, 1]))
        if 0 < c + d <= 10:
            deltas.append(d)
            c += d
    return [F(first, 10)] + [F(d, 10) for d in deltas]


@given(st.integers(0, 10**6), legal_sequences())
@settings(max_examples=300)
def test_incremental_matches_cumulative(total, actions):
    led = MemoryLedger(total)
    for i, a in enumerate(actions, start=1):
        led = apply_level1(led, a, i)
        assert led.old_budget + led.new_budget == total
        assert 0 < led.cumulative_level1 <= 1
    assert led.old_budget == level1_schedule_budget(total, actions)


def test_action_history_domains():
    h = ActionHistory().append(F(3, 10), F(5, 10)).append(F(1, 10), F(9, 10))
    assert h.level1_values == (F(3, 10), F(1, 10))
    with pytest.raises(ValueError):
        h.append(F(2, 10), F(5, 10))


def phase(j, a, b, recorded=None):
    return PhaseAllocation(j, tuple(a), tuple(b), recorded)


class TestLevel2:
    def test_two_equal_phases(self):
        hist = [phase(0, range(0, 5), range(5, 10), F(6, 10)), phase(1, range(10, 15), range(15, 20))]
        out = apply_level2(500, hist, F(6, 10))
        for alloc in out:
            assert (alloc.group_a_budget, alloc.group_b_budget) == (150, 100)
            assert [alloc.per_class_counts[c] for c in alloc.group_a_classes] == [30] * 5
            assert [alloc.per_class_counts[c] for c in alloc.group_b_classes] == [20] * 5
        assert out[1].recorded_level2 == F(6, 10)

    def test_symmetric_single_phase(self):
        out = apply_level2(100, [phase(0, [7], [3])], F(1, 2))
        assert out[0].per_class_counts == {7: 50, 3: 50}

    def test_uneven_split(self):
        out = apply_level2(90, [phase(0, [0, 1], [2, 3])], F(7, 10))
        a = out[0]
        assert (a.group_a_budget, a.group_b_budget) == (63, 27)
        assert [a.per_class_counts[c] for c in (0, 1)] == apportion(63, [1, 1]) == [32, 31]
        assert [a.per_class_counts[c] for c in (2, 3)] == apportion(27, [1, 1]) == [14, 13]

    def test_recorded_ratio_is_frozen(self):
        hist = [phase(0, [0], [1], F(9, 10)), phase(1, [2], [3])]
        out = apply_level2(200, hist, F(1, 10))
        assert out[0].per_class_counts == {0: 90, 1: 10}
        assert out[1].per_class_counts == {2: 10, 3: 90}

    def test_caps_leave_surplus_idle(self):
        out = apply_level2(100, [phase(0, [0], [1])], F(1, 2), {0: 10, 1: 100})
        assert out[0].per_class_counts == {0: 10, 1: 50}

    def test_empty_group_hands_share_over(self):
        out = apply_level2(40, [phase(0, [0, 1], [2], F(1, 2)), phase(1, [5], [])], F(7, 10))
        assert out[1].per_class_counts == {5: 10}
        assert out[1].group_a_budget == 10

    def test_errors(self):
        with pytest.raises(ContractViolation):
            apply_level2(10, [], F(1, 2))
        with pytest.raises(ValueError):
            apply_level2(-1, [phase(0, [0], [1])], F(1, 2))


@st.composite
def level2_cases(draw):
    n_phases = draw(st.integers(1, 6))
    hist, cid = [], 0
    for j in range(n_phases):
        c = draw(st.integers(1, 7))
        ids = list(range(cid, cid + c))
        cid += c
        cut = (c + 1) // 2
        rec = None if j == n_phases - 1 else F(draw(st.integers(1, 9)), 10)
        hist.append(phase(j, ids[:cut], ids[cut:], rec))
    caps = {c: draw(st.integers(0, 60)) for c in range(cid)} if draw(st.booleans()) else {}
    return draw(st.integers(0, 2000)), hist, F(draw(st.integers(1, 9)), 10), caps


@given(level2_cases())
@settings(max_examples=300)
def test_level2_partition(case):
    old, hist, action, caps = case
    out = apply_level2(old, hist, action, caps)
    assert sum(a.group_a_budget + a.group_b_budget for a in out) == old
    total = 0
    for a, h in zip(out, hist):
        assert set(a.per_class_counts) == set(h.group_a_classes) | set(h.group_b_classes)
        assert abs(len(h.group_a_classes) - len(h.group_b_classes)) <= 1
        assert all(n >= 0 for n in a.per_class_counts.values())
        total += a.allocated
        if not caps:
            assert a.allocated == a.group_a_budget + a.group_b_budget
    assert total <= min(old, sum(caps.values())) if caps else total == old


@given(st.integers(0, 10**6), st.integers(1, 9))
def test_binary_split_matches_rational_rounding(total, tenths):
    f = F(tenths, 10)
    a, b = split_binary(total, f)
    assert a == round_half_up(f * total) and a + b == total
