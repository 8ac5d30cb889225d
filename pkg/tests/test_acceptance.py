"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Tolerances and runtime limits are pinned in the constants below. The
benchmark criteria (7-9) train real policies and take several minutes.
"""

import math
import os
import random
import time
from fractions import Fraction

import numpy as np
import pytest

from acceptance_log import record
from oracles import (
    BANDIT_REWARDS,
    BANDIT_STATE,
    BanditEpisode,
    BanditStep,
    bandit_optimum,
    bandit_softmax,
    finite_difference_grad,
    herding_by_definition,
)
from rmm.classifier import herding_select
from rmm.cli import main
from rmm.memory import MemoryLedger, PhaseAllocation, apply_level1, apply_level2
from rmm.policy import (
    DELTA,
    INITIAL,
    LEVEL2,
    PARAM_ORDER,
    ActionSample,
    AdamState,
    BaselineState,
    PolicyParams,
    State,
    log_prob_gradient,
    sample_level1_batch,
    sample_level2,
)
from rmm.taskgen import DEFAULT_OLD_FRACTION, benchmark_dataset, benchmark_task
from rmm.trainer import TrainConfig, TrainingState, run_ablation, train_generic

# -- pinned tolerances and limits ----------------------------------------------
C1_SEQUENCES, C1_SEEDS, C1_MAX_PHASES, C1_SECONDS = 10_000, range(10), 10, 10.0
C2_SEQUENCES, C2_SECONDS = 10_000, 5.0
C3_STEPS, C3_SECONDS = 1_000_000, 30.0
C4_TRIPLES, C4_EPS, C4_REL_ERR, C4_SECONDS = 20, 1e-5, 1e-4, 5.0
C5_UPDATES, C5_TARGET_PROB, C5_SECONDS = 3000, 0.9, 60.0
C6_INSTANCES, C6_MAX_N, C6_MAX_D, C6_SECONDS = 100, 12, 4, 10.0
C7_SEEDS, C7_MIN_WINS, C7_SECONDS = 5, 4, 20 * 60.0
C8_SEEDS, C8_MIN_WINS, C8_SECONDS = 5, 3, 10 * 60.0
C10_SECONDS = 5 * 60.0

BENCHMARK_SEED = 0           # dataset the target task is cut from
TRANSFER_SOURCE_SEED = 10    # a second family of Gaussian classes (different means)


# -- 1 & 2: memory accounting ---------------------------------------------------

def random_level1_sequence(rng: random.Random, phases):
    tenths = [rng.randint(1, 9)]
    deltas = []
    for _ in range(phases - 1):
        options = [d for d in (-1, 0, 1) if 0 < tenths[-1] + d <= 10]
        d = rng.choice(options)
        deltas.append(d)
        tenths.append(tenths[-1] + d)
    return [Fraction(tenths[0], 10)] + [Fraction(d, 10) for d in deltas]


def test_criterion_1_memory_conservation():
    start = time.perf_counter()
    failures = 0
    per_seed = C1_SEQUENCES // len(C1_SEEDS)
    for seed in C1_SEEDS:
        rng = random.Random(seed)
        for _ in range(per_seed):
            total = rng.randrange(5000)
            phases = rng.randint(1, C1_MAX_PHASES)
            counts = [rng.randint(1, 7) for _ in range(phases + 1)]
            capped = rng.random() < 0.5
            ledger, history, cid = MemoryLedger(total), [], 0
            for i, a1 in enumerate(random_level1_sequence(rng, phases), start=1):
                ledger = apply_level1(ledger, a1, i)
                ids = list(range(cid, cid + counts[i - 1]))
                cid += counts[i - 1]
                cut = (len(ids) + 1) // 2
                history.append(PhaseAllocation(i - 1, tuple(ids[:cut]), tuple(ids[cut:])))
                caps = ({c: rng.randrange(400) for c in range(cid)} if capped else None)
                history = apply_level2(ledger.old_budget, history,
                                       Fraction(rng.randint(1, 9), 10), caps)
                counts_now = [n for a in history for n in a.per_class_counts.values()]
                group_sum = sum(a.group_a_budget + a.group_b_budget for a in history)
                ok = (ledger.old_budget + ledger.new_budget == total
                      and min(counts_now) >= 0
                      and group_sum == ledger.old_budget
                      and all(a.allocated <= a.group_a_budget + a.group_b_budget for a in history)
                      and (capped or sum(counts_now) == ledger.old_budget))
                failures += not ok
    elapsed = time.perf_counter() - start
    ok = failures == 0 and elapsed < C1_SECONDS
    record(1, "memory conservation", ok,
           f"{C1_SEQUENCES} sequences, {failures} violations, {elapsed:.1f}s (limit {C1_SECONDS:.0f}s)")
    assert ok


def test_criterion_2_incremental_equals_cumulative():
    start = time.perf_counter()
    rng = random.Random(12345)
    mismatches = 0
    for _ in range(C2_SEQUENCES):
        total = rng.randrange(10**7)
        actions = random_level1_sequence(rng, rng.randint(1, 10))
        ledger = MemoryLedger(total)
        for i, a in enumerate(actions, start=1):
            ledger = apply_level1(ledger, a, i)
        # one-shot integer evaluation: round-half-up of total * (sum of tenths) / 10
        tenths = sum(int(a * 10) for a in actions)
        one_shot = (2 * total * tenths + 10) // 20
        mismatches += ledger.old_budget != one_shot or ledger.new_budget != total - one_shot
    elapsed = time.perf_counter() - start
    ok = mismatches == 0 and elapsed < C2_SECONDS
    record(2, "level-1 incremental == one-shot", ok,
           f"{C2_SEQUENCES} sequences, {mismatches} mismatches, {elapsed:.1f}s (limit {C2_SECONDS:.0f}s)")
    assert ok


# -- 3: constraint safety under adversarial policies ------------------------------

def adversarial_params(kind, rng):
    p = PolicyParams.init(rng)
    if kind == "push_up":
        p.arrays["l1.bi"][:] = -60.0
        p.arrays["l1.bi"][8] = 60.0
        p.arrays["l1.bd"][:] = [-60.0, -60.0, 60.0]
    elif kind == "push_down":
        p.arrays["l1.bi"][:] = -60.0
        p.arrays["l1.bi"][0] = 60.0
        p.arrays["l1.bd"][:] = [60.0, -60.0, -60.0]
    else:  # huge random weights: saturated, state-dependent logits
        for k in PARAM_ORDER:
            p.arrays[k] = p.arrays[k] * 200.0
    return p


def test_criterion_3_constraint_safety():
    start = time.perf_counter()
    batch, phases = 5000, 20
    kinds = ("push_up", "push_down", "random_saturated")
    runs_per_kind = math.ceil(C3_STEPS / (batch * phases * len(kinds)))
    steps = violations = 0
    rng = np.random.default_rng(3)
    for kind in kinds:
        for _ in range(runs_per_kind):
            params = adversarial_params(kind, rng)
            tenths = np.zeros(batch, dtype=np.int64)
            for phase in range(1, phases + 1):
                states = np.column_stack([np.full(batch, 0.2), tenths / 10])
                idx, _ = sample_level1_batch(params, states, phase, tenths, rng)
                tenths = idx + 1 if phase == 1 else tenths + idx - 1
                violations += int(np.sum((tenths <= 0) | (tenths > 10)))
                steps += batch
    elapsed = time.perf_counter() - start
    ok = steps >= C3_STEPS and violations == 0 and elapsed < C3_SECONDS
    record(3, "constraint safety", ok,
           f"{steps} sampled steps, {violations} out of (0, 1], {elapsed:.1f}s (limit {C3_SECONDS:.0f}s)")
    assert ok


# -- 4: gradient check -----------------------------------------------------------

def test_criterion_4_gradient_correctness():
    start = time.perf_counter()
    rng = np.random.default_rng(4)
    worst = 0.0
    heads = [INITIAL, DELTA, LEVEL2]
    for t in range(C4_TRIPLES):
        params = PolicyParams.init(rng)
        state = State(float(rng.uniform(0, 1)), float(rng.uniform(0, 1)))
        head = heads[t % 3]
        action = ActionSample(head, int(rng.integers(3 if head == DELTA else 9)), 0.0)
        ctx = Fraction(int(rng.integers(1, 11)), 10) if head == LEVEL2 else None
        analytic = log_prob_gradient(params, state, action, ctx)
        numeric = finite_difference_grad(params, state, action, ctx, eps=C4_EPS)
        a = np.concatenate([analytic[k].ravel() for k in PARAM_ORDER])
        n = np.concatenate([numeric[k].ravel() for k in PARAM_ORDER])
        rel = np.linalg.norm(a - n) / max(np.linalg.norm(a), np.linalg.norm(n), 1e-12)
        worst = max(worst, rel)
    elapsed = time.perf_counter() - start
    ok = worst < C4_REL_ERR and elapsed < C4_SECONDS
    record(4, "gradient vs central differences", ok,
           f"{C4_TRIPLES} triples, worst relative error {worst:.2e} (limit {C4_REL_ERR:.0e}), "
           f"{elapsed:.1f}s (limit {C4_SECONDS:.0f}s)")
    assert ok


# -- 5: bandit calibration -------------------------------------------------------

def test_criterion_5_reinforce_calibration():
    start = time.perf_counter()
    params = PolicyParams.init(np.random.default_rng(5))
    state = TrainingState(params, AdamState(1e-2, 1e-2), BaselineState(0.9))
    pinned = ActionSample.pin(INITIAL, Fraction(1, 2))

    def episode(p, epoch, j):
        a2 = sample_level2(p, BANDIT_STATE, Fraction(1, 2), np.random.default_rng([5, epoch, j]))
        return BanditEpisode([BanditStep(BANDIT_STATE, pinned, a2)], BANDIT_REWARDS[a2.bin_index])

    state, _ = train_generic(state, C5_UPDATES, 1, episode)
    best = bandit_optimum()
    prob = bandit_softmax(state.params)[best]
    elapsed = time.perf_counter() - start
    ok = prob > C5_TARGET_PROB and elapsed < C5_SECONDS
    record(5, "REINFORCE bandit calibration", ok,
           f"P(best bin {best}) = {prob:.4f} after {C5_UPDATES} updates (need > {C5_TARGET_PROB}), "
           f"{elapsed:.1f}s (limit {C5_SECONDS:.0f}s)")
    assert ok


# -- 6: herding oracle -----------------------------------------------------------

def test_criterion_6_herding_oracle():
    start = time.perf_counter()
    rng = np.random.default_rng(6)
    mismatches = 0
    for _ in range(C6_INSTANCES):
        n, d = int(rng.integers(1, C6_MAX_N + 1)), int(rng.integers(1, C6_MAX_D + 1))
        feats = rng.normal(size=(n, d))
        oracle = herding_by_definition(feats, n)
        mismatches += herding_select(feats, n) != oracle
        mismatches += any(herding_select(feats, k) != oracle[:k] for k in range(1, n))
    elapsed = time.perf_counter() - start
    ok = mismatches == 0 and elapsed < C6_SECONDS
    record(6, "herding == greedy definition (with prefixes)", ok,
           f"{C6_INSTANCES} instances, {mismatches} mismatches, {elapsed:.1f}s (limit {C6_SECONDS:.0f}s)")
    assert ok


# -- 7 & 9: ablation ordering and allocation balance on the benchmark -------------

@pytest.fixture(scope="module")
def benchmark_ablation():
    start = time.perf_counter()
    config = TrainConfig(seed=0)
    rows = run_ablation(config, benchmark_task(benchmark_dataset(BENCHMARK_SEED)),
                        ["base", "fixed", "one_level", "two_level"], num_seeds=C7_SEEDS,
                        default_fraction=DEFAULT_OLD_FRACTION)
    return {r.mode: r for r in rows}, time.perf_counter() - start


def test_criterion_7_ablation_ordering(benchmark_ablation):
    rows, elapsed = benchmark_ablation
    two, one, fixed = (rows[m].report for m in ("two_level", "one_level", "fixed"))
    wins = int(np.sum(np.array(two.averages) - np.array(fixed.averages) > 0))
    ordered = two.average >= one.average >= fixed.average
    ok = ordered and wins >= C7_MIN_WINS and elapsed < C7_SECONDS
    record(7, "ablation ordering", ok,
           f"two-level {100 * two.average:.2f} >= one-level {100 * one.average:.2f} >= "
           f"best fixed {100 * fixed.average:.2f} ({rows['fixed'].note}): {ordered}; "
           f"two-level beats fixed on {wins}/{C7_SEEDS} seeds (need {C7_MIN_WINS}); "
           f"default fixed {100 * rows['base'].report.average:.2f}; "
           f"{elapsed / 60:.1f} min (limit {C7_SECONDS / 60:.0f})")
    assert ok


def test_criterion_9_allocation_balance(benchmark_ablation):
    rows, _ = benchmark_ablation
    policy, base = rows["two_level"].report, rows["base"].report
    pol_new = np.mean([t.steps[0].mean_per_new_class for t in policy.trajectories])
    pol_old = np.mean([t.steps[0].mean_per_old_class for t in policy.trajectories])
    fix_new = np.mean([t.steps[0].mean_per_new_class for t in base.trajectories])
    fix_old = np.mean([t.steps[0].mean_per_old_class for t in base.trajectories])
    ok = pol_new < fix_new and pol_old > fix_old
    record(9, "phase-1 allocation balance", ok,
           f"per new class {pol_new:.1f} < {fix_new:.1f} and per old class {pol_old:.1f} > "
           f"{fix_old:.1f} (policy vs default fixed split)")
    assert ok


# -- 8: zero-shot transfer ---------------------------------------------------------

def test_criterion_8_transfer():
    start = time.perf_counter()
    rows = run_ablation(TrainConfig(seed=0), benchmark_task(benchmark_dataset(BENCHMARK_SEED)),
                        ["base", "transferred"],
                        transfer_source=benchmark_dataset(TRANSFER_SOURCE_SEED),
                        num_seeds=C8_SEEDS, default_fraction=DEFAULT_OLD_FRACTION)
    base, transferred = rows[0].report, rows[1].report
    wins = int(np.sum(np.array(transferred.averages) - np.array(base.averages) > 0))
    elapsed = time.perf_counter() - start
    ok = wins >= C8_MIN_WINS and elapsed < C8_SECONDS
    record(8, "zero-shot transfer", ok,
           f"transferred {100 * transferred.average:.2f} vs default fixed {100 * base.average:.2f}, "
           f"wins on {wins}/{C8_SEEDS} seeds (need {C8_MIN_WINS}); "
           f"{elapsed / 60:.1f} min (limit {C8_SECONDS / 60:.0f})")
    assert ok


# -- 10: CLI determinism -----------------------------------------------------------

CLI_CONFIG = ('{"epochs": 3, "tasks_per_epoch": 2, "runs_per_task": 2, "initial_classes": 10, '
              '"classes_per_phase": 2, "num_phases": 5, "total_budget": 400}')

CLI_COMMANDS = [
    ["gen-data", "--out", "data.csv"],
    ["gen-data", "--seed", "10", "--out", "other.csv"],
    ["train", "--source", "data.csv", "--data-scope", "initial", "--config", "cfg.json",
     "--workers", "2", "--out", "policy.json"],
    ["eval", "--target", "data.csv", "--checkpoint", "policy.json", "--out", "eval_policy.json"],
    ["eval", "--target", "data.csv", "--mode", "fixed", "--out", "eval_fixed.json"],
    ["eval", "--target", "data.csv", "--mode", "crossval", "--seeds", "2",
     "--out", "eval_cv.json"],
    ["ablate", "--target", "data.csv", "--config", "cfg.json", "--seeds", "2", "--workers", "1",
     "--modes", "base,fixed,one_level,two_level,transferred", "--transfer-source", "other.csv",
     "--out", "table.csv"],
]


def _run_all(directory):
    cwd = os.getcwd()
    os.chdir(directory)
    try:
        (directory / "cfg.json").write_text(CLI_CONFIG)
        codes = [main(cmd) for cmd in CLI_COMMANDS]
    finally:
        os.chdir(cwd)
    files = {p.relative_to(directory): p.read_bytes() for p in sorted(directory.rglob("*"))
             if p.is_file()}
    return codes, files


def test_criterion_10_cli_determinism(tmp_path):
    start = time.perf_counter()
    (tmp_path / "a").mkdir()
    (tmp_path / "b").mkdir()
    codes_a, files_a = _run_all(tmp_path / "a")
    codes_b, files_b = _run_all(tmp_path / "b")
    differing = [str(p) for p in files_a if files_a[p] != files_b.get(p)]
    elapsed = time.perf_counter() - start
    ok = (codes_a == codes_b == [0] * len(CLI_COMMANDS) and files_a.keys() == files_b.keys()
          and not differing and elapsed < C10_SECONDS)
    record(10, "CLI determinism", ok,
           f"{len(CLI_COMMANDS)} commands x2, {len(files_a)} files, differing: {differing or 'none'}, "
           f"exit codes {codes_a}; {elapsed:.0f}s (limit {C10_SECONDS:.0f}s)")
    assert ok
