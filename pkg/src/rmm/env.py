"""Class-incremental environment: one episode of memory-managed training.

Each episode walks the phases of a :class:`CilTaskSpec`. In every
incremental phase a controller chooses the old/new memory split and the
high-/low-entropy split of exemplar memory; the environment then shrinks the
exemplar store by herding, loads a random subset of the new classes, trains
and fine-tunes the classifier, and scores it on held-out data.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Mapping, Protocol, Sequence

import numpy as np

from rmm import classifier as clf
from rmm.memory import (
    ContractViolation,
    MemoryLedger,
    PhaseAllocation,
    apply_level1,
    apply_level2,
    apportion,
    as_fraction,
    round_half_up,
)
from rmm.policy import (
    DELTA,
    INITIAL,
    LEVEL2,
    ActionSample,
    PolicyParams,
    State,
    sample_level1,
    sample_level2,
)


@dataclass(frozen=True)
class CilTaskSpec:
    features: np.ndarray
    labels: np.ndarray
    sample_ids: np.ndarray
    phase_classes: tuple[tuple[int, ...], ...]
    train_rows: Mapping[int, np.ndarray]
    val_rows: Mapping[int, np.ndarray]
    total_budget: int
    name: str = ""

    def __post_init__(self):
        for c in self.all_classes:
            if np.intersect1d(self.train_rows[c], self.val_rows[c]).size:
                raise ValueError(f"class {c}: training and validation rows overlap")

    @property
    def num_phases(self) -> int:
        return len(self.phase_classes) - 1

    @property
    def phase_class_counts(self) -> list[int]:
        return [len(p) for p in self.phase_classes]

    @property
    def all_classes(self) -> list[int]:
        return [c for p in self.phase_classes for c in p]


@dataclass(frozen=True)
class EnvConfig:
    classifier: clf.ClassifierConfig = field(default_factory=clf.ClassifierConfig)
    phase0_epochs: int = 12
    finetune: bool = True


@dataclass
class PhaseRecord:
    phase: int
    state: State
    level1: ActionSample
    level2: ActionSample
    old_budget: int
    new_budget: int
    exemplar_counts: dict[int, int]
    loaded_counts: dict[int, int]
    allocations: list[PhaseAllocation]
    reward: float

    @property
    def mean_per_old_class(self) -> float:
        return sum(self.exemplar_counts.values()) / len(self.exemplar_counts)

    @property
    def mean_per_new_class(self) -> float:
        return sum(self.loaded_counts.values()) / len(self.loaded_counts)


@dataclass
class Trajectory:
    initial_reward: float
    steps: list[PhaseRecord] = field(default_factory=list)
    total_return: float | None = None

    @property
    def rewards(self) -> list[float]:
        return [self.initial_reward] + [s.reward for s in self.steps]


class Controller(Protocol):
    def level1(self, state: State, phase: int, cumulative: Fraction,
               rng: np.random.Generator) -> ActionSample: ...

    def level2(self, state: State, phase: int, level1_value: Fraction,
               rng: np.random.Generator) -> ActionSample: ...


@dataclass
class PolicyController:
    """Draws actions from the policy; ``pin_level2`` freezes the level-2 action."""

    params: PolicyParams
    greedy: bool = False
    pin_level2: Fraction | None = None

    def level1(self, state, phase, cumulative, rng):
        return sample_level1(self.params, state, phase, cumulative, rng, greedy=self.greedy)

    def level2(self, state, phase, level1_value, rng):
        if self.pin_level2 is not None:
            return ActionSample.pin(LEVEL2, self.pin_level2)
        return sample_level2(self.params, state, level1_value, rng, greedy=self.greedy)


@dataclass
class FixedController:
    """Static allocation: old fraction set once in phase 1, even class splits."""

    old_fraction: Fraction
    level2_value: Fraction = Fraction(1, 2)

    def __post_init__(self):
        self.old_fraction = as_fraction(self.old_fraction)
        if not 0 < self.old_fraction < 1:
            raise ValueError("fixed old-memory fraction must lie in (0, 1)")

    def level1(self, state, phase, cumulative, rng):
        if phase == 1:
            return ActionSample(INITIAL, -1, 0.0, pinned=True, override=self.old_fraction)
        return ActionSample.pin(DELTA, 0)

    def level2(self, state, phase, level1_value, rng):
        return ActionSample.pin(LEVEL2, self.level2_value)


@dataclass
class ScheduleController:
    """Replays fixed per-phase action values (phase 1 first)."""

    level1_values: Sequence
    level2_values: Sequence

    def level1(self, state, phase, cumulative, rng):
        v = as_fraction(self.level1_values[phase - 1])
        return ActionSample.pin(INITIAL if phase == 1 else DELTA, v)

    def level2(self, state, phase, level1_value, rng):
        return ActionSample.pin(LEVEL2, self.level2_values[phase - 1])


def compute_state(task: CilTaskSpec, phase_index: int, cumulative_level1) -> State:
    if phase_index < 1:
        raise ContractViolation("phase 0 has no state")
    counts = task.phase_class_counts
    seen = sum(counts[:phase_index])
    old_ratio = 0.0 if phase_index == 1 else float(as_fraction(cumulative_level1))
    return State(counts[phase_index] / seen, old_ratio)


def split_entropy_groups(model, phase_classes, features_by_class):
    """High-entropy half (rounded up) first, ties broken by class id."""
    missing = [c for c in phase_classes if len(features_by_class.get(c, ())) == 0]
    if missing:
        raise ValueError(f"no data for classes {missing}")
    ent = {c: clf.class_entropy(model, features_by_class[c]) for c in phase_classes}
    ranked = sorted(phase_classes, key=lambda c: (-ent[c], c))
    cut = (len(ranked) + 1) // 2
    return tuple(ranked[:cut]), tuple(ranked[cut:])


def load_new_data(pools: Mapping[int, np.ndarray], new_budget: int, rng) -> dict[int, np.ndarray]:
    """Even per-class quotas, uniform sampling without replacement, rest discarded."""
    if new_budget < 0:
        raise ValueError("new budget must be non-negative")
    classes = list(pools)
    quotas = apportion(new_budget, [1] * len(classes))
    out = {}
    for c, q in zip(classes, quotas):
        pool = pools[c]
        take = min(q, len(pool))
        out[c] = np.sort(rng.choice(pool, size=take, replace=False)) if take else pool[:0]
    return out


@dataclass
class InitialPhase:
    """Action-independent phase-0 outcome, reusable across runs of one task."""

    model: clf.ClassifierState
    reward: float
    groups: tuple[tuple[int, ...], tuple[int, ...]]
    herd_order: dict[int, np.ndarray]


def _phase_rng(seed, phase: int) -> np.random.Generator:
    base = list(seed) if isinstance(seed, (tuple, list)) else [int(seed)]
    return np.random.default_rng(base + [phase])


def _herd(task, rows: np.ndarray) -> np.ndarray:
    if len(rows) == 0:
        return rows
    return rows[clf.herding_select(task.features[rows], len(rows))]


def _val_set(task, classes):
    rows = np.concatenate([task.val_rows[c] for c in classes])
    return task.features[rows], task.labels[rows]


def initial_phase(task: CilTaskSpec, config: EnvConfig, seed) -> InitialPhase:
    rng = _phase_rng(seed, 0)
    classes = task.phase_classes[0]
    rows = np.concatenate([task.train_rows[c] for c in classes])
    cfg0 = clf.ClassifierConfig(**{**config.classifier.__dict__, "epochs": config.phase0_epochs})
    model = clf.train_phase(clf.ClassifierState.empty(task.features.shape[1]),
                            task.features[rows], task.labels[rows], classes, cfg0, rng)
    reward = float(clf.evaluate(model, *_val_set(task, classes)))
    by_class = {c: task.features[task.train_rows[c]] for c in classes}
    groups = split_entropy_groups(model, classes, by_class)
    herd = {c: _herd(task, task.train_rows[c]) for c in classes}
    return InitialPhase(model, reward, groups, herd)


def run_episode(
    task: CilTaskSpec,
    controller,
    config: EnvConfig,
    seed,
    action_rng: np.random.Generator | None = None,
    initial: InitialPhase | None = None,
) -> Trajectory:
    """Run phases 0..N and return the full trajectory.

    ``seed`` (an int or tuple of ints) drives data loading and SGD, one
    independent stream per phase. ``action_rng`` drives the controller and
    defaults to a stream derived from ``seed``.
    """
    if isinstance(controller, PolicyParams):
        controller = PolicyController(controller)
    if action_rng is None:
        action_rng = _phase_rng(seed, 2**31)
    if initial is None:
        initial = initial_phase(task, config, seed)

    model = initial.model
    traj = Trajectory(initial.reward)
    # ordered sample rows per class: herded (exemplars) or loaded (resident new data)
    herd_order = dict(initial.herd_order)
    exemplars: dict[int, np.ndarray] = {}
    resident = {c: task.train_rows[c] for c in task.phase_classes[0]}
    history: list[PhaseAllocation] = []
    pending_groups = initial.groups
    ledger = MemoryLedger(task.total_budget)

    for i in range(1, task.num_phases + 1):
        rng = _phase_rng(seed, i)
        state = compute_state(task, i, ledger.cumulative_level1)
        a1 = controller.level1(state, i, ledger.cumulative_level1, action_rng)
        if i == 1 and a1.override is not None:
            ledger = MemoryLedger.with_fraction(task.total_budget, a1.value)
        else:
            ledger = apply_level1(ledger, a1.value, i)
        a2 = controller.level2(state, i, a1.value, action_rng)

        prev_classes = task.phase_classes[i - 1]
        caps = {c: len(r) for c, r in exemplars.items()}
        caps.update({c: len(resident[c]) for c in prev_classes})
        history.append(PhaseAllocation(i - 1, *pending_groups))
        history = apply_level2(ledger.old_budget, history, a2.value, caps)

        for c in prev_classes:
            if c not in herd_order:
                herd_order[c] = _herd(task, resident[c])
        counts = {c: n for alloc in history for c, n in alloc.per_class_counts.items()}
        exemplars = {c: (herd_order[c] if c in prev_classes else exemplars[c])[:counts[c]]
                     for c in counts}

        new_classes = task.phase_classes[i]
        resident = load_new_data({c: task.train_rows[c] for c in new_classes},
                                 ledger.new_budget, rng)

        ex_rows = np.concatenate([exemplars[c] for c in counts] or [np.empty(0, np.intp)])
        new_rows = np.concatenate([resident[c] for c in new_classes])
        rows = np.concatenate([ex_rows, new_rows]).astype(np.intp)
        model = clf.train_phase(model, task.features[rows], task.labels[rows],
                                new_classes, config.classifier, rng)

        if config.finetune:
            model = _finetune(task, model, exemplars, resident, ledger.old_budget,
                              config, rng, herd_order)

        seen = [c for p in task.phase_classes[:i + 1] for c in p]
        reward = float(clf.evaluate(model, *_val_set(task, seen)))
        with_data = {c: task.features[r] for c, r in resident.items() if len(r)}
        if len(with_data) == len(new_classes):
            pending_groups = split_entropy_groups(model, new_classes, with_data)
        else:
            # classes that loaded nothing cannot be ranked; they go last
            ranked = split_entropy_groups(model, list(with_data), with_data) if with_data else ((), ())
            empty = tuple(c for c in new_classes if c not in with_data)
            flat = ranked[0] + ranked[1] + empty
            cut = (len(flat) + 1) // 2
            pending_groups = (flat[:cut], flat[cut:])

        traj.steps.append(PhaseRecord(
            i, state, a1, a2, ledger.old_budget, ledger.new_budget,
            {c: int(len(exemplars[c])) for c in counts},
            {c: int(len(resident[c])) for c in new_classes},
            history, reward))

    traj.total_return = sum(traj.rewards)
    return traj


def _finetune(task, model, exemplars, resident, old_budget, config, rng, herd_order):
    """Balanced set: current exemplars plus an equally sized herded slice per new class."""
    n_old = len(exemplars)
    per_new = round_half_up(Fraction(old_budget, n_old)) if n_old else 0
    parts = [r for r in exemplars.values()]
    for c, rows in resident.items():
        if len(rows) == 0:
            continue
        order = _herd(task, rows)
        herd_order[c] = order
        parts.append(order[:max(1, min(per_new, len(rows)))])
    rows = np.concatenate(parts).astype(np.intp)
    present = set(task.labels[rows].tolist())
    if not set(model.seen_classes) <= present:
        # a class with no retained sample cannot be balanced; skip fine-tuning
        return model
    return clf.finetune_exemplars(model, task.features[rows], task.labels[rows],
                                  config.classifier.finetune_epochs, config.classifier, rng)


def trajectory_records(traj: Trajectory, label: str = "") -> list[dict]:
    """One JSON-ready record per phase, the data behind old/new allocation plots."""
    out = [{"series": label, "phase": 0, "reward": traj.initial_reward}]
    for s in traj.steps:
        out.append({
            "series": label,
            "phase": s.phase,
            "state": [s.state.new_class_ratio, s.state.old_memory_ratio],
            "level1": float(s.level1.value),
            "level2": float(s.level2.value),
            "old_budget": s.old_budget,
            "new_budget": s.new_budget,
            "old_per_class": s.mean_per_old_class,
            "new_per_class": s.mean_per_new_class,
            "exemplar_counts": {str(c): n for c, n in sorted(s.exemplar_counts.items())},
            "loaded_counts": {str(c): n for c, n in sorted(s.loaded_counts.items())},
            "reward": s.reward,
        })
    return out


def write_jsonl(records, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")
