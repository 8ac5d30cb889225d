"""Policy training on pseudo tasks, evaluation, fixed baselines and ablations."""

from __future__ import annotations

import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from fractions import Fraction
from typing import Callable, Iterable, Sequence

import numpy as np

from rmm import __version__
from rmm.classifier import ClassifierConfig
from rmm.env import (
    CilTaskSpec,
    EnvConfig,
    FixedController,
    PolicyController,
    Trajectory,
    initial_phase,
    run_episode,
    trajectory_records,
)
from rmm.memory import LEVEL1_INITIAL_VALUES, as_fraction
from rmm.policy import (
    DELTA,
    HEAD_VALUES,
    INITIAL,
    LEVEL2,
    PARAM_ORDER,
    AdamState,
    BaselineState,
    GradientAccumulator,
    PolicyParams,
    accumulate_episode,
    head_histogram,
    update_baseline,
    update_params,
)
from rmm.taskgen import DatasetSource, make_cil_task, make_pseudo_task, phase0_source

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "rmm-policy"
CHECKPOINT_VERSION = 1
ABLATION_MODES = ("base", "one_level", "two_level", "transferred", "fixed")
ABLATION_LABELS = {
    "base": "Default fixed split",
    "one_level": "One-level RL",
    "two_level": "Two-level RL",
    "transferred": "Two-level RL (transferred policy)",
    "fixed": "CrossVal Fixed",
}


@dataclass
class TrainConfig:
    epochs: int = 300                   # m
    tasks_per_epoch: int = 2            # K
    runs_per_task: int = 4              # Z
    initial_classes: int = 10
    classes_per_phase: int = 2
    num_phases: int = 5                 # N
    total_budget: int = 400
    lr_level1: float = 1e-2
    lr_level2: float = 1e-2
    baseline_decay: float = 0.9
    hidden: int = 16
    seed: int = 0
    # "halved": pseudo tasks at half the class counts (data of the initial phase);
    # "full": the source's own task in the target's format (foreign data)
    pseudo_mode: str = "halved"
    one_level: bool = False
    workers: int = 1
    env: EnvConfig = field(default_factory=EnvConfig)

    def __post_init__(self):
        for name in ("epochs", "tasks_per_epoch", "runs_per_task", "initial_classes",
                     "classes_per_phase", "num_phases", "total_budget", "hidden", "workers"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.lr_level1 <= 0 or self.lr_level2 <= 0:
            raise ValueError("learning rates must be positive")
        if self.pseudo_mode not in ("halved", "full"):
            raise ValueError(f"unknown pseudo_mode {self.pseudo_mode!r}")
        BaselineState(self.baseline_decay)

    @property
    def phase_class_counts(self) -> list[int]:
        return [self.initial_classes] + [self.classes_per_phase] * self.num_phases

    def to_dict(self) -> dict:
        d = asdict(self)
        d["env"]["classifier"]["milestones"] = list(self.env.classifier.milestones)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        env = dict(d.pop("env", {}))
        clf_cfg = dict(env.pop("classifier", {}))
        if "milestones" in clf_cfg:
            clf_cfg["milestones"] = tuple(clf_cfg["milestones"])
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d, env=EnvConfig(classifier=ClassifierConfig(**clf_cfg), **env))


@dataclass
class TrainingState:
    params: PolicyParams
    optimizer: AdamState
    baseline: BaselineState
    epoch: int = 0


@dataclass
class EvaluationReport:
    label: str
    seeds: list[int]
    accuracies: list[list[float]]      # per seed, per phase 0..N
    trajectories: list[Trajectory] = field(default_factory=list, repr=False)

    @property
    def averages(self) -> list[float]:
        return [float(np.mean(a)) for a in self.accuracies]

    @property
    def lasts(self) -> list[float]:
        return [a[-1] for a in self.accuracies]

    @property
    def average(self) -> float:
        return float(np.mean(self.averages))

    @property
    def last(self) -> float:
        return float(np.mean(self.lasts))

    def to_dict(self) -> dict:
        return {"label": self.label, "seeds": self.seeds, "accuracies": self.accuracies,
                "per_seed_average": self.averages, "per_seed_last": self.lasts,
                "average": self.average, "last": self.last}

    def allocation_records(self) -> list[dict]:
        out = []
        for seed, traj in zip(self.seeds, self.trajectories):
            for r in trajectory_records(traj, self.label):
                out.append({"seed": seed, **r})
        return out


def new_training_state(config: TrainConfig) -> TrainingState:
    params = PolicyParams.init(np.random.default_rng([config.seed, 3]), config.hidden)
    return TrainingState(params, AdamState(config.lr_level1, config.lr_level2),
                         BaselineState(config.baseline_decay))


def make_training_task(config: TrainConfig, source: DatasetSource, epoch: int, k: int) -> CilTaskSpec:
    rng = np.random.default_rng([config.seed, 2, epoch, k])
    if config.pseudo_mode == "halved":
        return make_pseudo_task(source, config.phase_class_counts, config.total_budget, rng)
    return make_cil_task(source, config.phase_class_counts, config.total_budget, rng,
                         Fraction(1, 10), True, "pseudo-full")


def _episode_job(job):
    task, initial, params, config, env_seed, action_seed = job
    controller = PolicyController(params, pin_level2=Fraction(1, 2) if config.one_level else None)
    return run_episode(task, controller, config.env, env_seed,
                       np.random.default_rng(action_seed), initial)


def _map(fn, jobs, workers: int):
    if workers <= 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, jobs))


def reinforce_epoch(
    state: TrainingState,
    episodes: Sequence[Trajectory],
) -> tuple[TrainingState, dict]:
    """Baseline updates, score-function gradient and one ascent step.

    Episodes are reduced in the given order. Each advantage uses the
    baseline value from before that episode's own return was folded in
    (the very first return serves as its own baseline).
    """
    acc = GradientAccumulator.zeros(state.params)
    baseline = state.baseline
    for traj in episodes:
        b = baseline.value if baseline.initialized else traj.total_return
        acc = accumulate_episode(acc, state.params, traj, b)
        baseline = update_baseline(baseline, traj.total_return)
    params, opt = update_params(state.params, acc, state.optimizer)
    stats = {
        "mean_return": float(np.mean([t.total_return for t in episodes])),
        "baseline": baseline.value,
        "episodes": acc.episode_count,
    }
    return TrainingState(params, opt, baseline, state.epoch + 1), stats


def action_histograms(episodes: Iterable[Trajectory]) -> dict[str, list[int]]:
    l1 = [s.level1 for t in episodes for s in t.steps]
    l2 = [s.level2 for t in episodes for s in t.steps]
    return {INITIAL: head_histogram(l1, INITIAL), DELTA: head_histogram(l1, DELTA),
            LEVEL2: head_histogram(l2, LEVEL2)}


def train_rmm(
    config: TrainConfig,
    source: DatasetSource,
    state: TrainingState | None = None,
    on_epoch: Callable[[TrainingState, dict], None] | None = None,
) -> tuple[TrainingState, list[dict]]:
    """Learn both policies on freshly generated pseudo tasks.

    Per epoch: K new tasks, Z runs each against one parameter snapshot, then
    a single update from the mean of the Z*K score-function terms. Runs of one
    task share the task's data/SGD randomness, so return differences between
    them come from the actions. Passing ``state`` resumes at its epoch.
    """
    state = state or new_training_state(config)
    history = []
    while state.epoch < config.epochs:
        e = state.epoch
        jobs = []
        for k in range(config.tasks_per_epoch):
            task = make_training_task(config, source, e, k)
            env_seed = (config.seed, 0, e, k)
            initial = initial_phase(task, config.env, env_seed)
            for z in range(config.runs_per_task):
                jobs.append((task, initial, state.params, config, env_seed,
                             [config.seed, 1, e, k, z]))
        episodes = _map(_episode_job, jobs, config.workers)
        state, stats = reinforce_epoch(state, episodes)
        record = {"epoch": e, **stats, "histograms": action_histograms(episodes)}
        history.append(record)
        log.info("epoch %d mean return %.4f baseline %.4f", e, stats["mean_return"], stats["baseline"])
        if on_epoch:
            on_epoch(state, record)
    return state, history


def train_generic(
    state: TrainingState,
    epochs: int,
    episodes_per_epoch: int,
    episode_fn: Callable[[PolicyParams, int, int], Trajectory],
) -> tuple[TrainingState, list[float]]:
    """The same REINFORCE loop for any episode generator (used for calibration)."""
    returns = []
    for _ in range(epochs):
        e = state.epoch
        eps = [episode_fn(state.params, e, j) for j in range(episodes_per_epoch)]
        state, stats = reinforce_epoch(state, eps)
        returns.append(stats["mean_return"])
    return state, returns


def _evaluate(target, controller, config: EnvConfig, num_seeds: int, label: str,
              seed_base: int = 0) -> EvaluationReport:
    seeds = list(range(seed_base, seed_base + num_seeds))
    trajs = [run_episode(target, controller, config, (s, 99)) for s in seeds]
    return EvaluationReport(label, seeds, [t.rewards for t in trajs], trajs)


def evaluate_policy(
    params: PolicyParams,
    target: CilTaskSpec,
    num_seeds: int,
    config: EnvConfig | None = None,
    one_level: bool = False,
    label: str = "policy",
    seed_base: int = 0,
) -> EvaluationReport:
    """Greedy (per-phase argmax, feasible bins only) deployment of a frozen policy."""
    controller = PolicyController(params, greedy=True,
                                  pin_level2=Fraction(1, 2) if one_level else None)
    return _evaluate(target, controller, config or EnvConfig(), num_seeds, label, seed_base)


def run_fixed_baseline(
    target: CilTaskSpec,
    fixed_old_fraction,
    num_seeds: int,
    config: EnvConfig | None = None,
    seed_base: int = 0,
) -> EvaluationReport:
    f = as_fraction(fixed_old_fraction)
    return _evaluate(target, FixedController(f), config or EnvConfig(), num_seeds,
                     f"fixed {float(f):.4g}", seed_base)


def crossval_fixed(
    target: CilTaskSpec,
    num_seeds: int,
    config: EnvConfig | None = None,
    grid: Sequence = LEVEL1_INITIAL_VALUES,
    seed_base: int = 0,
) -> tuple[Fraction, dict[Fraction, EvaluationReport]]:
    """Sweep static splits; the best mean average accuracy wins (first on ties)."""
    reports = {as_fraction(f): run_fixed_baseline(target, f, num_seeds, config, seed_base)
               for f in grid}
    best = max(reports, key=lambda f: reports[f].average)
    return best, reports


@dataclass
class AblationRow:
    mode: str
    report: EvaluationReport
    note: str = ""

    @property
    def label(self) -> str:
        return ABLATION_LABELS[self.mode]


def run_ablation(
    config: TrainConfig,
    target: CilTaskSpec,
    modes: Sequence[str],
    transfer_source: DatasetSource | None = None,
    num_seeds: int = 5,
    default_fraction=None,
    trained: dict | None = None,
) -> list[AblationRow]:
    """Rows of the ablation table, one per requested mode.

    RL modes train on pseudo tasks from the target's initial-phase data only;
    ``transferred`` builds its pseudo tasks from ``transfer_source`` (a
    different dataset) and is applied zero-shot.
    ``trained`` (mode -> TrainingState) can carry already trained policies.
    """
    bad = [m for m in modes if m not in ABLATION_MODES]
    if bad:
        raise ValueError(f"unknown modes {bad}; valid: {', '.join(ABLATION_MODES)}")
    trained = {} if trained is None else trained
    rows = []
    for mode in modes:
        if mode == "base":
            f = as_fraction(default_fraction) if default_fraction is not None else Fraction(1, 4)
            rows.append(AblationRow(mode, run_fixed_baseline(target, f, num_seeds, config.env),
                                    f"fraction={float(f):.4g}"))
        elif mode == "fixed":
            best, reports = crossval_fixed(target, num_seeds, config.env)
            rows.append(AblationRow(mode, reports[best], f"best_fraction={float(best):.4g}"))
        else:
            if mode not in trained:
                if mode == "transferred":
                    if transfer_source is None:
                        raise ValueError("transferred mode needs a transfer source")
                    cfg = _replace(config, one_level=False)
                    src = transfer_source
                else:
                    cfg = _replace(config, one_level=(mode == "one_level"))
                    src = phase0_source(target)
                trained[mode], _ = train_rmm(cfg, src)
            rep = evaluate_policy(trained[mode].params, target, num_seeds, config.env,
                                  one_level=(mode == "one_level"), label=ABLATION_LABELS[mode])
            rows.append(AblationRow(mode, rep))
    return rows


def _replace(config: TrainConfig, **changes) -> TrainConfig:
    d = {f.name: getattr(config, f.name) for f in fields(config)}
    d.update(changes)
    return TrainConfig(**d)


def ablation_csv(rows: Sequence[AblationRow]) -> str:
    lines = ["row,setting,avg,last,note"]
    for i, r in enumerate(rows, start=1):
        lines.append(f"{i},{r.label},{100 * r.report.average:.2f},{100 * r.report.last:.2f},{r.note}")
    return "\n".join(lines) + "\n"


# -- checkpoints -------------------------------------------------------------
# Field order: format, version, epoch, config, params (PARAM_ORDER; each as
# shape + row-major values), optimizer (lr_level1, lr_level2, beta1, beta2,
# eps, step, m, v), baseline (decay, value, initialized). Floats are written
# with repr() so they load back bit-exactly.

def _arr(a: np.ndarray) -> dict:
    return {"shape": list(a.shape), "data": [float(x) for x in a.ravel()]}


def _unarr(d: dict) -> np.ndarray:
    return np.array(d["data"], dtype=np.float64).reshape(d["shape"])


def checkpoint_dict(state: TrainingState, config: TrainConfig | None = None) -> dict:
    opt = state.optimizer
    return {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "software": __version__,
        "epoch": state.epoch,
        "config": config.to_dict() if config else None,
        "params": {k: _arr(state.params[k]) for k in PARAM_ORDER},
        "optimizer": {
            "lr_level1": opt.lr_level1, "lr_level2": opt.lr_level2, "beta1": opt.beta1,
            "beta2": opt.beta2, "eps": opt.eps, "step": opt.step,
            "m": {k: _arr(opt.m[k]) for k in PARAM_ORDER if k in opt.m},
            "v": {k: _arr(opt.v[k]) for k in PARAM_ORDER if k in opt.v},
        },
        "baseline": {"decay": state.baseline.decay, "value": state.baseline.value,
                     "initialized": state.baseline.initialized},
    }


def save_checkpoint(path, state: TrainingState, config: TrainConfig | None = None) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(checkpoint_dict(state, config), fh)
        fh.write("\n")
    os.replace(tmp, path)


def load_checkpoint(path) -> tuple[TrainingState, TrainConfig | None]:
    with open(path, encoding="utf-8") as fh:
        d = json.load(fh)
    if d.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a policy checkpoint")
    if d.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {d.get('version')}")
    o = d["optimizer"]
    opt = AdamState(o["lr_level1"], o["lr_level2"], o["beta1"], o["beta2"], o["eps"], o["step"],
                    {k: _unarr(v) for k, v in o["m"].items()},
                    {k: _unarr(v) for k, v in o["v"].items()})
    b = d["baseline"]
    state = TrainingState(PolicyParams({k: _unarr(v) for k, v in d["params"].items()}), opt,
                          BaselineState(b["decay"], b["value"], b["initialized"]), d["epoch"])
    config = TrainConfig.from_dict(d["config"]) if d.get("config") else None
    return state, config
