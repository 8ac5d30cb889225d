"""Two-level categorical policy trained with REINFORCE.

The level-1 network maps a 2-d state to either an initial old-memory fraction
(phase 1, nine bins 0.1..0.9) or a delta (later phases, bins -0.1/0/+0.1).
The level-2 network sees the state plus the level-1 value and picks the share
of a phase's exemplar memory that goes to its high-entropy class group.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Sequence

import numpy as np

from rmm.memory import (
    LEVEL1_DELTA_VALUES,
    LEVEL1_INITIAL_VALUES,
    LEVEL2_VALUES,
    ContractViolation,
    as_fraction,
)

HIDDEN = 16
INITIAL, DELTA, LEVEL2 = "initial", "delta", "level2"

HEAD_VALUES = {
    INITIAL: LEVEL1_INITIAL_VALUES,
    DELTA: LEVEL1_DELTA_VALUES,
    LEVEL2: LEVEL2_VALUES,
}
# parameter names per head: (trunk weight, trunk bias, head weight, head bias)
HEAD_PARAMS = {
    INITIAL: ("l1.W1", "l1.b1", "l1.Wi", "l1.bi"),
    DELTA: ("l1.W1", "l1.b1", "l1.Wd", "l1.bd"),
    LEVEL2: ("l2.W1", "l2.b1", "l2.Wo", "l2.bo"),
}
PARAM_ORDER = ("l1.W1", "l1.b1", "l1.Wi", "l1.bi", "l1.Wd", "l1.bd",
               "l2.W1", "l2.b1", "l2.Wo", "l2.bo")
MAX_REJECTIONS = 64


@dataclass(frozen=True)
class State:
    new_class_ratio: float
    old_memory_ratio: float

    def __post_init__(self):
        if not (np.isfinite(self.new_class_ratio) and np.isfinite(self.old_memory_ratio)):
            raise ValueError("state components must be finite")
        if self.new_class_ratio < 0 or not 0 <= self.old_memory_ratio <= 1:
            raise ValueError(f"invalid state {self}")

    def as_array(self) -> np.ndarray:
        return np.array([self.new_class_ratio, self.old_memory_ratio])


@dataclass(frozen=True)
class ActionSample:
    head: str
    bin_index: int
    log_prob: float
    pinned: bool = False
    # exact value for pinned actions that fall between bins
    override: Fraction | None = None

    @property
    def value(self) -> Fraction:
        if self.override is not None:
            return self.override
        return HEAD_VALUES[self.head][self.bin_index]

    @classmethod
    def pin(cls, head: str, value) -> "ActionSample":
        """An externally fixed action; it carries no gradient."""
        v = as_fraction(value)
        values = HEAD_VALUES[head]
        if v not in values:
            raise ValueError(f"{value} is not a {head} bin value")
        return cls(head, values.index(v), 0.0, pinned=True)


class PolicyParams:
    """Named float64 arrays for both networks."""

    def __init__(self, arrays: dict[str, np.ndarray]):
        missing = set(PARAM_ORDER) - set(arrays)
        if missing:
            raise ValueError(f"missing policy parameters: {sorted(missing)}")
        self.arrays = {k: np.asarray(arrays[k], dtype=np.float64) for k in PARAM_ORDER}
        if not all(np.all(np.isfinite(a)) for a in self.arrays.values()):
            raise ValueError("policy parameters must be finite")

    @classmethod
    def init(cls, rng: np.random.Generator, hidden: int = HIDDEN) -> "PolicyParams":
        def w(rows, cols):
            return rng.normal(0.0, 1.0 / np.sqrt(cols), size=(rows, cols))

        return cls({
            "l1.W1": w(hidden, 2), "l1.b1": np.zeros(hidden),
            "l1.Wi": w(9, hidden), "l1.bi": np.zeros(9),
            "l1.Wd": w(3, hidden), "l1.bd": np.zeros(3),
            "l2.W1": w(hidden, 3), "l2.b1": np.zeros(hidden),
            "l2.Wo": w(9, hidden), "l2.bo": np.zeros(9),
        })

    def __getitem__(self, key):
        return self.arrays[key]

    def copy(self) -> "PolicyParams":
        return PolicyParams({k: v.copy() for k, v in self.arrays.items()})

    def zeros_like(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.arrays.items()}

    def __eq__(self, other):
        return isinstance(other, PolicyParams) and all(
            np.array_equal(self.arrays[k], other.arrays[k]) for k in PARAM_ORDER)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    z = np.exp(logits - logits.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


def head_input(state: State, head: str, level1_value=None) -> np.ndarray:
    x = state.as_array()
    if head == LEVEL2:
        if level1_value is None:
            raise ValueError("level-2 head needs the level-1 value as input")
        x = np.append(x, float(level1_value))
    return x


def head_logits(params: PolicyParams, head: str, x: np.ndarray) -> np.ndarray:
    """Logits for a batch (or single row) of inputs."""
    W1, b1, Wo, bo = (params[k] for k in HEAD_PARAMS[head])
    h = np.tanh(x @ W1.T + b1)
    return h @ Wo.T + bo


def _draw(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """One inverse-CDF categorical draw per row."""
    cdf = np.cumsum(probs, axis=-1)
    u = rng.random(probs.shape[0]) * cdf[:, -1]
    idx = (u[:, None] >= cdf).sum(axis=-1)
    return np.minimum(idx, probs.shape[1] - 1)


def sample_level1_batch(
    params: PolicyParams,
    states: np.ndarray,
    phase_index: int,
    cumulative_tenths: np.ndarray,
    rng: np.random.Generator,
    greedy: bool = False,
) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized level-1 sampling with rejection of infeasible bins.

    ``cumulative_tenths`` holds each row's running old-memory fraction in
    tenths (ignored in phase 1). Draws are repeated up to ``MAX_REJECTIONS``
    times; rows still infeasible after that take one draw from the
    distribution restricted to feasible bins, which is exactly where an
    unbounded rejection loop would end up. Returned log-probabilities are
    under the unrestricted distribution.
    """
    if phase_index < 1:
        raise ContractViolation("no level-1 action in phase 0")
    head = INITIAL if phase_index == 1 else DELTA
    n = states.shape[0]
    logp = log_softmax(head_logits(params, head, states))
    if phase_index == 1:
        feasible = np.ones_like(logp, dtype=bool)
    else:
        deltas = np.array([-1, 0, 1])
        after = np.asarray(cumulative_tenths)[:, None] + deltas
        feasible = (after > 0) & (after <= 10)
    if not feasible.any(axis=1).all():
        raise ContractViolation("no feasible level-1 bin")

    if greedy:
        idx = np.where(feasible, logp, -np.inf).argmax(axis=1)
        return idx, logp[np.arange(n), idx]

    probs = np.exp(logp)
    idx = np.full(n, -1)
    pending = np.arange(n)
    for _ in range(MAX_REJECTIONS):
        if pending.size == 0:
            break
        draw = _draw(probs[pending], rng)
        ok = feasible[pending, draw]
        idx[pending[ok]] = draw[ok]
        pending = pending[~ok]
    if pending.size:
        restricted = np.where(feasible[pending], probs[pending], 0.0)
        # saturated logits can underflow every feasible bin to zero
        tiny = restricted.sum(axis=1) == 0
        if tiny.any():
            restricted[tiny] = softmax(np.where(feasible[pending][tiny], logp[pending][tiny], -np.inf))
        idx[pending] = _draw(restricted, rng)
    return idx, logp[np.arange(n), idx]


def sample_level1(
    params: PolicyParams,
    state: State,
    phase_index: int,
    cumulative,
    rng: np.random.Generator,
    greedy: bool = False,
) -> ActionSample:
    tenths = as_fraction(cumulative) * 10
    if tenths.denominator != 1:
        raise ValueError(f"cumulative level-1 value {cumulative} is not a multiple of 0.1")
    if phase_index > 1 and not 0 < tenths <= 10:
        raise ContractViolation(f"cumulative level-1 value {cumulative} outside (0, 1]")
    idx, lp = sample_level1_batch(params, state.as_array()[None, :], phase_index,
                                  np.array([int(tenths)]), rng, greedy=greedy)
    head = INITIAL if phase_index == 1 else DELTA
    return ActionSample(head, int(idx[0]), float(lp[0]))


def sample_level2(
    params: PolicyParams,
    state: State,
    level1_value,
    rng: np.random.Generator,
    greedy: bool = False,
) -> ActionSample:
    x = head_input(state, LEVEL2, level1_value)
    logp = log_softmax(head_logits(params, LEVEL2, x[None, :]))[0]
    if greedy:
        k = int(logp.argmax())
    else:
        k = int(_draw(np.exp(logp)[None, :], rng)[0])
    return ActionSample(LEVEL2, k, float(logp[k]))


def action_probabilities(params: PolicyParams, head: str, x: np.ndarray) -> np.ndarray:
    return softmax(head_logits(params, head, x))


def log_prob_gradient(
    params: PolicyParams,
    state: State,
    action: ActionSample,
    level1_value=None,
) -> dict[str, np.ndarray]:
    """Exact gradient of log pi(action) with respect to every parameter.

    Parameters the action's head does not touch get zero arrays.
    """
    grads = params.zeros_like()
    if action.pinned:
        return grads
    head = action.head
    kW1, kb1, kWo, kbo = HEAD_PARAMS[head]
    x = head_input(state, head, level1_value)
    h = np.tanh(params[kW1] @ x + params[kb1])
    logits = params[kWo] @ h + params[kbo]
    g = -softmax(logits)
    g[action.bin_index] += 1.0
    grads[kWo] = np.outer(g, h)
    grads[kbo] = g
    dpre = (params[kWo].T @ g) * (1.0 - h * h)
    grads[kW1] = np.outer(dpre, x)
    grads[kb1] = dpre
    return grads


@dataclass
class BaselineState:
    """Exponential moving average of episode returns."""

    decay: float = 0.9
    value: float = 0.0
    initialized: bool = False

    def __post_init__(self):
        if not 0 <= self.decay < 1:
            raise ValueError("baseline decay must lie in [0, 1)")


def update_baseline(baseline: BaselineState, episode_return: float) -> BaselineState:
    if not baseline.initialized:
        return BaselineState(baseline.decay, float(episode_return), True)
    mu = baseline.decay
    return BaselineState(mu, mu * baseline.value + (1 - mu) * float(episode_return), True)


@dataclass
class GradientAccumulator:
    sums: dict[str, np.ndarray]
    episode_count: int = 0

    @classmethod
    def zeros(cls, params: PolicyParams) -> "GradientAccumulator":
        return cls(params.zeros_like())

    def copy(self) -> "GradientAccumulator":
        return GradientAccumulator({k: v.copy() for k, v in self.sums.items()}, self.episode_count)

    def mean(self) -> dict[str, np.ndarray]:
        if self.episode_count == 0:
            raise ContractViolation("no episodes accumulated")
        return {k: v / self.episode_count for k, v in self.sums.items()}


def trajectory_score(params: PolicyParams, steps: Iterable) -> dict[str, np.ndarray]:
    """Sum over phases of grad log(pi_1(a1|s) * pi_2(a2|s, a1)).

    ``steps`` yields objects with ``state``, ``level1`` and ``level2``.
    """
    total = params.zeros_like()
    for step in steps:
        for action, ctx in ((step.level1, None), (step.level2, step.level1.value)):
            if action.pinned:
                continue
            for k, g in log_prob_gradient(params, step.state, action, ctx).items():
                total[k] += g
    return total


def accumulate_episode(
    acc: GradientAccumulator,
    params: PolicyParams,
    trajectory,
    baseline_value: float,
) -> GradientAccumulator:
    """Add one episode's score times its advantage (R - b)."""
    steps = getattr(trajectory, "steps", None)
    if not steps or trajectory.total_return is None:
        raise ValueError("trajectory is incomplete")
    advantage = float(trajectory.total_return) - float(baseline_value)
    out = acc.copy()
    for k, g in trajectory_score(params, steps).items():
        out.sums[k] += g * advantage
    out.episode_count += 1
    return out


@dataclass
class AdamState:
    lr_level1: float = 1e-3
    lr_level2: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def lr_for(self, name: str) -> float:
        return self.lr_level1 if name.startswith("l1.") else self.lr_level2


def update_params(
    params: PolicyParams,
    acc: GradientAccumulator,
    opt: AdamState,
) -> tuple[PolicyParams, AdamState]:
    """One adaptive-moment gradient *ascent* step on the mean gradient."""
    grad = acc.mean()
    t = opt.step + 1
    m, v, new = {}, {}, {}
    for k in PARAM_ORDER:
        g = grad[k]
        m[k] = opt.beta1 * opt.m.get(k, np.zeros_like(g)) + (1 - opt.beta1) * g
        v[k] = opt.beta2 * opt.v.get(k, np.zeros_like(g)) + (1 - opt.beta2) * g * g
        m_hat = m[k] / (1 - opt.beta1 ** t)
        v_hat = v[k] / (1 - opt.beta2 ** t)
        new[k] = params[k] + opt.lr_for(k) * m_hat / (np.sqrt(v_hat) + opt.eps)
    opt2 = AdamState(opt.lr_level1, opt.lr_level2, opt.beta1, opt.beta2, opt.eps, t, m, v)
    return PolicyParams(new), opt2


def head_histogram(samples: Sequence[ActionSample], head: str) -> list[int]:
    counts = [0] * len(HEAD_VALUES[head])
    for s in samples:
        if s.head == head and not s.pinned:
            counts[s.bin_index] += 1
    return counts
