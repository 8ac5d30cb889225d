"""
REINFORCE on a nine-armed bandit
================================

The level-2 policy network chooses one of nine bins. Here it is trained on a
single-state bandit with fixed rewards per bin, using the same machinery as
full training: score-function gradients, a moving-average baseline and an
Adam ascent step.
"""

from fractions import Fraction

import numpy as np

from rmm.policy import (
    INITIAL,
    LEVEL2,
    ActionSample,
    AdamState,
    BaselineState,
    PolicyParams,
    State,
    action_probabilities,
    head_input,
    sample_level2,
)
from rmm.trainer import TrainingState, train_generic

rewards = np.array([0.2, 0.5, 0.1, 0.4, 0.9, 0.3, 0.6, 0.0, 0.7])
state = State(0.5, 0.5)
pinned = ActionSample.pin(INITIAL, Fraction(1, 2))   # level 1 is held fixed


class Step:
    def __init__(self, a2):
        self.state, self.level1, self.level2 = state, pinned, a2


class Episode:
    def __init__(self, a2):
        self.steps = [Step(a2)]
        self.total_return = float(rewards[a2.bin_index])


def episode(params, epoch, j):
    rng = np.random.default_rng([epoch, j])
    return Episode(sample_level2(params, state, Fraction(1, 2), rng))


x = head_input(state, LEVEL2, Fraction(1, 2))
training = TrainingState(PolicyParams.init(np.random.default_rng(0)), AdamState(1e-2, 1e-2),
                         BaselineState(0.9))
print("start ", np.round(action_probabilities(training.params, LEVEL2, x), 3))

# %%
# Train in chunks and watch probability mass move to the best bin (index 4).
for chunk in range(6):
    training, returns = train_generic(training, 500, 1, episode)
    p = action_probabilities(training.params, LEVEL2, x)
    print(f"{training.epoch:5d} updates  mean return {np.mean(returns):.3f}  P(best) {p[4]:.3f}")
