import numpy as np
import pytest

from vbc.envs import StepResult


class TinyOneStepEnv:
    """Two agents, two actions, constant reward 1, one step per episode."""

    n_actions = 2
    n_agents = 2
    obs_dim = 3
    state_dim = 2
    max_steps = 1

    def __init__(self, seed=0):
        self.t = 0

    def reset(self) -> StepResult:
        self.t = 0
        obs = [np.array([1.0, 0.0, 0.5]), np.array([0.0, 1.0, 0.5])]
        return StepResult(obs, np.array([0.5, -0.5]), 0.0, False, {})

    def step(self, actions) -> StepResult:
        if self.t >= 1:
            raise RuntimeError("episode is done")
        self.t += 1
        obs = [np.array([1.0, 0.0, 0.5]), np.array([0.0, 1.0, 0.5])]
        return StepResult(obs, np.array([0.5, -0.5]), 1.0, True, {})


@pytest.fixture
def tiny_env():
    return TinyOneStepEnv()
