"""Gridworld cooperative tasks with sight-limited observations.

Both environments use the same action set (stay, north, south, east, west),
simultaneous moves with wall clamping, a joint team reward and per-entity
observation slots of the form (relative x, relative y, relative distance,
entity-type one-hot), zeroed for anything outside the agent's Chebyshev
sight range. An agent-id one-hot is appended so agents sharing one network
can still specialize.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .nn import Array

# action index -> (dx, dy); y grows southward
MOVES = np.array([(0, 0), (0, -1), (0, 1), (1, 0), (-1, 0)], dtype=np.int64)
N_ACTIONS = 5


@dataclass
class GridConfig:
    width: int = 7
    height: int = 7
    n_agents: int = 3
    sight: int = 2
    max_steps: int = 50
    collision_penalty: float = 1.0
    n_prey: int = 3
    capture_reward: float = 10.0
    step_cost: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.n_agents < 1:
            raise ValueError("need at least one agent")
        if self.sight < 1:
            raise ValueError("sight range must be >= 1")
        if self.n_agents + max(self.n_agents, self.n_prey) > self.width * self.height:
            raise ValueError("entities do not fit on the grid")
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")


@dataclass
class StepResult:
    obs: list
    state: Array
    reward: float
    done: bool
    info: dict = field(default_factory=dict)


def _move(positions: Array, actions, width: int, height: int) -> Array:
    acts = np.asarray(actions, dtype=np.int64)
    if acts.shape != (positions.shape[0],):
        raise ValueError(f"expected {positions.shape[0]} actions")
    if np.any(acts < 0) or np.any(acts >= N_ACTIONS):
        raise ValueError("action index out of range")
    new = positions + MOVES[acts]
    new[:, 0] = np.clip(new[:, 0], 0, width - 1)
    new[:, 1] = np.clip(new[:, 1], 0, height - 1)
    return new


class _GridBase:
    """Shared plumbing: placement, observation slots, global state."""

    n_actions = N_ACTIONS

    def __init__(self, cfg: GridConfig):
        self.cfg = cfg
        self.rng = np.random.default_rng(cfg.seed)
        self.t = 0
        self.last_actions = np.zeros(cfg.n_agents, dtype=np.int64)

    @property
    def n_agents(self) -> int:
        return self.cfg.n_agents

    @property
    def max_steps(self) -> int:
        return self.cfg.max_steps

    def _sample_cells(self, count: int) -> Array:
        cells = self.rng.choice(self.cfg.width * self.cfg.height,
                                size=count, replace=False)
        return np.stack([cells % self.cfg.width, cells // self.cfg.width],
                        axis=1).astype(np.int64)

    def _entity_features(self, me: Array, pos: Array, visible: bool,
                         type_idx: int) -> list[float]:
        cfg = self.cfg
        if not visible:
            return [0.0] * 5
        cheb = max(abs(int(pos[0] - me[0])), abs(int(pos[1] - me[1])))
        if cheb > cfg.sight:
            return [0.0] * 5
        dx = float(pos[0] - me[0]) / cfg.width
        dy = float(pos[1] - me[1]) / cfg.height
        dist = (abs(float(pos[0] - me[0])) + abs(float(pos[1] - me[1]))) \
            / (cfg.width + cfg.height)
        one_hot = [0.0, 0.0]
        one_hot[type_idx] = 1.0
        return [dx, dy, dist] + one_hot

    def _id_one_hot(self, i: int) -> list[float]:
        v = [0.0] * self.cfg.n_agents
        v[i] = 1.0
        return v

    def _rel_center(self, pos: Array) -> list[float]:
        cx = (self.cfg.width - 1) / 2.0
        cy = (self.cfg.height - 1) / 2.0
        return [float(pos[0] - cx) / self.cfg.width,
                float(pos[1] - cy) / self.cfg.height]

    def _actions_one_hot(self) -> list[float]:
        out = []
        for a in self.last_actions:
            row = [0.0] * N_ACTIONS
            row[int(a)] = 1.0
            out.extend(row)
        return out


class CoopNav(_GridBase):
    """Cooperative navigation: cover the landmarks while avoiding pile-ups.

    Reward per step is minus the sum over agents of the Manhattan distance
    to the nearest landmark, scaled by 1/(width+height), minus a penalty
    for every pair of agents sharing a cell. Episodes run a fixed number
    of steps.
    """

    def __init__(self, cfg: GridConfig):
        super().__init__(cfg)
        self.n_landmarks = cfg.n_agents
        self.agent_pos = np.zeros((cfg.n_agents, 2), dtype=np.int64)
        self.landmark_pos = np.zeros((self.n_landmarks, 2), dtype=np.int64)

    @property
    def obs_dim(self) -> int:
        n = self.cfg.n_agents
        return (n - 1 + self.n_landmarks) * 5 + n

    @property
    def state_dim(self) -> int:
        n = self.cfg.n_agents
        return 2 * n + 2 * self.n_landmarks + N_ACTIONS * n

    def reset(self) -> StepResult:
        cells = self._sample_cells(self.cfg.n_agents + self.n_landmarks)
        self.agent_pos = cells[:self.cfg.n_agents]
        self.landmark_pos = cells[self.cfg.n_agents:]
        self.t = 0
        self.last_actions[...] = 0
        return StepResult(self._all_obs(), self._state(), 0.0, False, {})

    def place(self, agents, landmarks) -> None:
        """Pin an exact layout (for analysis and tests)."""
        self.agent_pos = np.asarray(agents, dtype=np.int64).reshape(
            self.cfg.n_agents, 2).copy()
        self.landmark_pos = np.asarray(landmarks, dtype=np.int64).reshape(
            self.n_landmarks, 2).copy()
        self.t = 0
        self.last_actions[...] = 0

    def step(self, actions) -> StepResult:
        if self.t >= self.cfg.max_steps:
            raise RuntimeError("episode is done; call reset()")
        self.agent_pos = _move(self.agent_pos, actions,
                               self.cfg.width, self.cfg.height)
        self.last_actions = np.asarray(actions, dtype=np.int64).copy()
        self.t += 1
        reward, info = self._reward()
        done = self.t >= self.cfg.max_steps
        return StepResult(self._all_obs(), self._state(), reward, done, info)

    def _reward(self) -> tuple[float, dict]:
        diffs = np.abs(self.agent_pos[:, None, :] - self.landmark_pos[None, :, :])
        manhattan = diffs.sum(axis=-1)
        min_dists = manhattan.min(axis=1)
        scale = self.cfg.width + self.cfg.height
        pairs = 0
        for i in range(self.cfg.n_agents):
            for j in range(i + 1, self.cfg.n_agents):
                if np.array_equal(self.agent_pos[i], self.agent_pos[j]):
                    pairs += 1
        reward = -float(min_dists.sum()) / scale \
            - self.cfg.collision_penalty * pairs
        info = {"distances": min_dists.tolist(),
                "avg_distance": float(min_dists.mean()),
                "collisions": pairs}
        return reward, info

    def observe(self, i: int) -> Array:
        me = self.agent_pos[i]
        feats = []
        for j in range(self.cfg.n_agents):
            if j == i:
                continue
            feats.extend(self._entity_features(me, self.agent_pos[j], True, 0))
        for l in range(self.n_landmarks):
            feats.extend(self._entity_features(me, self.landmark_pos[l], True, 1))
        feats.extend(self._id_one_hot(i))
        return np.array(feats, dtype=np.float64)

    def _all_obs(self) -> list:
        return [self.observe(i) for i in range(self.cfg.n_agents)]

    def _state(self) -> Array:
        parts = []
        for p in self.agent_pos:
            parts.extend(self._rel_center(p))
        for p in self.landmark_pos:
            parts.extend(self._rel_center(p))
        parts.extend(self._actions_one_hot())
        return np.array(parts, dtype=np.float64)


class PredatorPrey(_GridBase):
    """Predators herd scripted prey; captures need two adjacent predators.

    Prey move uniformly at random among free neighboring cells after the
    predators move. A prey with at least two predators on 4-adjacent cells
    is captured and removed, paying the capture reward. Every step costs a
    small time penalty; the episode ends when all prey are captured or the
    step limit is reached.
    """

    def __init__(self, cfg: GridConfig):
        super().__init__(cfg)
        self.pred_pos = np.zeros((cfg.n_agents, 2), dtype=np.int64)
        self.prey_pos = np.zeros((cfg.n_prey, 2), dtype=np.int64)
        self.prey_alive = np.ones(cfg.n_prey, dtype=bool)

    @property
    def obs_dim(self) -> int:
        n = self.cfg.n_agents
        return (n - 1 + self.cfg.n_prey) * 5 + n

    @property
    def state_dim(self) -> int:
        n = self.cfg.n_agents
        return 2 * n + 2 * self.cfg.n_prey + self.cfg.n_prey + N_ACTIONS * n

    def reset(self) -> StepResult:
        cells = self._sample_cells(self.cfg.n_agents + self.cfg.n_prey)
        self.pred_pos = cells[:self.cfg.n_agents]
        self.prey_pos = cells[self.cfg.n_agents:]
        self.prey_alive = np.ones(self.cfg.n_prey, dtype=bool)
        self.t = 0
        self.last_actions[...] = 0
        return StepResult(self._all_obs(), self._state(), 0.0, False, {})

    def place(self, predators, prey, alive=None) -> None:
        """Pin an exact layout (for analysis and tests)."""
        self.pred_pos = np.asarray(predators, dtype=np.int64).reshape(
            self.cfg.n_agents, 2).copy()
        self.prey_pos = np.asarray(prey, dtype=np.int64).reshape(
            self.cfg.n_prey, 2).copy()
        self.prey_alive = (np.ones(self.cfg.n_prey, dtype=bool)
                           if alive is None else np.asarray(alive, dtype=bool).copy())
        self.t = 0
        self.last_actions[...] = 0

    def _occupied(self) -> set:
        cells = {(int(p[0]), int(p[1])) for p in self.pred_pos}
        for k, p in enumerate(self.prey_pos):
            if self.prey_alive[k]:
                cells.add((int(p[0]), int(p[1])))
        return cells

    def step(self, actions) -> StepResult:
        if self.t >= self.cfg.max_steps or not self.prey_alive.any():
            raise RuntimeError("episode is done; call reset()")
        self.pred_pos = _move(self.pred_pos, actions,
                              self.cfg.width, self.cfg.height)
        self.last_actions = np.asarray(actions, dtype=np.int64).copy()

        # prey flee one at a time so occupancy stays consistent
        for k in range(self.cfg.n_prey):
            if not self.prey_alive[k]:
                continue
            occupied = self._occupied()
            occupied.discard((int(self.prey_pos[k][0]), int(self.prey_pos[k][1])))
            options = []
            for dx, dy in MOVES:
                nx = int(self.prey_pos[k][0]) + int(dx)
                ny = int(self.prey_pos[k][1]) + int(dy)
                if 0 <= nx < self.cfg.width and 0 <= ny < self.cfg.height \
                        and (nx, ny) not in occupied:
                    options.append((nx, ny))
            if options:
                choice = options[int(self.rng.integers(len(options)))]
                self.prey_pos[k] = choice

        captures = 0
        for k in range(self.cfg.n_prey):
            if not self.prey_alive[k]:
                continue
            adjacent = sum(
                1 for p in self.pred_pos
                if abs(int(p[0]) - int(self.prey_pos[k][0]))
                + abs(int(p[1]) - int(self.prey_pos[k][1])) == 1)
            if adjacent >= 2:
                self.prey_alive[k] = False
                captures += 1

        self.t += 1
        reward = self.cfg.capture_reward * captures - self.cfg.step_cost
        done = self.t >= self.cfg.max_steps or not self.prey_alive.any()
        info = {"captures_step": captures,
                "prey_alive": int(self.prey_alive.sum())}
        return StepResult(self._all_obs(), self._state(), reward, done, info)

    def observe(self, i: int) -> Array:
        me = self.pred_pos[i]
        feats = []
        for j in range(self.cfg.n_agents):
            if j == i:
                continue
            feats.extend(self._entity_features(me, self.pred_pos[j], True, 0))
        for k in range(self.cfg.n_prey):
            feats.extend(self._entity_features(
                me, self.prey_pos[k], bool(self.prey_alive[k]), 1))
        feats.extend(self._id_one_hot(i))
        return np.array(feats, dtype=np.float64)

    def _all_obs(self) -> list:
        return [self.observe(i) for i in range(self.cfg.n_agents)]

    def _state(self) -> Array:
        parts = []
        for p in self.pred_pos:
            parts.extend(self._rel_center(p))
        for k, p in enumerate(self.prey_pos):
            if self.prey_alive[k]:
                parts.extend(self._rel_center(p))
            else:
                parts.extend([0.0, 0.0])
        parts.extend(float(a) for a in self.prey_alive)
        parts.extend(self._actions_one_hot())
        return np.array(parts, dtype=np.float64)


ENVS = {"coopnav": CoopNav, "predprey": PredatorPrey}


def make_env(name: str, cfg: GridConfig):
    if name not in ENVS:
        raise ValueError(f"unknown environment {name!r}; choose from {sorted(ENVS)}")
    return ENVS[name](cfg)


def save_trace(path, steps: list[dict]) -> None:
    """Write an episode trace (one JSON object per step) for offline replay."""
    with open(path, "w") as fh:
        for row in steps:
            fh.write(json.dumps(row) + "\n")


def load_trace(path) -> list[dict]:
    steps = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                steps.append(json.loads(line))
    return steps
