"""Desk-scale cooperative multi-agent environments.

All environments are single-threaded state machines with a shared reward.
``reset(seed)`` fully determines an episode; ``episode_seed`` derives
per-episode seeds from a run seed so batches can be collected in any order.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tabular import TabularGame, load_game, random_game


@dataclass(frozen=True)
class ActionSpace:
    kind: str  # "discrete" | "continuous"
    size: int  # number of actions, or action dimension
    low: float = -1.0
    high: float = 1.0

    def __post_init__(self):
        if self.kind == "discrete" and self.size < 2:
            raise ValueError("discrete action spaces need at least 2 actions")
        if self.kind == "continuous" and self.size < 1:
            raise ValueError("continuous action spaces need dimension >= 1")
        if self.kind not in ("discrete", "continuous"):
            raise ValueError(f"unknown action space kind {self.kind!r}")

    @property
    def head(self) -> tuple[str, int]:
        return (self.kind, self.size)


@dataclass(frozen=True)
class EnvSpec:
    n_agents: int
    obs_dims: tuple[int, ...]
    action_spaces: tuple[ActionSpace, ...]
    horizon: int
    state_dim: int
    reward_bound: float

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be at least 1")
        if not (len(self.obs_dims) == len(self.action_spaces) == self.n_agents):
            raise ValueError("need one observation dimension and action space per agent")


@dataclass
class StepResult:
    observations: list[np.ndarray]
    state: np.ndarray
    reward: float
    terminal: bool
    info: dict = field(default_factory=dict)


def episode_seed(run_seed: int, episode: int) -> int:
    return int(np.random.SeedSequence([int(run_seed), int(episode)]).generate_state(1)[0])


class Env:
    spec: EnvSpec

    def reset(self, seed: int):
        """Start an episode; returns ``(observations, state)``."""
        raise NotImplementedError

    def step(self, actions) -> StepResult:
        raise NotImplementedError

    def _advance_clock(self) -> bool:
        self.t += 1
        return self.t >= self.spec.horizon


# --------------------------------------------------------------------------


class MatrixGame(Env):
    """One-shot two-agent coordination game on a ``k``-action matrix."""

    def __init__(self, k: int = 3, target: int = 0):
        if not 0 <= target < k:
            raise ValueError("target must index one of the k actions")
        self.k, self.target = k, target
        self.spec = EnvSpec(2, (1, 1), (ActionSpace("discrete", k),) * 2, 1, 1, 1.0)
        self.payoff = np.zeros((k, k))
        self.payoff[target, :] = -0.5
        self.payoff[:, target] = -0.5
        self.payoff[target, target] = 1.0

    def _obs(self):
        return [np.ones(1), np.ones(1)], np.ones(1)

    def reset(self, seed=0):
        self.t = 0
        return self._obs()

    def step(self, actions) -> StepResult:
        a, b = (int(x) for x in actions)
        reward = float(self.payoff[a, b])
        done = self._advance_clock()
        obs, state = self._obs()
        return StepResult(obs, state, reward, done)

    def expected_reward(self, p1: np.ndarray, p2: np.ndarray) -> float:
        return float(p1 @ self.payoff @ p2)


class SpreadGrid(Env):
    """Agents on a grid cover fixed landmarks (one landmark per agent)."""

    MOVES = np.array([[0, 1], [0, -1], [-1, 0], [1, 0], [0, 0]])  # up, down, left, right, stay

    def __init__(self, grid: int = 5, n_agents: int = 2, horizon: int = 10, seed: int = 0):
        if grid < 3 or not 1 <= n_agents <= grid:
            raise ValueError("need grid >= 3 and 1 <= n_agents <= grid")
        self.grid, self.n = grid, n_agents
        rng = np.random.default_rng(seed)
        cells = rng.choice(grid * grid, size=n_agents, replace=False)
        self.landmarks = np.stack([cells // grid, cells % grid], axis=1)
        self.normalizer = 2.0 * (grid - 1)
        obs_dim = 2 + 2 * n_agents
        self.spec = EnvSpec(
            n_agents,
            (obs_dim,) * n_agents,
            (ActionSpace("discrete", 5),) * n_agents,
            horizon,
            2 * n_agents,
            float(n_agents),
        )

    def _observe(self):
        scale = 1.0 / (self.grid - 1)
        marks = self.landmarks.ravel() * scale
        obs = [np.concatenate([p * scale, marks]) for p in self.pos]
        return obs, self.pos.ravel() * scale

    def reset(self, seed=0, agent_positions=None):
        self.t = 0
        if agent_positions is None:
            rng = np.random.default_rng(seed)
            self.pos = rng.integers(0, self.grid, size=(self.n, 2))
        else:
            self.pos = np.array(agent_positions, dtype=np.int64).reshape(self.n, 2)
        return self._observe()

    def coverage_reward(self) -> float:
        dist = np.abs(self.pos[None, :, :] - self.landmarks[:, None, :]).sum(-1)
        return -float(dist.min(axis=1).sum()) / self.normalizer

    def step(self, actions) -> StepResult:
        moves = self.MOVES[np.asarray(actions, dtype=np.int64)]
        self.pos = np.clip(self.pos + moves, 0, self.grid - 1)
        reward = self.coverage_reward()
        done = self._advance_clock()
        obs, state = self._observe()
        return StepResult(obs, state, reward, done)

    def greedy_actions(self) -> list[int]:
        """Each agent walks toward its own landmark (agent i -> landmark i)."""
        out = []
        for p, m in zip(self.pos, self.landmarks):
            d = m - p
            if d[0] != 0:
                out.append(3 if d[0] > 0 else 2)
            elif d[1] != 0:
                out.append(0 if d[1] > 0 else 1)
            else:
                out.append(4)
        return out


class ContinuousGather(Env):
    """Damped 2-D point agents accelerate toward a shared target.

    ``speed_scales`` gives each agent its own actuator strength, so agents are
    heterogeneous.  Out-of-range actions are clamped and counted in
    ``info["clamped"]``.
    """

    dt = 0.1
    damping = 0.95

    def __init__(self, n_agents=2, speed_scales=None, horizon=25, target=(0.5, 0.5)):
        speed_scales = np.ones(n_agents) if speed_scales is None else np.asarray(speed_scales, float)
        if speed_scales.shape != (n_agents,) or np.any(speed_scales <= 0):
            raise ValueError("need one positive speed scale per agent")
        self.n, self.scales = n_agents, speed_scales
        self.target = np.asarray(target, dtype=np.float64)
        vmax = speed_scales.max() * self.dt * np.sqrt(2) / (1 - self.damping)
        reach = np.sqrt(2) + horizon * self.dt * vmax
        self.spec = EnvSpec(
            n_agents,
            (6,) * n_agents,
            (ActionSpace("continuous", 2),) * n_agents,
            horizon,
            4 * n_agents + 2,
            float(n_agents * (reach**2 + 0.02)),
        )

    def _observe(self):
        obs = [np.concatenate([p, v, self.target - p]) for p, v in zip(self.pos, self.vel)]
        return obs, np.concatenate([self.pos.ravel(), self.vel.ravel(), self.target])

    def reset(self, seed=0, positions=None):
        self.t = 0
        if positions is None:
            self.pos = np.random.default_rng(seed).uniform(0.0, 1.0, size=(self.n, 2))
        else:
            self.pos = np.array(positions, dtype=np.float64).reshape(self.n, 2)
        self.vel = np.zeros((self.n, 2))
        return self._observe()

    def step(self, actions) -> StepResult:
        raw = np.asarray(actions, dtype=np.float64).reshape(self.n, 2)
        act = np.clip(raw, -1.0, 1.0)
        clamped = int(np.sum(act != raw))
        self.pos = self.pos + self.vel * self.dt
        self.vel = self.damping * self.vel + act * self.scales[:, None] * self.dt
        reward = -float(np.sum((self.pos - self.target) ** 2)) - 0.01 * float(np.sum(act**2))
        done = self._advance_clock()
        obs, state = self._observe()
        return StepResult(obs, state, reward, done, {"clamped": clamped})

    def proportional_actions(self, kp=2.0, kd=2.0) -> np.ndarray:
        return np.clip(kp * (self.target - self.pos) - kd * self.vel, -1.0, 1.0)


class TabularEnv(Env):
    """Samples a ``TabularGame``; every agent observes the one-hot state."""

    def __init__(self, game: TabularGame, horizon: int):
        self.game = game
        S = game.n_states
        self.spec = EnvSpec(
            game.n_agents,
            (S,) * game.n_agents,
            tuple(ActionSpace("discrete", a) for a in game.action_counts),
            horizon,
            S,
            float(np.max(np.abs(game.reward))),
        )
        self._cum_init = np.cumsum(game.initial_dist)
        self._cum_trans = np.cumsum(game.transition, axis=-1)

    def _observe(self):
        onehot = np.zeros(self.game.n_states)
        onehot[self.state] = 1.0
        return [onehot.copy() for _ in range(self.game.n_agents)], onehot

    def _draw(self, cdf) -> int:
        return min(int(np.searchsorted(cdf, self.rng.random(), side="right")), len(cdf) - 1)

    def reset(self, seed=0):
        self.t = 0
        self.rng = np.random.default_rng(seed)
        self.state = self._draw(self._cum_init)
        return self._observe()

    def step(self, actions) -> StepResult:
        j = self.game.joint_index([int(a) for a in actions])
        reward = float(self.game.reward[self.state, j])
        self.state = self._draw(self._cum_trans[self.state, j])
        done = self._advance_clock()
        obs, state = self._observe()
        return StepResult(obs, state, reward, done, {"state": self.state})


def matrix_game(k=3, target=0) -> MatrixGame:
    return MatrixGame(k, target)


def spread_grid(grid=5, n_agents=2, horizon=10, seed=0) -> SpreadGrid:
    return SpreadGrid(grid, n_agents, horizon, seed)


def continuous_gather(n_agents=2, speed_scales=None, horizon=25) -> ContinuousGather:
    return ContinuousGather(n_agents, speed_scales, horizon)


def tabular_env(game: TabularGame, horizon: int) -> TabularEnv:
    return TabularEnv(game, horizon)


def tabular_from_config(horizon=20, game_path=None, game_seed=0, n_states=3, action_counts=(2, 2), gamma=0.9):
    """Tabular game read from ``game_path`` (JSON) or drawn from ``game_seed``."""
    if game_path is not None:
        game = load_game(game_path)
    else:
        game = random_game(game_seed, n_states, tuple(action_counts), gamma)
    return TabularEnv(game, horizon)


def make_env(name: str, **params) -> Env:
    makers = {
        "matrix_game": matrix_game,
        "spread_grid": spread_grid,
        "continuous_gather": continuous_gather,
        "tabular": tabular_from_config,
    }
    if name not in makers:
        raise ValueError(f"unknown environment {name!r}; choose from {sorted(makers)}")
    return makers[name](**params)
