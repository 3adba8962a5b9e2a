"""Trajectory collection, centralized critic, and advantage estimation.

Batches store samples ordered by (episode index, timestep).  Each episode owns
an RNG stream derived from ``(seed, episode index)``, so collection results do
not depend on how episodes are split across workers.
"""
from __future__ import annotations

import copy
import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import nn
from .envs import Env, episode_seed


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class GaeConfig:
    gamma: float = 0.99
    lam: float = 0.95

    def __post_init__(self):
        if not (0.0 <= self.gamma < 1.0 and 0.0 <= self.lam <= 1.0):
            raise ValueError("need 0 <= gamma < 1 and 0 <= lambda <= 1")


@dataclass
class RolloutBatch:
    states: np.ndarray
    observations: list[np.ndarray]
    actions: list[np.ndarray]
    old_log_probs: list[np.ndarray]
    rewards: np.ndarray
    values: np.ndarray
    terminals: np.ndarray
    episode: np.ndarray
    timestep: np.ndarray
    advantages: np.ndarray | None = None
    returns: np.ndarray | None = None
    m_weight: np.ndarray | None = None
    m_factors: list[int] = field(default_factory=list)  # agents whose ratios are folded into m_weight
    clamped_actions: int = 0

    def __len__(self) -> int:
        return len(self.rewards)

    @property
    def n_agents(self) -> int:
        return len(self.actions)

    @property
    def n_episodes(self) -> int:
        return len(np.unique(self.episode))

    def episode_returns(self) -> np.ndarray:
        """Undiscounted return of every episode in index order."""
        _, inv = np.unique(self.episode, return_inverse=True)
        return np.bincount(inv, weights=self.rewards)

    def reset_m(self) -> "RolloutBatch":
        if self.advantages is None:
            raise ValueError("advantages must be computed before M is initialized")
        return replace(self, m_weight=self.advantages.copy(), m_factors=[])


def _concat(batches: list[RolloutBatch]) -> RolloutBatch:
    n = batches[0].n_agents
    cat = lambda xs: np.concatenate(xs, axis=0)
    return RolloutBatch(
        states=cat([b.states for b in batches]),
        observations=[cat([b.observations[i] for b in batches]) for i in range(n)],
        actions=[cat([b.actions[i] for b in batches]) for i in range(n)],
        old_log_probs=[cat([b.old_log_probs[i] for b in batches]) for i in range(n)],
        rewards=cat([b.rewards for b in batches]),
        values=cat([b.values for b in batches]),
        terminals=cat([b.terminals for b in batches]),
        episode=cat([b.episode for b in batches]),
        timestep=cat([b.timestep for b in batches]),
        clamped_actions=sum(b.clamped_actions for b in batches),
    )


def _check_heads(env: Env, policies) -> None:
    spec = env.spec
    if len(policies) != spec.n_agents:
        raise ValueError(f"environment has {spec.n_agents} agents, got {len(policies)} policies")
    for i, (p, space, dim) in enumerate(zip(policies, spec.action_spaces, spec.obs_dims)):
        kind = "categorical" if space.kind == "discrete" else "gaussian"
        out = p.mlp.layer_sizes[-1]
        if p.kind != kind or out != space.size or p.obs_dim != dim:
            raise ValueError(f"policy {i} does not match the environment's spaces")


def _collect_episodes(env: Env, policies, episodes, seed) -> RolloutBatch:
    """Run the listed episodes in lockstep, batching each agent's forward pass."""
    E, H, n = len(episodes), env.spec.horizon, env.spec.n_agents
    envs = [copy.deepcopy(env) for _ in range(E)]
    rngs = [np.random.default_rng(episode_seed(seed, e)) for e in episodes]
    first = [en.reset(rng.integers(2**63)) for en, rng in zip(envs, rngs)]
    obs = [np.stack([o[i] for o, _ in first]) for i in range(n)]
    state = np.stack([s for _, s in first])

    rec_states, rec_obs = [], [[] for _ in range(n)]
    rec_act, rec_lp = [[] for _ in range(n)], [[] for _ in range(n)]
    rec_rew, rec_term = [], []
    clamped = 0
    for t in range(H):
        acts = []
        rec_states.append(state)
        for i, p in enumerate(policies):
            dist = nn.policy_forward(p, obs[i])
            shape = nn.noise_shape(dist)[1:]
            if p.kind == "categorical":
                noise = np.stack([r.random(shape) for r in rngs])
            else:
                noise = np.stack([r.standard_normal(shape) for r in rngs])
            a = nn.sample_from_noise(dist, noise)
            acts.append(a)
            rec_obs[i].append(obs[i])
            rec_act[i].append(a)
            rec_lp[i].append(nn.log_prob(dist, a).data)
        results = [en.step([acts[i][e] for i in range(n)]) for e, en in enumerate(envs)]
        clamped += sum(r.info.get("clamped", 0) for r in results)
        rec_rew.append(np.array([r.reward for r in results]))
        term = np.array([r.terminal for r in results])
        rec_term.append(term)
        if t < H - 1 and np.any(term):
            raise NotImplementedError("early episode termination is not supported")
        obs = [np.stack([r.observations[i] for r in results]) for i in range(n)]
        state = np.stack([r.state for r in results])
    if not np.all(rec_term[-1]):
        rec_term[-1] = np.ones(E, dtype=bool)  # horizon end closes the episode

    def episode_major(xs):  # (H, E, ...) -> (E*H, ...)
        arr = np.stack(xs)
        return np.swapaxes(arr, 0, 1).reshape((E * H,) + arr.shape[2:])

    return RolloutBatch(
        states=episode_major(rec_states),
        observations=[episode_major(o) for o in rec_obs],
        actions=[episode_major(a) for a in rec_act],
        old_log_probs=[episode_major(lp) for lp in rec_lp],
        rewards=episode_major(rec_rew),
        values=np.zeros(E * H),
        terminals=episode_major(rec_term),
        episode=np.repeat(np.asarray(episodes), H),
        timestep=np.tile(np.arange(H), E),
        clamped_actions=clamped,
    )


def collect(
    env: Env,
    policies,
    episodes: int,
    seed: int,
    critic: nn.MlpParams | None = None,
    workers: int = 1,
    first_episode: int = 0,
) -> RolloutBatch:
    """Collect ``episodes`` complete episodes under the joint policy."""
    _check_heads(env, policies)
    ids = list(range(first_episode, first_episode + episodes))
    if workers <= 1 or episodes < 2:
        batch = _collect_episodes(env, policies, ids, seed)
    else:
        chunks = [c.tolist() for c in np.array_split(ids, workers) if len(c)]
        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(lambda c: _collect_episodes(env, policies, c, seed), chunks))
        batch = _concat(parts)
    if critic is not None:
        batch.values = nn.value_forward(critic, batch.states)
    return batch


def compute_gae(batch: RolloutBatch, critic, cfg: GaeConfig) -> RolloutBatch:
    """Fill advantages and return targets; ``critic=None`` keeps the stored values."""
    values = batch.values if critic is None else nn.value_forward(critic, batch.states)
    values = np.asarray(values, dtype=np.float64)
    N = len(batch)
    adv = np.zeros(N)
    running = 0.0
    for t in reversed(range(N)):
        last = batch.terminals[t] or t == N - 1 or batch.episode[t + 1] != batch.episode[t]
        next_v = 0.0 if last else values[t + 1]
        if last:
            running = 0.0
        delta = batch.rewards[t] + cfg.gamma * next_v - values[t]
        running = delta + cfg.gamma * cfg.lam * running
        adv[t] = running
    return replace(batch, values=values, advantages=adv, returns=adv + values, m_weight=adv.copy(), m_factors=[])


def normalize_advantages(batch: RolloutBatch) -> RolloutBatch:
    adv = batch.advantages
    centered = adv - adv.mean()
    std = np.sqrt(max(float(np.mean(centered**2)), 1e-8))
    normed = centered / std
    return replace(batch, advantages=normed, m_weight=normed.copy(), m_factors=[])


def _critic_loss(params: nn.MlpParams, states, targets, leaves=None):
    err = nn.value_forward(params, states, leaves) - targets
    return (err * err).mean()


def critic_update(
    critic: nn.MlpParams,
    batch: RolloutBatch,
    epochs: int,
    lr: float,
    minibatch_size: int | None = None,
    seed: int = 0,
):
    """Mini-batch SGD on squared error to ``batch.returns``; returns ``(params, loss)``."""
    if batch.returns is None:
        raise ValueError("return targets must be computed first")
    states, targets = batch.states, batch.returns
    initial = float(_critic_loss(critic, states, targets))
    arrays = nn.value_arrays(critic)
    N = len(batch)
    mb = N if minibatch_size is None else min(minibatch_size, N)
    rng = np.random.default_rng(seed)
    for _ in range(epochs):
        order = rng.permutation(N)
        for start in range(0, N, mb):
            idx = order[start : start + mb]
            _, g = nn.loss_and_grad(
                lambda leaves: _critic_loss(critic, states[idx], targets[idx], leaves), arrays
            )
            arrays = nn.unflatten(nn.flatten(arrays) - lr * g, arrays)
        loss = float(_critic_loss(nn.value_with_arrays(critic, arrays), states, targets))
        if not np.isfinite(loss) or loss > 10.0 * max(initial, 1e-12):
            raise TrainingDiverged(f"critic loss rose from {initial:.4g} to {loss:.4g}")
    new = nn.value_with_arrays(critic, arrays)
    return new, float(_critic_loss(new, states, targets))


# --------------------------------------------------------------------------
# Debug dump


def batch_columns(batch: RolloutBatch) -> list[str]:
    """Column order of ``dump_csv``."""
    cols = ["episode", "timestep", "reward", "value", "terminal", "advantage", "return", "m_weight"]
    for i in range(batch.n_agents):
        a = batch.actions[i]
        width = 1 if a.ndim == 1 else a.shape[1]
        cols += [f"action{i}" if width == 1 else f"action{i}_{d}" for d in range(width)]
        cols.append(f"old_log_prob{i}")
    cols += [f"state_{d}" for d in range(batch.states.shape[1])]
    return cols


def dump_csv(batch: RolloutBatch, path) -> None:
    nan = np.full(len(batch), np.nan)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(batch_columns(batch))
        for t in range(len(batch)):
            row = [
                int(batch.episode[t]),
                int(batch.timestep[t]),
                repr(float(batch.rewards[t])),
                repr(float(batch.values[t])),
                int(batch.terminals[t]),
            ]
            for arr in (batch.advantages, batch.returns, batch.m_weight):
                row.append(repr(float((nan if arr is None else arr)[t])))
            for i in range(batch.n_agents):
                row += [repr(x) for x in np.atleast_1d(batch.actions[i][t]).tolist()]
                row.append(repr(float(batch.old_log_probs[i][t])))
            row += [repr(float(x)) for x in batch.states[t]]
            w.writerow(row)
