"""Sequential heterogeneous-agent mirror descent policy optimization.

One iteration collects a batch under the current joint policy, refreshes the
centralized critic, estimates advantages, and then updates the agents one at a
time in a random order.  Each agent maximizes

    mean(ratio * M) - (1 / t_k) * mean KL(new || old)

with ``g`` plain gradient steps, after which its probability ratio is folded
into the per-sample weight ``M`` seen by the agents that follow.
"""
from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import nn
from . import tabular as tb
from .autodiff import Tensor, minimum, parameters
from .envs import Env
from .rollout import (
    GaeConfig,
    RolloutBatch,
    TrainingDiverged,
    collect,
    compute_gae,
    critic_update,
    normalize_advantages,
)

MAX_LOG_RATIO = 20.0
ALGORITHMS = ("hamdpo", "happo_clip", "independent_pg")


class RatioOverflow(TrainingDiverged):
    """New and old log-probabilities drifted too far apart for a finite ratio."""


@dataclass
class TrainerConfig:
    iterations: int = 100
    sgd_steps: int = 10
    learning_rate: float = 3e-4
    stepsize: float = 1.0
    schedule: str = "linear"
    episodes_per_iteration: int | None = None
    gae: GaeConfig = field(default_factory=GaeConfig)
    algorithm: str = "hamdpo"
    clip_epsilon: float = 0.2
    seed: int = 0
    advantage_normalization: bool = True
    critic_lr: float = 1e-3
    critic_epochs: int = 5
    critic_minibatch: int | None = 256
    hidden: tuple[int, ...] = (64, 64)
    log_std_init: float = 0.0
    max_grad_norm: float = 1e3
    workers: int = 1

    def __post_init__(self):
        if isinstance(self.gae, dict):
            self.gae = GaeConfig(**self.gae)
        self.hidden = tuple(self.hidden)
        if self.sgd_steps < 1:
            raise ValueError("sgd_steps must be at least 1")
        if self.stepsize <= 0 or self.learning_rate < 0:
            raise ValueError("need stepsize > 0 and learning_rate >= 0")
        if self.iterations < 0:
            raise ValueError("iterations must be non-negative")
        if not 0.0 < self.clip_epsilon < 1.0:
            raise ValueError("clip_epsilon must lie in (0, 1)")
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"algorithm must be one of {ALGORITHMS}")
        if self.schedule not in ("linear", "constant"):
            raise ValueError("schedule must be 'linear' or 'constant'")

    def episodes_for(self, horizon: int) -> int:
        if self.episodes_per_iteration is not None:
            return self.episodes_per_iteration
        return -(-1024 // horizon)


def stepsize(k: int, cfg: TrainerConfig) -> float:
    """Mirror-descent step ``t_k``; linear anneal ``t_0 (1 - k / K)``."""
    if cfg.schedule == "constant":
        return cfg.stepsize
    return cfg.stepsize * (1.0 - k / cfg.iterations)


def draw_permutation(n_agents: int, rng: np.random.Generator) -> list[int]:
    return [int(i) for i in rng.permutation(n_agents)]


# --------------------------------------------------------------------------
# Losses


def _log_ratio(policy: nn.PolicyParams, leaves, batch: RolloutBatch, agent: int):
    dist = nn.policy_forward(policy, batch.observations[agent], leaves)
    gap = nn.log_prob(dist, batch.actions[agent]) - batch.old_log_probs[agent]
    worst = float(np.max(np.abs(gap.data))) if len(batch) else 0.0
    if not np.isfinite(worst) or worst > MAX_LOG_RATIO:
        raise RatioOverflow(f"agent {agent}: log-probability gap {worst:.3g} exceeds {MAX_LOG_RATIO}")
    return dist, gap


def hamdpo_agent_loss(
    policy: nn.PolicyParams,
    leaves,
    old_policy: nn.PolicyParams,
    batch: RolloutBatch,
    agent: int,
    t_k: float | None,
) -> Tensor:
    """Negated mirror-descent objective; ``t_k=None`` drops the KL term."""
    dist, gap = _log_ratio(policy, leaves, batch, agent)
    loss = -(gap.exp() * batch.m_weight).mean()
    if t_k is not None:
        old = nn.policy_forward(old_policy, batch.observations[agent])
        loss = loss + nn.kl_closed_form(dist, old).mean() * (1.0 / t_k)
    return loss


def happo_clip_agent_loss(
    policy: nn.PolicyParams, leaves, batch: RolloutBatch, agent: int, eps: float
) -> Tensor:
    _, gap = _log_ratio(policy, leaves, batch, agent)
    ratio = gap.exp()
    M = batch.m_weight
    return -minimum(ratio * M, ratio.clip(1.0 - eps, 1.0 + eps) * M).mean()


# --------------------------------------------------------------------------
# Agent updates


@dataclass
class AgentUpdateReport:
    agent: int
    pre_surrogate: float
    post_surrogate: float
    mean_kl: float
    grad_norm: float
    ratio_min: float
    ratio_mean: float
    ratio_max: float
    loss: float
    grad_clipped: int = 0
    m_factors: list[int] = field(default_factory=list)
    max_abs_m: float = 0.0


def _agent_loss(policy, leaves, old, batch, agent, t_k, cfg):
    if cfg.algorithm == "happo_clip":
        return happo_clip_agent_loss(policy, leaves, batch, agent, cfg.clip_epsilon)
    kl_step = None if cfg.algorithm == "independent_pg" else t_k
    return hamdpo_agent_loss(policy, leaves, old, batch, agent, kl_step)


def update_agent(
    agent: int, batch: RolloutBatch, old: nn.PolicyParams, t_k: float, cfg: TrainerConfig
) -> tuple[nn.PolicyParams, AgentUpdateReport]:
    """``g`` gradient-ascent steps on the agent objective, starting at ``old``."""
    theta = old.arrays()
    clipped = 0
    grad_norm = 0.0
    pre = None
    for _ in range(cfg.sgd_steps):
        value, grad = nn.loss_and_grad(
            lambda leaves: _agent_loss(old, leaves, old, batch, agent, t_k, cfg), theta
        )
        if not np.isfinite(value):
            raise TrainingDiverged(f"agent {agent}: non-finite loss")
        if pre is None:
            pre = value
        grad_norm = float(np.linalg.norm(grad))
        if grad_norm > cfg.max_grad_norm:
            grad = grad * (cfg.max_grad_norm / grad_norm)
            clipped += 1
        theta = nn.unflatten(nn.flatten(theta) - cfg.learning_rate * grad, theta)
    new = old.with_arrays(theta)

    leaves = parameters(theta)
    dist, gap = _log_ratio(new, leaves, batch, agent)
    ratio = np.exp(gap.data)
    surrogate = float(np.mean(ratio * batch.m_weight))
    kl = float(nn.kl_closed_form(dist, nn.policy_forward(old, batch.observations[agent])).data.mean())
    final_loss = _agent_loss(new, leaves, old, batch, agent, t_k, cfg).item()
    report = AgentUpdateReport(
        agent=agent,
        pre_surrogate=float(np.mean(batch.m_weight)),
        post_surrogate=surrogate,
        mean_kl=max(kl, 0.0),  # closed form can round a hair below zero
        grad_norm=grad_norm,
        ratio_min=float(ratio.min()),
        ratio_mean=float(ratio.mean()),
        ratio_max=float(ratio.max()),
        loss=final_loss,
        grad_clipped=clipped,
        m_factors=list(batch.m_factors),
        max_abs_m=float(np.max(np.abs(batch.m_weight))),
    )
    return new, report


def accumulate_m(
    batch: RolloutBatch, agent: int, new: nn.PolicyParams, old: nn.PolicyParams | None = None
) -> RolloutBatch:
    """Fold the agent's new/old ratio on each recorded action into ``m_weight``.

    The old log-probabilities are the ones recorded at collection time, which
    equal ``old``'s when ``old`` is the collection snapshot.
    """
    _, gap = _log_ratio(new, None, batch, agent)
    m = batch.m_weight * np.exp(gap.data)
    return replace(batch, m_weight=m, m_factors=batch.m_factors + [agent])


# --------------------------------------------------------------------------
# Iterations


@dataclass
class TrainerState:
    policies: list[nn.PolicyParams]
    critic: nn.MlpParams
    rng: np.random.Generator
    iteration: int = 0
    env_steps: int = 0


def init_state(env: Env, cfg: TrainerConfig) -> TrainerState:
    ss = np.random.SeedSequence(cfg.seed)
    policy_seq, critic_seq, perm_seq = ss.spawn(3)
    spec = env.spec
    policies = [
        nn.init_policy(d, sp.head, np.random.default_rng(s), cfg.hidden, cfg.log_std_init)
        for d, sp, s in zip(spec.obs_dims, spec.action_spaces, policy_seq.spawn(spec.n_agents))
    ]
    critic = nn.init_value(spec.state_dim, np.random.default_rng(critic_seq), cfg.hidden)
    return TrainerState(policies, critic, np.random.default_rng(perm_seq))


def prepare_batch(state: TrainerState, env: Env, cfg: TrainerConfig, k: int):
    """Collect, refit the critic, and estimate advantages; ``M`` starts equal to them."""
    E = cfg.episodes_for(env.spec.horizon)
    batch = collect(env, state.policies, E, cfg.seed, state.critic, cfg.workers, first_episode=k * E)
    targets = compute_gae(batch, None, cfg.gae)
    critic, critic_loss = state.critic, 0.0
    if cfg.critic_epochs > 0:
        critic, critic_loss = critic_update(
            state.critic, targets, cfg.critic_epochs, cfg.critic_lr, cfg.critic_minibatch, seed=cfg.seed + k
        )
    batch = compute_gae(batch, critic, cfg.gae)
    if cfg.advantage_normalization:
        batch = normalize_advantages(batch)
    return batch.reset_m(), critic, critic_loss


def _metrics(k, state, batch, reports, critic_loss, t_k, started):
    entropies = []
    for i, p in enumerate(state.policies):
        entropies.append(float(nn.entropy(nn.policy_forward(p, batch.observations[i])).mean()))
    by_agent = sorted(reports, key=lambda r: r.agent)
    return {
        "iteration": k,
        "env_steps": state.env_steps,
        "mean_return": float(batch.episode_returns().mean()),
        "agent_kl": [r.mean_kl for r in by_agent],
        "policy_loss": float(np.mean([r.loss for r in reports])) if reports else 0.0,
        "critic_loss": critic_loss,
        "entropy": float(np.mean(entropies)),
        "stepsize": t_k,
        "grad_clipped": sum(r.grad_clipped for r in reports),
        "order": [r.agent for r in reports],
        "reports": reports,
        "wall_time_ms": int((time.perf_counter() - started) * 1000),
    }


def hamdpo_iteration(state: TrainerState, env: Env, cfg: TrainerConfig, k: int):
    """One pass of the sequential update (also drives the clipped baseline)."""
    started = time.perf_counter()
    t_k = stepsize(k, cfg)
    batch, critic, critic_loss = prepare_batch(state, env, cfg, k)
    order = draw_permutation(env.spec.n_agents, state.rng)
    policies = list(state.policies)
    reports = []
    for agent in order:
        new, rep = update_agent(agent, batch, state.policies[agent], t_k, cfg)
        batch = accumulate_m(batch, agent, new, state.policies[agent])
        policies[agent] = new
        reports.append(rep)
    new_state = TrainerState(policies, critic, state.rng, k + 1, state.env_steps + len(batch))
    return new_state, _metrics(k, new_state, batch, reports, critic_loss, t_k, started)


def independent_pg_iteration(state: TrainerState, env: Env, cfg: TrainerConfig, k: int):
    """Every agent ascends its own advantage-weighted ratio; ``M`` is never accumulated."""
    started = time.perf_counter()
    t_k = stepsize(k, cfg)
    batch, critic, critic_loss = prepare_batch(state, env, cfg, k)
    cfg_pg = replace(cfg, algorithm="independent_pg")
    policies, reports = list(state.policies), []
    for agent in range(env.spec.n_agents):
        new, rep = update_agent(agent, batch, state.policies[agent], t_k, cfg_pg)
        policies[agent] = new
        reports.append(rep)
    new_state = TrainerState(policies, critic, state.rng, k + 1, state.env_steps + len(batch))
    return new_state, _metrics(k, new_state, batch, reports, critic_loss, t_k, started)


def run_iteration(state, env, cfg, k):
    if cfg.algorithm == "independent_pg":
        return independent_pg_iteration(state, env, cfg, k)
    return hamdpo_iteration(state, env, cfg, k)


def train(env: Env, cfg: TrainerConfig, state: TrainerState | None = None, callback=None):
    """Run the remaining iterations; returns the final state and metric dicts."""
    state = init_state(env, cfg) if state is None else state
    history = []
    for k in range(state.iteration, cfg.iterations):
        state, metrics = run_iteration(state, env, cfg, k)
        history.append(metrics)
        if callback is not None:
            callback(state, metrics)
    return state, history


# --------------------------------------------------------------------------
# Checkpoints


def save_checkpoint(path, state: TrainerState) -> None:
    named = {f"policy{i}": p.arrays() for i, p in enumerate(state.policies)}
    named["critic"] = nn.value_arrays(state.critic)
    meta = {
        "iteration": state.iteration,
        "env_steps": state.env_steps,
        "rng": state.rng.bit_generator.state,
        "policies": [{"layer_sizes": list(p.mlp.layer_sizes), "kind": p.kind} for p in state.policies],
        "critic_layer_sizes": list(state.critic.layer_sizes),
    }
    nn.save_arrays(path, named, json.loads(json.dumps(meta)))


def load_checkpoint(path) -> TrainerState:
    named, meta = nn.load_arrays(path)
    policies = []
    for i, pm in enumerate(meta["policies"]):
        arrays = named[f"policy{i}"]
        n = len(pm["layer_sizes"]) - 1
        mlp = nn.MlpParams(tuple(pm["layer_sizes"]), arrays[0 : 2 * n : 2], arrays[1 : 2 * n : 2])
        policies.append(nn.PolicyParams(mlp, pm["kind"], arrays[2 * n] if pm["kind"] == "gaussian" else None))
    c = named["critic"]
    critic = nn.MlpParams(tuple(meta["critic_layer_sizes"]), c[0::2], c[1::2])
    rng = np.random.default_rng()
    rng.bit_generator.state = meta["rng"]
    return TrainerState(policies, critic, rng, meta["iteration"], meta["env_steps"])


# --------------------------------------------------------------------------
# Exact-expectation tabular mode


def softmax_rows(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def tabular_policy(logits: list[np.ndarray]) -> tb.TabularJointPolicy:
    return tb.TabularJointPolicy(tuple(softmax_rows(l) for l in logits))


def exact_agent_loss(leaves, old_table, weights, state_weights, t_k):
    """Same objective as ``hamdpo_agent_loss`` with exhaustive expectations.

    ``weights[s, a]`` is ``E_{a^{-i} ~ old}[M(s, a, a^{-i})]`` for the agent's
    action ``a``; ``state_weights`` is the normalized occupancy.
    """
    (logits,) = leaves
    logp = logits.log_softmax()
    surrogate = (logp.exp() * (weights * state_weights[:, None])).sum()
    kl = (logp.exp() * (logp - np.log(old_table))).sum(axis=1)
    return -surrogate + (kl * state_weights).sum() * (1.0 / t_k)


def exact_tabular_iteration(
    game: tb.TabularGame,
    logits: list[np.ndarray],
    t_k: float,
    sgd_steps: int,
    learning_rate: float,
    ordering,
):
    """One sequential iteration on softmax-tabular policies with exact advantages."""
    old = tabular_policy(logits)
    A = tb.exact_advantage(game, old).reshape((game.n_states,) + game.action_counts)
    d = tb.normalized_occupancy(game, old)
    M = A.copy()
    new_logits = [l.copy() for l in logits]
    n = game.n_agents
    for agent in ordering:
        # E over the other agents' old actions of M, per (state, own action)
        others = M
        for j in reversed(range(n)):
            if j != agent:
                others = np.einsum("s...a,sa->s...", np.moveaxis(others, j + 1, -1), old[j])
        weights = others
        theta = [logits[agent]]
        for _ in range(sgd_steps):
            _, g = nn.loss_and_grad(
                lambda leaves: exact_agent_loss(leaves, old[agent], weights, d, t_k), theta
            )
            theta = [theta[0] - learning_rate * g.reshape(theta[0].shape)]
        new_logits[agent] = theta[0]
        ratio = softmax_rows(theta[0]) / old[agent]
        shape = [game.n_states] + [game.action_counts[agent] if j == agent else 1 for j in range(n)]
        M = M * ratio.reshape(shape)
    return new_logits


def exact_tabular_train(
    game: tb.TabularGame,
    iterations: int,
    t_0: float = 1.0,
    sgd_steps: int = 10,
    learning_rate: float = 1.0,
    seed: int = 0,
    schedule: str = "constant",
    closed_form: bool = False,
):
    """Returns the sequence of exact returns ``J(pi_0), ..., J(pi_K)``.

    ``closed_form=True`` replaces the gradient steps with the exact per-state
    maximizer (``tabular.exact_hamdpo_step``).
    """
    rng = np.random.default_rng(seed)
    logits = [np.zeros((game.n_states, a)) for a in game.action_counts]
    policy = tabular_policy(logits)
    returns = [tb.joint_return(game, policy)]
    for k in range(iterations):
        t_k = t_0 if schedule == "constant" else t_0 * (1.0 - k / iterations)
        order = draw_permutation(game.n_agents, rng)
        if closed_form:
            policy = tb.exact_hamdpo_step(game, policy, t_k, order)
        else:
            logits = exact_tabular_iteration(game, logits, t_k, sgd_steps, learning_rate, order)
            policy = tabular_policy(logits)
        returns.append(tb.joint_return(game, policy))
    return returns, policy
