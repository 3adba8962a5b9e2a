"""Exact quantities on small finite cooperative Markov games.

Joint actions are flattened in C order over ``action_counts`` (agent 0 is the
slowest-varying index), so a transition tensor has shape ``(S, J, S)`` and a
reward table ``(S, J)`` with ``J = prod(action_counts)``.

Everything here is dense linear algebra; games are capped at
``MAX_JOINT_ENTRIES`` state/joint-action pairs.
"""
from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

MAX_JOINT_ENTRIES = 10_000
_PROB_TOL = 1e-12


class OracleError(ValueError):
    """Invalid input to an oracle computation."""


@dataclass(frozen=True)
class TabularGame:
    transition: np.ndarray
    reward: np.ndarray
    gamma: float
    initial_dist: np.ndarray
    action_counts: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "action_counts", tuple(int(a) for a in self.action_counts))
        for name in ("transition", "reward", "initial_dist"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        validate_game(self)

    @property
    def n_agents(self) -> int:
        return len(self.action_counts)

    @property
    def n_states(self) -> int:
        return self.reward.shape[0]

    @property
    def n_joint(self) -> int:
        return int(np.prod(self.action_counts))

    def joint_index(self, actions: Sequence[int]) -> int:
        return int(np.ravel_multi_index(tuple(actions), self.action_counts))

    def joint_actions(self) -> list[tuple[int, ...]]:
        return list(itertools.product(*(range(a) for a in self.action_counts)))

    def to_dict(self) -> dict:
        return {
            "n_agents": self.n_agents,
            "n_states": self.n_states,
            "action_counts": list(self.action_counts),
            "transition": self.transition.tolist(),
            "reward": self.reward.tolist(),
            "gamma": self.gamma,
            "initial_dist": self.initial_dist.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TabularGame":
        game = cls(
            transition=np.array(d["transition"], dtype=np.float64),
            reward=np.array(d["reward"], dtype=np.float64),
            gamma=float(d["gamma"]),
            initial_dist=np.array(d["initial_dist"], dtype=np.float64),
            action_counts=tuple(d["action_counts"]),
        )
        if game.n_agents != d.get("n_agents", game.n_agents) or game.n_states != d.get(
            "n_states", game.n_states
        ):
            raise OracleError("n_agents/n_states disagree with table shapes")
        return game


def validate_game(game: TabularGame) -> None:
    S = game.reward.shape[0] if game.reward.ndim == 2 else -1
    J = int(np.prod(game.action_counts)) if game.action_counts else 0
    if game.reward.ndim != 2 or game.reward.shape[1] != J:
        raise OracleError(f"reward must have shape (S, {J}), got {game.reward.shape}")
    if game.transition.shape != (S, J, S):
        raise OracleError(f"transition must have shape {(S, J, S)}, got {game.transition.shape}")
    if game.initial_dist.shape != (S,):
        raise OracleError("initial_dist must be a vector over states")
    if any(a < 1 for a in game.action_counts) or S < 1:
        raise OracleError("need at least one state and one action per agent")
    if S * J > MAX_JOINT_ENTRIES:
        raise OracleError(f"game too large for dense oracle: {S * J} > {MAX_JOINT_ENTRIES}")
    if not (0.0 <= game.gamma < 1.0):
        raise OracleError(f"gamma must lie in [0, 1), got {game.gamma}")
    if not np.all(np.isfinite(game.reward)):
        raise OracleError("rewards must be finite")
    if np.any(game.transition < 0) or np.any(np.abs(game.transition.sum(-1) - 1) > _PROB_TOL):
        raise OracleError("transition rows must be probability vectors")
    if np.any(game.initial_dist < 0) or abs(game.initial_dist.sum() - 1) > _PROB_TOL:
        raise OracleError("initial_dist must be a probability vector")


def save_game(game: TabularGame, path) -> None:
    Path(path).write_text(json.dumps(game.to_dict()))


def load_game(path) -> TabularGame:
    return TabularGame.from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class TabularJointPolicy:
    """Product policy: one ``(S, A_i)`` probability table per agent."""

    tables: tuple[np.ndarray, ...]

    def __post_init__(self):
        tables = []
        for t in self.tables:
            arr = np.array(t, dtype=np.float64)
            arr.setflags(write=False)
            tables.append(arr)
        object.__setattr__(self, "tables", tuple(tables))
        for i, t in enumerate(self.tables):
            if t.ndim != 2:
                raise OracleError(f"policy table {i} must be 2-D")
            if np.any(t < 0) or np.any(t > 1) or np.any(np.abs(t.sum(1) - 1) > _PROB_TOL):
                raise OracleError(f"policy table {i} rows must be probability vectors")
        if len({t.shape[0] for t in self.tables}) > 1:
            raise OracleError("policy tables disagree on the number of states")

    def __getitem__(self, i: int) -> np.ndarray:
        return self.tables[i]

    def __len__(self) -> int:
        return len(self.tables)

    @property
    def action_counts(self) -> tuple[int, ...]:
        return tuple(t.shape[1] for t in self.tables)

    def replace(self, agent: int, table: np.ndarray) -> "TabularJointPolicy":
        tables = list(self.tables)
        tables[agent] = table
        return TabularJointPolicy(tuple(tables))

    def joint_probs(self) -> np.ndarray:
        """Joint action probabilities, shape ``(S, A_1, ..., A_n)``."""
        out = self.tables[0]
        for t in self.tables[1:]:
            out = out[..., None] * t.reshape((t.shape[0],) + (1,) * (out.ndim - 1) + (t.shape[1],))
        return out

    def joint_flat(self) -> np.ndarray:
        jp = self.joint_probs()
        return jp.reshape(jp.shape[0], -1)


def uniform_policy(game: TabularGame) -> TabularJointPolicy:
    return TabularJointPolicy(
        tuple(np.full((game.n_states, a), 1.0 / a) for a in game.action_counts)
    )


def _check_compatible(game: TabularGame, policy: TabularJointPolicy) -> None:
    if policy.action_counts != game.action_counts:
        raise OracleError(
            f"policy action counts {policy.action_counts} != game {game.action_counts}"
        )
    if policy.tables[0].shape[0] != game.n_states:
        raise OracleError("policy and game disagree on the number of states")


def random_game(
    seed,
    n_states: int = 3,
    action_counts: Sequence[int] = (2, 2),
    gamma: float = 0.9,
) -> TabularGame:
    """Dirichlet(1) transitions, uniform[-1, 1] rewards, Dirichlet(1) start."""
    rng = np.random.default_rng(seed)
    J = int(np.prod(action_counts))
    P = rng.dirichlet(np.ones(n_states), size=(n_states, J))
    r = rng.uniform(-1.0, 1.0, size=(n_states, J))
    mu = rng.dirichlet(np.ones(n_states))
    return TabularGame(P, r, gamma, mu, tuple(action_counts))


def random_policy(seed, game: TabularGame, floor: float = 1e-6) -> TabularJointPolicy:
    """Random strictly positive product policy (every entry at least ``floor``)."""
    rng = np.random.default_rng(seed)
    tables = []
    for a in game.action_counts:
        t = rng.dirichlet(np.ones(a), size=game.n_states)
        t = np.maximum(t, floor)
        tables.append(t / t.sum(1, keepdims=True))
    return TabularJointPolicy(tuple(tables))


def perturb_policy(
    seed, policy: TabularJointPolicy, scale: float = 0.5, agents=None
) -> TabularJointPolicy:
    """Multiply rows by ``exp(scale * noise)`` for the chosen agents."""
    rng = np.random.default_rng(seed)
    agents = range(len(policy)) if agents is None else agents
    out = policy
    for i in agents:
        t = policy[i] * np.exp(scale * rng.standard_normal(policy[i].shape))
        out = out.replace(i, t / t.sum(1, keepdims=True))
    return out


# --------------------------------------------------------------------------
# Policy evaluation


def policy_dynamics(game: TabularGame, policy: TabularJointPolicy):
    """State-to-state transition matrix and expected reward under ``policy``."""
    _check_compatible(game, policy)
    pj = policy.joint_flat()
    P_pi = np.einsum("sj,sjt->st", pj, game.transition)
    r_pi = np.einsum("sj,sj->s", pj, game.reward)
    return P_pi, r_pi


def exact_state_value(game: TabularGame, policy: TabularJointPolicy) -> np.ndarray:
    P_pi, r_pi = policy_dynamics(game, policy)
    lhs = np.eye(game.n_states) - game.gamma * P_pi
    try:
        V = np.linalg.solve(lhs, r_pi)
    except np.linalg.LinAlgError as exc:  # pragma: no cover - impossible for gamma < 1
        raise RuntimeError("policy evaluation system is singular") from exc
    scale = max(1.0, float(np.max(np.abs(r_pi))) / (1.0 - game.gamma))
    if np.max(np.abs(lhs @ V - r_pi)) > 1e-10 * scale:
        raise RuntimeError("policy evaluation residual too large")
    return V


def exact_q(game: TabularGame, policy: TabularJointPolicy) -> np.ndarray:
    """Joint action values, shape ``(S, J)``."""
    V = exact_state_value(game, policy)
    return game.reward + game.gamma * game.transition @ V


def exact_advantage(game: TabularGame, policy: TabularJointPolicy) -> np.ndarray:
    V = exact_state_value(game, policy)
    Q = game.reward + game.gamma * game.transition @ V
    return Q - V[:, None]


def exact_occupancy(game: TabularGame, policy: TabularJointPolicy) -> np.ndarray:
    """Unnormalized discounted state visitation; sums to ``1 / (1 - gamma)``."""
    P_pi, _ = policy_dynamics(game, policy)
    return np.linalg.solve(np.eye(game.n_states) - game.gamma * P_pi.T, game.initial_dist)


def normalized_occupancy(game: TabularGame, policy: TabularJointPolicy) -> np.ndarray:
    return (1.0 - game.gamma) * exact_occupancy(game, policy)


def joint_return(game: TabularGame, policy: TabularJointPolicy) -> float:
    return float(game.initial_dist @ exact_state_value(game, policy))


def optimal_joint_return(game: TabularGame, tol: float = 1e-13, max_iter: int = 100_000) -> float:
    """Best achievable return, by value iteration over joint actions.

    A deterministic joint policy attains the optimum and is a product policy,
    so this is also the optimum over product policies.
    """
    V = np.zeros(game.n_states)
    for _ in range(max_iter):
        V_new = (game.reward + game.gamma * game.transition @ V).max(axis=1)
        if np.max(np.abs(V_new - V)) < tol:
            V = V_new
            break
        V = V_new
    return float(game.initial_dist @ V)


# --------------------------------------------------------------------------
# Subset values and advantages


def _check_agents(game: TabularGame, agents: Sequence[int]) -> list[int]:
    agents = [int(i) for i in agents]
    if len(set(agents)) != len(agents):
        raise OracleError(f"duplicate agents in subset {agents}")
    if any(i < 0 or i >= game.n_agents for i in agents):
        raise OracleError(f"agent index out of range in {agents}")
    return agents


def subset_q_table(
    game: TabularGame, policy: TabularJointPolicy, subset: Sequence[int], Q=None
) -> np.ndarray:
    """Q of an ordered agent subset for all of its actions.

    Returns shape ``(S, A_{i_1}, ..., A_{i_m})``: the joint Q with every agent
    outside ``subset`` marginalized under its own policy.
    """
    subset = _check_agents(game, subset)
    if Q is None:
        Q = exact_q(game, policy)
    Qt = Q.reshape((game.n_states,) + game.action_counts)
    # Highest agent first so the axes of lower agents keep their positions.
    for i in reversed(range(game.n_agents)):
        if i not in subset:
            Qt = np.einsum("s...a,sa->s...", np.moveaxis(Qt, i + 1, -1), policy[i])
    remaining = sorted(subset)
    order = [remaining.index(i) + 1 for i in subset]
    return np.transpose(Qt, [0] + order)


def subset_q(
    game: TabularGame,
    policy: TabularJointPolicy,
    subset: Sequence[int],
    subset_actions: Sequence[int],
) -> np.ndarray:
    subset = _check_agents(game, subset)
    if len(subset_actions) != len(subset):
        raise OracleError("need exactly one action per subset agent")
    for i, a in zip(subset, subset_actions):
        if not 0 <= a < game.action_counts[i]:
            raise OracleError(f"action {a} out of range for agent {i}")
    table = subset_q_table(game, policy, subset)
    return table[(slice(None),) + tuple(int(a) for a in subset_actions)]


def subset_advantage(
    game: TabularGame,
    policy: TabularJointPolicy,
    given_subset: Sequence[int],
    given_actions: Sequence[int],
    eval_subset: Sequence[int],
    eval_actions: Sequence[int],
) -> np.ndarray:
    if set(given_subset) & set(eval_subset):
        raise OracleError("given and evaluated agent subsets must be disjoint")
    joint = subset_q(
        game, policy, list(given_subset) + list(eval_subset), list(given_actions) + list(eval_actions)
    )
    return joint - subset_q(game, policy, given_subset, given_actions)


def conditional_advantage_table(
    game: TabularGame, policy: TabularJointPolicy, predecessors: Sequence[int], agent: int, Q=None
) -> np.ndarray:
    """``A^{agent}(s, a^{pred}, a^{agent})`` for every action, shape ``(S, A_pred..., A_agent)``."""
    if Q is None:
        Q = exact_q(game, policy)
    with_agent = subset_q_table(game, policy, list(predecessors) + [agent], Q=Q)
    without = subset_q_table(game, policy, list(predecessors), Q=Q)
    return with_agent - without[..., None]


def check_advantage_decomposition(
    game: TabularGame,
    policy: TabularJointPolicy,
    subset: Sequence[int],
    drop_term: int | None = None,
) -> float:
    """Max error of the sequential advantage decomposition over ``subset``.

    ``drop_term`` omits one summand; it exists only as a negative control.
    """
    subset = _check_agents(game, subset)
    if not subset:
        raise OracleError("subset must be nonempty")
    Q = exact_q(game, policy)
    # V as the fully marginalized Q, so a one-agent subset matches exactly
    V = subset_q_table(game, policy, [], Q=Q)
    lhs = subset_q_table(game, policy, subset, Q=Q) - V.reshape((-1,) + (1,) * len(subset))
    rhs = np.zeros_like(lhs)
    for j, agent in enumerate(subset):
        if j == drop_term:
            continue
        term = conditional_advantage_table(game, policy, subset[:j], agent, Q=Q)
        rhs = rhs + term.reshape(term.shape + (1,) * (len(subset) - j - 1))
    return float(np.max(np.abs(lhs - rhs)))


# --------------------------------------------------------------------------
# Surrogates, estimator identity, improvement bound


def _expect_over(table: np.ndarray, agents_tables: Sequence[np.ndarray]) -> np.ndarray:
    """Contract the trailing ``len(agents_tables)`` action axes of ``table``."""
    out = table
    for t in reversed(agents_tables):
        out = np.einsum("s...a,sa->s...", out, t)
    return out


def _check_ordering(game, ordering, bar_policies):
    ordering = _check_agents(game, ordering)
    if not ordering:
        raise OracleError("ordering must name at least one agent")
    if len(bar_policies) != len(ordering) - 1:
        raise OracleError(
            f"need {len(ordering) - 1} predecessor tables for ordering {ordering}, got {len(bar_policies)}"
        )
    for agent, table in zip(ordering, bar_policies):
        if np.shape(table) != (game.n_states, game.action_counts[agent]):
            raise OracleError(f"table for agent {agent} has the wrong shape")
    return ordering


def conditional_expected_advantage(
    game: TabularGame, base: TabularJointPolicy, bar_policies, hat_policy, ordering, Q=None
) -> np.ndarray:
    """Per state ``E_{a^{pred}~bar, a^{i_m}~hat}[A^{i_m}_base]``."""
    ordering = _check_ordering(game, ordering, bar_policies)
    table = conditional_advantage_table(game, base, ordering[:-1], ordering[-1], Q=Q)
    return _expect_over(table, list(bar_policies) + [np.asarray(hat_policy)])


def surrogate_objective(
    game: TabularGame, base: TabularJointPolicy, bar_policies, hat_policy, ordering
) -> float:
    per_state = conditional_expected_advantage(game, base, bar_policies, hat_policy, ordering)
    return float(exact_occupancy(game, base) @ per_state)


def estimator_identity_check(
    game: TabularGame, base: TabularJointPolicy, bar_policies, hat_policy, ordering
) -> float:
    """Max over states of |direct conditional advantage - importance-weighted form|."""
    ordering = _check_ordering(game, ordering, bar_policies)
    hat_policy = np.asarray(hat_policy, dtype=np.float64)
    targets = list(bar_policies) + [hat_policy]
    for agent, target in zip(ordering, targets):
        if np.any((base[agent] == 0) & (target > 0)):
            raise OracleError(f"base policy of agent {agent} has zero mass where the target does not")
    Q = exact_q(game, base)
    lhs = conditional_expected_advantage(game, base, bar_policies, hat_policy, ordering, Q=Q)

    A = (Q - exact_state_value(game, base)[:, None]).reshape((game.n_states,) + game.action_counts)
    shape = lambda i: (game.n_states,) + tuple(
        game.action_counts[i] if k == i else 1 for k in range(game.n_agents)
    )
    with np.errstate(divide="ignore", invalid="ignore"):
        weight = np.ones_like(A)
        for agent, target in zip(ordering[:-1], bar_policies):
            ratio = np.where(base[agent] > 0, np.asarray(target) / base[agent], 0.0)
            weight = weight * ratio.reshape(shape(agent))
        last = ordering[-1]
        hat_ratio = np.where(base[last] > 0, hat_policy / base[last], 0.0)
        weight = weight * (hat_ratio - 1.0).reshape(shape(last))
    rhs = (base.joint_probs() * weight * A).reshape(game.n_states, -1).sum(1)
    return float(np.max(np.abs(lhs - rhs)))


def kl_rows(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Row-wise KL(p || q) for probability tables; zero-mass entries of p contribute 0."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if np.any((q == 0) & (p > 0)):
        raise OracleError("KL is infinite: q has zero mass where p does not")
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * (np.log(p) - np.log(np.where(q > 0, q, 1.0))), 0.0)
    return terms.sum(-1)


def joint_kl_decomposition_check(
    p: TabularJointPolicy, q: TabularJointPolicy, state: int
) -> float:
    if p.action_counts != q.action_counts:
        raise OracleError("policies have different action spaces")
    pj = p.joint_probs()[state].ravel()
    qj = q.joint_probs()[state].ravel()
    joint = float(kl_rows(pj, qj))
    per_agent = sum(float(kl_rows(p[i][state], q[i][state])) for i in range(len(p)))
    return abs(joint - per_agent)


@dataclass
class ImprovementBoundReport:
    J_old: float
    J_new: float
    surrogate_terms: list[float]
    penalty_constant: float
    max_kls: list[float]
    rhs: float
    holds: bool = field(init=False)

    def __post_init__(self):
        self.holds = bool(self.J_new >= self.rhs - 1e-9)


def improvement_bound_check(
    game: TabularGame, old: TabularJointPolicy, new: TabularJointPolicy, ordering
) -> ImprovementBoundReport:
    ordering = _check_agents(game, ordering)
    if sorted(ordering) != list(range(game.n_agents)):
        raise OracleError("ordering must be a permutation of all agents")
    A = exact_advantage(game, old)
    Q = A + exact_state_value(game, old)[:, None]
    rho = exact_occupancy(game, old)
    terms = []
    for m in range(len(ordering)):
        bars = [new[i] for i in ordering[:m]]
        per_state = conditional_expected_advantage(game, old, bars, new[ordering[m]], ordering[: m + 1], Q=Q)
        terms.append(float(rho @ per_state))
    C = 4.0 * game.gamma * float(np.max(np.abs(A))) / (1.0 - game.gamma) ** 2
    max_kls = [float(np.max(kl_rows(old[i], new[i]))) for i in ordering]
    J_old = joint_return(game, old)
    rhs = J_old + sum(L - C * d for L, d in zip(terms, max_kls))
    return ImprovementBoundReport(
        J_old=J_old,
        J_new=joint_return(game, new),
        surrogate_terms=terms,
        penalty_constant=C,
        max_kls=max_kls,
        rhs=rhs,
    )


# --------------------------------------------------------------------------
# Closed-form sequential mirror-descent step


def mirror_descent_row_update(table: np.ndarray, scores: np.ndarray, t_k: float) -> np.ndarray:
    """Row-wise maximizer of ``<scores, p> - KL(p, table) / t_k``: ``p ~ table * exp(t_k * scores)``."""
    logits = t_k * scores
    logits = logits - logits.max(axis=1, keepdims=True)
    with np.errstate(divide="ignore"):
        w = np.where(table > 0, table * np.exp(logits), 0.0)
    return w / w.sum(axis=1, keepdims=True)


def exact_hamdpo_step(
    game: TabularGame, policy: TabularJointPolicy, t_k: float, ordering=None
) -> TabularJointPolicy:
    if t_k <= 0:
        raise OracleError("step size must be positive")
    ordering = list(range(game.n_agents)) if ordering is None else _check_agents(game, ordering)
    Q = exact_q(game, policy)
    new = policy
    for m, agent in enumerate(ordering):
        preds = ordering[:m]
        table = conditional_advantage_table(game, policy, preds, agent, Q=Q)
        scores = _expect_over(np.moveaxis(table, -1, 1), [new[i] for i in preds])
        new = new.replace(agent, mirror_descent_row_update(policy[agent], scores, t_k))
    return new
