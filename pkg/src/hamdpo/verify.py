"""Exact-oracle verification suite over seeded random tabular games.

Each identity is checked on every game and reported as its worst error against
a fixed tolerance.  ``corrupt=True`` deliberately drops one summand of the
advantage decomposition so the suite can prove it detects a broken oracle.
"""
from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tabular as tb

TOLERANCES = {
    "advantage_decomposition": 1e-10,
    "kl_decomposition": 1e-12,
    "estimator_identity": 1e-10,
    "improvement_bound": 1e-9,
    "mirror_descent_monotone": 1e-9,
}


@dataclass
class IdentityResult:
    name: str
    max_error: float
    tolerance: float
    checks: int
    passed: bool = field(init=False)

    def __post_init__(self):
        self.passed = bool(np.isfinite(self.max_error) and self.max_error < self.tolerance)


@dataclass
class VerificationReport:
    seed: int
    games: int
    agent_counts: list[int]
    corrupt: bool
    results: list[IdentityResult]

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "games": self.games,
            "agent_counts": self.agent_counts,
            "corrupt": self.corrupt,
            "pass": self.passed,
            "identities": [
                {"name": r.name, "max_error": r.max_error, "tolerance": r.tolerance, "checks": r.checks, "pass": r.passed}
                for r in self.results
            ],
        }

    def write(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")


def game_instances(seed: int, games: int, agent_counts=(2, 3)):
    """Seeded games with |S| in 2..5 and 2 or 3 actions per agent."""
    ss = np.random.SeedSequence(seed)
    for i, child in enumerate(ss.spawn(games)):
        rng = np.random.default_rng(child)
        n = agent_counts[i % len(agent_counts)]
        counts = tuple(int(c) for c in rng.integers(2, 4, size=n))
        n_states = int(rng.integers(2, 6))
        yield tb.random_game(rng.integers(2**32), n_states, counts, gamma=float(rng.uniform(0.5, 0.95))), rng


def _seed(rng) -> int:
    return int(rng.integers(2**32))


def run_verification(
    seed: int = 0,
    games: int = 100,
    agent_counts=(2, 3),
    kl_pairs: int = 10,
    bound_pairs: int = 10,
    corrupt: bool = False,
) -> VerificationReport:
    if games < 1 or kl_pairs < 1 or bound_pairs < 1:
        raise ValueError("instance counts must be at least 1")
    worst = dict.fromkeys(TOLERANCES, 0.0)
    checks = dict.fromkeys(TOLERANCES, 0)

    def record(name, err):
        worst[name] = max(worst[name], float(err)) if np.isfinite(err) else float("inf")
        checks[name] += 1

    for game, rng in game_instances(seed, games, tuple(agent_counts)):
        n = game.n_agents
        pol = tb.random_policy(_seed(rng), game)
        for order in itertools.permutations(range(n)):
            drop = (1 if n > 1 else 0) if corrupt else None
            record("advantage_decomposition", tb.check_advantage_decomposition(game, pol, list(order), drop))

        for _ in range(kl_pairs):
            p, q = tb.random_policy(_seed(rng), game), tb.random_policy(_seed(rng), game)
            record("kl_decomposition", tb.joint_kl_decomposition_check(p, q, int(rng.integers(game.n_states))))

        order = [int(i) for i in rng.permutation(n)]
        other = tb.random_policy(_seed(rng), game)
        bars = [other[i] for i in order[:-1]]
        record("estimator_identity", tb.estimator_identity_check(game, pol, bars, other[order[-1]], order))

        for _ in range(bound_pairs):
            old = tb.random_policy(_seed(rng), game)
            new = tb.perturb_policy(_seed(rng), old, scale=float(rng.uniform(0.01, 2.0)))
            rep = tb.improvement_bound_check(game, old, new, [int(i) for i in rng.permutation(n)])
            record("improvement_bound", max(0.0, rep.rhs - rep.J_new))

        step = tb.exact_hamdpo_step(game, pol, float(rng.uniform(0.1, 5.0)), [int(i) for i in rng.permutation(n)])
        record("mirror_descent_monotone", max(0.0, tb.joint_return(game, pol) - tb.joint_return(game, step)))

    results = [IdentityResult(name, worst[name], TOLERANCES[name], checks[name]) for name in TOLERANCES]
    return VerificationReport(seed, games, list(agent_counts), corrupt, results)
