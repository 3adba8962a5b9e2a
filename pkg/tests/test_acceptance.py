"""Acceptance criteria 1-10.

Each test prints one ``ACCEPTANCE <n> PASS|FAIL`` line with its measured
numbers; the lines are also repeated in the pytest terminal summary.
Run alone with ``pytest tests/test_acceptance.py -v``.
"""
import itertools
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from hamdpo import cli, envs, nn, verify
from hamdpo import rollout as ro
from hamdpo import tabular as tb
from hamdpo import trainer as tr
from hamdpo.autodiff import parameters

ROOT = Path(__file__).resolve().parents[1]
CONFIGS = ROOT / "configs"
RESULTS: dict[int, str] = {}


def report(n: int, ok: bool, detail: str) -> None:
    line = f"ACCEPTANCE {n:>2} {'PASS' if ok else 'FAIL'}: {detail}"
    RESULTS[n] = line
    print(line)
    assert ok, line


class Timer:
    def __enter__(self):
        self.start = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.seconds = time.perf_counter() - self.start


# -- 1-4: exact oracle identities ------------------------------------------------------------


def test_01_advantage_decomposition():
    worst, checks = 0.0, 0
    with Timer() as t:
        for game, rng in verify.game_instances(101, 100, (2, 3)):
            assert game.n_states <= 5 and max(game.action_counts) <= 3
            pol = tb.random_policy(int(rng.integers(2**32)), game)
            for order in itertools.permutations(range(game.n_agents)):
                worst = max(worst, tb.check_advantage_decomposition(game, pol, list(order)))
                checks += 1
    report(1, worst < 1e-10 and t.seconds < 30, f"max error {worst:.2e} over {checks} orderings, {t.seconds:.1f}s")


def test_02_kl_decomposition():
    worst = 0.0
    rng = np.random.default_rng(202)
    with Timer() as t:
        for _ in range(1000):
            n = int(rng.integers(2, 4))
            counts = tuple(int(c) for c in rng.integers(2, 4, size=n))
            game = tb.random_game(int(rng.integers(2**32)), 2, counts)
            p = tb.random_policy(int(rng.integers(2**32)), game)
            q = tb.random_policy(int(rng.integers(2**32)), game)
            worst = max(worst, tb.joint_kl_decomposition_check(p, q, int(rng.integers(2))))
    report(2, worst < 1e-12 and t.seconds < 5, f"max error {worst:.2e} over 1000 pairs, {t.seconds:.1f}s")


def test_03_estimator_identity():
    worst = 0.0
    with Timer() as t:
        for game, rng in verify.game_instances(303, 100, (2, 3)):
            base = tb.random_policy(int(rng.integers(2**32)), game)
            other = tb.random_policy(int(rng.integers(2**32)), game)
            order = [int(i) for i in rng.permutation(game.n_agents)]
            m = int(rng.integers(1, game.n_agents + 1))  # prefix length: the updated agent is order[m-1]
            bars = [other[i] for i in order[: m - 1]]
            worst = max(worst, tb.estimator_identity_check(game, base, bars, other[order[m - 1]], order[:m]))
    report(3, worst < 1e-10 and t.seconds < 30, f"max error {worst:.2e} over 100 triples, {t.seconds:.1f}s")


def test_04_improvement_bound():
    violations, slack, checks = 0, np.inf, 0
    with Timer() as t:
        for game, rng in verify.game_instances(404, 8, (2, 3)):
            for _ in range(100):
                old = tb.random_policy(int(rng.integers(2**32)), game)
                new = tb.perturb_policy(int(rng.integers(2**32)), old, scale=float(rng.uniform(0.01, 2.0)))
                rep = tb.improvement_bound_check(game, old, new, [int(i) for i in rng.permutation(game.n_agents)])
                violations += not rep.holds
                slack = min(slack, rep.J_new - rep.rhs)
                checks += 1
    report(
        4,
        violations == 0 and t.seconds < 60,
        f"{violations} violations in {checks} pairs over 8 games, min slack {slack:.3g}, {t.seconds:.1f}s",
    )


# -- 5-6: gradients -----------------------------------------------------------------------


def fd_gradient(f, arrays, h=1e-3):
    """Fourth-order central differences over every entry of ``arrays``."""
    x = nn.flatten(arrays)
    out = np.zeros_like(x)
    for j in range(len(x)):
        def at(d):
            xp = x.copy()
            xp[j] += d
            return f(nn.unflatten(xp, arrays))
        out[j] = (-at(2 * h) + 8 * at(h) - 8 * at(-h) + at(-2 * h)) / (12 * h)
    return out


def max_relative_error(analytic, numeric, floor=1e-8):
    # below ``floor`` the differences are finite-difference roundoff (about 1e-13 here)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))


def policy_batch(env, hidden=(64, 64), episodes=4, seed=0):
    pols = [
        nn.init_policy(d, sp.head, seed + i, hidden=hidden)
        for i, (d, sp) in enumerate(zip(env.spec.obs_dims, env.spec.action_spaces))
    ]
    b = ro.collect(env, pols, episodes, seed)
    return pols, ro.normalize_advantages(ro.compute_gae(b, None, ro.GaeConfig())).reset_m()


def moved(arrays, rng, scale):
    return [a + scale * rng.standard_normal(a.shape) for a in arrays]


def clip_safe_theta(policy, batch, eps, rng):
    """Parameters where some ratios are clipped and none sit near a clip kink."""
    for _ in range(200):
        theta = moved(policy.arrays(), rng, 0.3)
        dist = nn.policy_forward(policy, batch.observations[0], theta)
        ratio = np.exp(nn.log_prob(dist, batch.actions[0]).data - batch.old_log_probs[0])
        margin = np.min(np.abs(ratio[:, None] - np.array([1 - eps, 1 + eps])))
        outside = np.any((ratio < 1 - eps) | (ratio > 1 + eps))
        if margin > 0.02 and outside:
            return theta
    raise RuntimeError("no kink-free parameter point found")


def test_05_gradient_correctness():
    rng = np.random.default_rng(505)
    gather = envs.continuous_gather(2, [1.0, 0.5], horizon=4)
    spread = envs.spread_grid(5, 2, horizon=4, seed=0)
    g_pols, g_batch = policy_batch(gather)
    s_pols, s_batch = policy_batch(spread)
    critic = nn.init_value(gather.spec.state_dim, 1, hidden=(64, 64))
    g_batch.returns = g_batch.returns + 0.1 * rng.standard_normal(len(g_batch))
    t_k = 0.5

    cases = {
        "hamdpo/gaussian": (
            lambda L: tr.hamdpo_agent_loss(g_pols[0], L, g_pols[0], g_batch, 0, t_k),
            moved(g_pols[0].arrays(), rng, 0.05),
        ),
        "hamdpo/categorical": (
            lambda L: tr.hamdpo_agent_loss(s_pols[0], L, s_pols[0], s_batch, 0, t_k),
            moved(s_pols[0].arrays(), rng, 0.05),
        ),
        "independent_pg/gaussian": (
            lambda L: tr.hamdpo_agent_loss(g_pols[1], L, g_pols[1], g_batch, 1, None),
            moved(g_pols[1].arrays(), rng, 0.05),
        ),
        "happo_clip/categorical": (
            lambda L: tr.happo_clip_agent_loss(s_pols[0], L, s_batch, 0, 0.2),
            clip_safe_theta(s_pols[0], s_batch, 0.2, rng),
        ),
        "critic": (
            lambda L: ro._critic_loss(critic, g_batch.states, g_batch.returns, L),
            moved(nn.value_arrays(critic), rng, 0.05),
        ),
    }
    game = tb.random_game(5, 4, (3, 2))
    old = tb.random_policy(6, game)
    W = rng.standard_normal((4, 3))
    d = tb.normalized_occupancy(game, old)
    cases["exact_tabular"] = (
        lambda L: tr.exact_agent_loss(L, old[0], W, d, t_k),
        [rng.standard_normal((4, 3))],
    )

    errors = {}
    with Timer() as t:
        for name, (loss_fn, theta) in cases.items():
            _, analytic = nn.loss_and_grad(loss_fn, theta)
            numeric = fd_gradient(lambda arrs: loss_fn(parameters(arrs)).item(), theta)
            errors[name] = max_relative_error(analytic, numeric)
    worst = max(errors.values())
    detail = ", ".join(f"{k} {v:.1e}" for k, v in errors.items())
    report(5, worst < 1e-5 and t.seconds < 60, f"max relative error {worst:.1e} ({detail}), {t.seconds:.1f}s")


def test_06_kl_degeneracy():
    env = envs.continuous_gather(2, [1.0, 0.5], horizon=5)
    worst_kl = 0.0
    for env_i in (env, envs.spread_grid(5, 2, horizon=5, seed=0)):
        pols, batch = policy_batch(env_i)
        for i, p in enumerate(pols):
            old = nn.policy_forward(p, batch.observations[i])
            _, g = nn.loss_and_grad(
                lambda L: nn.kl_closed_form(nn.policy_forward(p, batch.observations[i], L), old).mean(), p.arrays()
            )
            worst_kl = max(worst_kl, float(np.linalg.norm(g)))

    pols, batch = policy_batch(env)
    cfg = tr.TrainerConfig(sgd_steps=1, learning_rate=0.01)
    new, _ = tr.update_agent(0, batch, pols[0], 0.3, cfg)
    _, pg = nn.loss_and_grad(
        lambda L: (nn.log_prob(nn.policy_forward(pols[0], batch.observations[0], L), batch.actions[0]) * batch.m_weight).mean(),
        pols[0].arrays(),
    )
    step_gap = float(np.max(np.abs(new.flat() - (pols[0].flat() + 0.01 * pg))))
    report(
        6,
        worst_kl < 1e-8 and step_gap < 1e-10,
        f"max |grad KL| at old policy {worst_kl:.1e}, one-step gap to vanilla PG {step_gap:.1e}",
    )


# -- 7: exact-advantage monotonicity ------------------------------------------------------


def test_07_exact_monotonicity():
    drops = {"sgd": np.inf, "closed_form": np.inf}
    with Timer() as t:
        for game, rng in verify.game_instances(707, 20, (2, 3)):
            seed = int(rng.integers(2**32))
            for mode in drops:
                R, _ = tr.exact_tabular_train(game, 200, 1.0, 10, 1.0, seed, closed_form=mode == "closed_form")
                drops[mode] = min(drops[mode], float(np.min(np.diff(R))))
    worst = min(drops.values())
    report(
        7,
        worst >= -1e-9 and t.seconds < 120,
        f"smallest per-iteration change in J: gradient-step mode {drops['sgd']:.2e}, "
        f"closed-form mode {drops['closed_form']:.2e} (20 games x 200 iterations), {t.seconds:.1f}s",
    )


# -- 8-10: learning runs ------------------------------------------------------------------


def target_probability(state, target=0):
    p = [nn.policy_forward(q, np.ones(1)).probs for q in state.policies]
    return float(p[0][target] * p[1][target])


class StopTraining(Exception):
    pass


def matrix_hit_iteration(seed):
    exp = cli.load_config(CONFIGS / "matrix_game.toml")
    cfg = replace(exp.trainer, seed=seed)

    def cb(state, metrics):
        if target_probability(state) > 0.95:
            raise StopTraining(metrics["iteration"] + 1)

    try:
        tr.train(exp.make_env(), cfg, callback=cb)
    except StopTraining as hit:
        return hit.args[0]
    return None


def evaluate(env, policies, episodes=200, seed=10**6):
    """Mean undiscounted return on a fixed set of held-out episodes."""
    return float(ro.collect(env, policies, episodes, seed).episode_returns().mean())


def gather_run(seed):
    exp = cli.load_config(CONFIGS / "continuous_gather.toml")
    cfg = replace(exp.trainer, seed=seed)
    env = exp.make_env()
    initial = evaluate(env, tr.init_state(env, cfg).policies)
    state, hist = tr.train(env, cfg)
    clipped = sum(m["grad_clipped"] for m in hist)
    return initial, evaluate(env, state.policies), clipped


def test_08_desk_scale_learning():
    with Timer() as t:
        hits = [matrix_hit_iteration(s) for s in range(5)]
        runs = [gather_run(s) for s in range(5)]
    solved = sum(h is not None and h <= 300 for h in hits)
    initial = np.array([r[0] for r in runs])
    final = np.array([r[1] for r in runs])
    gain = final - initial
    spread = max(final.std(ddof=1), gain.std(ddof=1))
    clip_events = sum(r[2] for r in runs)
    ok = solved >= 4 and gain.mean() >= 5 * spread and t.seconds < 600
    report(
        8,
        ok,
        f"matrix_game solved on {solved}/5 seeds (iterations {hits}); continuous_gather held-out return "
        f"{initial.mean():.2f} -> {final.mean():.2f}, gain {gain.mean():.2f} vs 5 x std {5 * spread:.2f}; "
        f"gradient clip events {clip_events}; {t.seconds:.0f}s",
    )


def test_09_sgd_steps_ablation(tmp_path):
    exp = cli.load_config(CONFIGS / "matrix_game.toml")
    wins, table = 0, []
    for seed in range(5):
        its = {}
        for g in (1, 10):
            sub = replace(exp, trainer=replace(exp.trainer, seed=seed, sgd_steps=g))
            summary = cli.run_experiment(sub, tmp_path / f"s{seed}_g{g}", threshold=0.9)
            its[g] = summary["iterations_to_threshold"]
        table.append((its[1], its[10]))
        fast = its[10] is not None and (its[1] is None or its[10] < its[1])
        wins += fast
    report(9, wins >= 4, f"g=10 reaches return 0.9 first on {wins}/5 seeds; (g=1, g=10) iterations {table}")


def test_10_determinism(tmp_path, monkeypatch):
    same = []
    for config in sorted(CONFIGS.glob("*.toml")):
        files = []
        for run in ("a", "b"):
            out = tmp_path / config.stem / run
            monkeypatch.setenv(cli.OUTPUT_ENV, str(out))
            assert cli.main(["train", str(config)]) == cli.EXIT_OK
            files.append((out / "metrics.csv").read_bytes())
        same.append((config.stem, files[0] == files[1]))
    report(10, all(s for _, s in same), "byte-identical metrics on repeat: " + ", ".join(f"{n} {s}" for n, s in same))
