"""
How many gradient steps per agent?
==================================

With one step the update is a vanilla policy gradient step: the KL term has
zero gradient at the old policy.  More steps let the KL penalty shape the
update.  Here we count iterations until the batch return first reaches 0.9.
"""

from dataclasses import replace
from pathlib import Path

from hamdpo import cli

config = Path(__file__).resolve().parents[1] / "configs" / "matrix_game.toml"
exp = cli.load_config(config)

for g in (1, 4, 10):
    reached = []
    for seed in range(3):
        trainer = replace(exp.trainer, sgd_steps=g, seed=seed, iterations=60)
        out = Path("runs/notebook_sgd_steps") / f"g{g}_seed{seed}"
        summary = cli.run_experiment(replace(exp, trainer=trainer), out, threshold=0.9)
        reached.append(summary["iterations_to_threshold"])
    print(f"g={g:2d}: iterations to 0.9 per seed {reached}")
