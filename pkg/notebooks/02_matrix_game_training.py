"""
Learning to coordinate in a matrix game
=======================================

Two agents each pick one of three actions.  Only one joint action pays 1 and
a miscoordinated pick of the target action costs 0.5, so each agent has to learn
while the other is also moving.
"""

import numpy as np

from hamdpo import envs, nn
from hamdpo import trainer as tr

env = envs.matrix_game(3, target=0)
cfg = tr.TrainerConfig(
    iterations=40,
    sgd_steps=10,
    learning_rate=0.5,
    episodes_per_iteration=64,
    hidden=(16,),
    critic_lr=0.05,
    seed=0,
)


def target_probability(state):
    probs = [nn.policy_forward(p, np.ones(1)).probs for p in state.policies]
    return probs[0][0] * probs[1][0]


###############################################################################
# Each iteration draws a fresh agent order.  The second agent's objective is
# reweighted by the first agent's probability ratio, which the per-update
# report records.

state, history = tr.train(env, cfg)
for m in history[:8]:
    kls = ", ".join(f"{k:.3f}" for k in m["agent_kl"])
    print(f"iter {m['iteration']:2d}  order {m['order']}  return {m['mean_return']:+.3f}  KL [{kls}]")
print("P(target joint action) =", target_probability(state))

###############################################################################
# Independent learners for comparison
# ------------------------------------
# The same plumbing without the ratio correction.

ind_state, ind_history = tr.train(env, tr.TrainerConfig(**{**cfg.__dict__, "algorithm": "independent_pg"}))
print("independent learners, final return:", np.mean([m["mean_return"] for m in ind_history[-10:]]))
