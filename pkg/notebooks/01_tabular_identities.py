"""
Exact identities on a small Markov game
=======================================

Everything here is computed exactly: no sampling, no networks.  We build a
random two-agent game, evaluate a joint policy by a linear solve, and check the
facts the learning algorithm relies on.
"""

import numpy as np

from hamdpo import tabular as tb

# A game with 3 states, agents with 2 and 3 actions, and a random policy.
game = tb.random_game(0, n_states=3, action_counts=(2, 3), gamma=0.9)
policy = tb.random_policy(1, game)
print("J(pi) =", tb.joint_return(game, policy))
print("best achievable J =", tb.optimal_joint_return(game))

###############################################################################
# Advantage decomposition
# -----------------------
# The joint advantage splits into per-agent advantages, each conditioned on the
# actions of the agents before it.  The error is at rounding level for either
# agent order, and clearly nonzero if we drop one of the terms.

for order in ([0, 1], [1, 0]):
    print(order, tb.check_advantage_decomposition(game, policy, order))
print("one term dropped:", tb.check_advantage_decomposition(game, policy, [0, 1], drop_term=1))

###############################################################################
# KL of a product policy
# ----------------------
# Because agents act independently, the joint KL is the sum of per-agent KLs.

other = tb.random_policy(2, game)
print("joint vs summed KL:", tb.joint_kl_decomposition_check(policy, other, state=0))

###############################################################################
# One sequential mirror-descent step
# ----------------------------------
# Each agent in turn moves to ``old * exp(t * advantage)`` against the already
# updated predecessors.  The improvement bound holds, and so does plain
# monotonic improvement.

new = tb.exact_hamdpo_step(game, policy, t_k=1.0, ordering=[1, 0])
bound = tb.improvement_bound_check(game, policy, new, [1, 0])
print(f"J: {bound.J_old:.4f} -> {bound.J_new:.4f}, lower bound {bound.rhs:.4f}, holds={bound.holds}")

###############################################################################
# Iterating the step drives the joint policy toward the optimum.

p = tb.uniform_policy(game)
rng = np.random.default_rng(0)
for k in range(200):
    p = tb.exact_hamdpo_step(game, p, 0.5, [int(i) for i in rng.permutation(2)])
print("after 200 steps:", tb.joint_return(game, p))
