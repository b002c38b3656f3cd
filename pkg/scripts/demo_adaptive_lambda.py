"""
Growing the regularization weight until the generator starts to lose
===================================================================

The weight on the perceptual term starts at zero and climbs by a fixed step
every few iterations. Once a smoothed adversarial loss crosses the threshold
the weight freezes for good. Here the adversarial loss is scripted so the
rule can be watched in isolation.
"""
import math

import numpy as np

from regattn.training import AdaptiveLambdaState, lambda_step

rng = np.random.default_rng(0)

###############################################################################
# A synthetic adversarial loss
# ----------------------------
# It starts near log 2 (the generator holds its own) and rises as the
# regularizer takes over, with some noise on top.

n = 1200
adv = 0.6 + 0.00025 * np.arange(n) + rng.normal(0, 0.05, n)
threshold = 1.2 * math.log(2)
print(f"threshold {threshold:.4f}")

###############################################################################
# Replay the rule
# ---------------

state = AdaptiveLambdaState(threshold=threshold, step_size=0.1, interval=100, ema_decay=0.9)
for k, a in enumerate(adv, start=1):
    was_frozen = state.frozen
    state = lambda_step(state, float(a))
    if k % 100 == 0 or (state.frozen and not was_frozen):
        tag = "  <- froze" if state.frozen and not was_frozen else ""
        print(f"step {k:>5}  adv {a:.3f}  ema {state.adv_ema:.3f}  lambda {state.lam:.1f}{tag}")

###############################################################################
# Freezing is permanent
# ---------------------
# Even a run of very low losses afterwards leaves the weight where it was.

held = state.lam
for _ in range(500):
    state = lambda_step(state, 0.0)
print(f"after 500 more steps at adv = 0: lambda {state.lam:.1f} (held {held:.1f}), "
      f"frozen {state.frozen}")
