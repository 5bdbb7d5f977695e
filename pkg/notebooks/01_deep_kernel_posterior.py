"""
Adapting a deep-kernel GP to a few support points
==================================================

A freshly initialised model is adapted to ten noisy points from one synthetic
task.  Adaptation is the closed-form GP posterior, so there is no inner-loop
optimisation: the mean and variance at any query input follow directly.
"""

import numpy as np

from metacal import TaskDataset, gen_gp_tasks, gp_posterior, init_params

task = gen_gp_tasks(1, 40, noise_shape="gaussian", noise_std=0.1, seed=0).tasks[0]
support = task.take(np.arange(10))
params = init_params(feature_dim=1, rng=0)

grid = np.linspace(-2, 2, 9)[:, None]
post = gp_posterior(params, support, grid)

print("   x      mean   std")
for x, m, v in zip(grid[:, 0], post.mean, post.variance):
    print(f"{x:5.1f}  {m:7.3f}  {np.sqrt(v):5.3f}")

# far from the support the posterior falls back to the prior: mean -> mu(x),
# variance -> 1 + beta
far = gp_posterior(params, support, np.array([50.0]), identity_encoder=True)
print("far away:", round(far.mean, 4), round(far.variance, 4), "prior variance", round(1 + params.beta, 4))

# one more support point can only shrink the variance
more = gp_posterior(params, TaskDataset("more", task.features[:11], task.targets[:11]), grid)
print("variance never grows:", bool(np.all(more.variance <= post.variance + 1e-12)))
