"""
Quantiles of the calibrated predictive distribution
====================================================

The calibrated CDF mixes the Gaussian CDF with its recalibrated version.  It
has no closed-form inverse, so quantiles come from bracketing and bisection.
"""

import numpy as np

from metacal import adapt, gen_gp_tasks, init_params, invert_cdf

task = gen_gp_tasks(1, 40, noise_shape="skewed", noise_std=0.3, seed=2).tasks[0]
support, query = task.take(np.arange(10)), task.take(np.arange(10, 15))
params = init_params(1, 0)

adapted = adapt(params, support, query.features)
levels = np.array([0.05, 0.25, 0.5, 0.75, 0.95])
q = invert_cdf(adapted.cdf, levels)

for j in range(len(query)):
    band = "  ".join(f"{v:6.2f}" for v in q[:, j])
    print(f"x={query.features[j, 0]:5.2f}  mean={adapted.mean[j]:6.2f}  quantiles: {band}  y={query.targets[j]:6.2f}")

# evaluating the CDF at its own quantiles gives the levels back
print("round trip error:", float(np.max(np.abs(adapted.cdf(q) - levels[:, None]))))
