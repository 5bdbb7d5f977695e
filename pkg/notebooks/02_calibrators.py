"""
Mixture calibration versus the empirical step calibrator
=========================================================

The uncalibrated CDF values of the support points become the component means
of a Gaussian mixture.  Its CDF ``r`` recalibrates the Gaussian predictive CDF.
As the shared width shrinks, ``r`` approaches the empirical step function.
"""

import numpy as np

from metacal import (
    GmmCalibrator,
    apply_r,
    apply_r_emp,
    fit_empirical_calibrator,
)

levels = np.array([0.05, 0.2, 0.22, 0.5, 0.9])   # hU at five support points
emp = fit_empirical_calibrator(levels)

p = np.linspace(0, 1, 11)
print("  p    r_emp  r(0.1)  r(0.01)  r(1e-4)")
for pi in p:
    row = [apply_r(GmmCalibrator(levels, s), pi) for s in (0.1, 0.01, 1e-4)]
    print(f"{pi:4.1f}  {apply_r_emp(emp, pi):5.2f}  " + "  ".join(f"{v:6.3f}" for v in row))

# r is not renormalised on [0, 1]: a little mass sits outside the unit interval
wide = GmmCalibrator(levels, 0.1)
print("r(0) =", round(apply_r(wide, 0.0), 4), " r(1) =", round(apply_r(wide, 1.0), 4))
