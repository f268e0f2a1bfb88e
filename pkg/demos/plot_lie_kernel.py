"""
Exponential coordinates on the rotation group
=============================================

The closed forms behind every attitude step: Rodrigues' formula for the
exponential, its local inverse, and the trivialized differential ``dexp``
that carries perturbations of the exponent to the group. Each is checked
here against a brute-force computation.
"""

import numpy as np
from scipy.linalg import expm

from lieocp import lie

rng = np.random.default_rng(0)

###############################################################################
# Rodrigues' formula against the matrix exponential
# -------------------------------------------------
# ``scipy.linalg.expm`` evaluates the same exponential by scaling and
# squaring. The two agree to a few units of round-off.

v = np.array([0.4, -1.3, 0.9])
print("exp_so3 vs expm:", np.max(np.abs(lie.exp_so3(v) - expm(lie.hat(v)))))

###############################################################################
# The logarithm undoes the exponential inside the chart ``|v| < pi``.
# Close to ``pi`` the rotation axis is still recovered from the symmetric
# part of the matrix.

for angle in (1e-9, 0.5, 2.0, 3.14):
    axis = rng.normal(size=3)
    w = angle * axis / np.linalg.norm(axis)
    err = np.linalg.norm(lie.log_so3(lie.exp_so3(w)) - w)
    print(f"|v| = {angle:<6g} round-trip error {err:.1e}")

###############################################################################
# dexp by central differences
# ---------------------------
# With the left trivialization, ``exp(v)^T d/ds exp(v + s w)`` at ``s = 0``
# is the skew matrix of ``dexp(v) w``.

w = rng.normal(size=3)
step = 1e-6
dR = (lie.exp_so3(v + step * w) - lie.exp_so3(v - step * w)) / (2 * step)
X = lie.exp_so3(v).T @ dR
print("dexp vs finite differences:", np.max(np.abs(lie.vee(X) - lie.dexp(v, w))))

###############################################################################
# Covectors travel with the dual map. The pairing identity
# ``<dexp_dual(v, a), w> = <a, dexp(v, w)>`` holds to machine precision,
# and ``dexp_inv_dual`` inverts ``dexp_dual``.

a = rng.normal(size=3)
print("pairing defect:", abs(lie.dexp_dual(v, a) @ w - a @ lie.dexp(v, w)))
print("dual inverse defect:", np.max(np.abs(lie.dexp_dual(v, lie.dexp_inv_dual(v, a)) - a)))
