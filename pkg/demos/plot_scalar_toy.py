"""
A problem small enough to check by hand
=======================================

Three steps of ``x+ = x + u`` from ``x = 0`` to ``x = 1`` with cost
``sum u^2 / 2`` and ``|u| <= 1``. The least-norm answer is ``u = 1/3`` on
every step. The solver should find it, a brute-force grid should not beat
it, and the certificate should recover the multiplier of the terminal
condition.
"""

import itertools
import warnings

import numpy as np

from lieocp import LinearPlant, ProblemSpec, solve
from lieocp.errors import Infeasible
from lieocp.spectrum import ForbiddenBinSpec, build_constraints

plant = LinearPlant([[1.0]], [[1.0]])
problem = ProblemSpec(plant=plant, N=3, q0=np.eye(3), x0=[0.0], u_lower=-1.0, u_upper=1.0,
                      target=(np.eye(3), [1.0]))
result = solve(problem)
print("u* =", result.u.ravel(), " cost =", result.cost)
print("certificate passes:", result.report.ok)

###############################################################################
# The costate is constant along ``x+ = x + u`` and equals the terminal
# multiplier; the gradient condition then reads ``u_t = lam``.

print("lambda =", result.bundle.lam.ravel())

###############################################################################
# Brute force on 41 points per stage
# ----------------------------------

grid = np.linspace(-1, 1, 41)
best = min(0.5 * sum(v * v for v in u) for u in itertools.product(grid, repeat=3) if abs(sum(u) - 1) < 1e-9)
print("grid minimum", best, ">= solver cost", result.cost)

###############################################################################
# Contradictory data
# ------------------
# Forbidding the DC bin forces ``sum u = 0``, so ``x_3 = 1`` is out of reach
# and the solver says so.

with warnings.catch_warnings():
    warnings.simplefilter("ignore")
    dc = build_constraints(3, 1, [ForbiddenBinSpec(1, (1,))])
try:
    solve(ProblemSpec(plant=plant, N=3, q0=np.eye(3), x0=[0.0], u_lower=-1.0, u_upper=1.0,
                      target=(np.eye(3), [1.0]), freq=dc))
except Infeasible as exc:
    print("infeasible:", exc)
