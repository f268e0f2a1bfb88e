"""
Forbidding a frequency band
===========================

A forbidden DFT bin is two real linear equalities on a control channel:
the real and imaginary parts of its Fourier coefficient. Here the band
``(2 pi / 3, 4 pi / 3)`` rad/sample is removed from channels 1 and 3 of a
130-sample torque signal while channel 2 keeps its full spectrum.
"""

import numpy as np

from lieocp.spectrum import (
    ForbiddenBinSpec,
    band_bins,
    bin_frequencies,
    build_constraints,
    project_onto_nullspace,
    spectrum,
)
from lieocp.solver import project_feasible

N = 130
bins = band_bins(N, 2 * np.pi / 3, 4 * np.pi / 3)
C = build_constraints(N, 3, [ForbiddenBinSpec(1, bins), ForbiddenBinSpec(3, bins)])

###############################################################################
# The band holds 43 bins. Apart from the self-conjugate bin at ``pi`` they
# come in conjugate pairs, which the rank test collapses, leaving 43
# independent real rows per channel.

print("bins per channel:", len(bins), " independent rows:", C.ell)
print("band edges (rad/sample):", bin_frequencies(N)[bins[0] - 1], bin_frequencies(N)[bins[-1] - 1])

###############################################################################
# Null-space projection
# ---------------------
# The orthogonal projection onto ``sum_t F_t u_t = 0`` zeroes the band and
# leaves everything orthogonal to it alone.

rng = np.random.default_rng(1)
u = rng.normal(scale=8.0, size=(N, 3))
p = project_onto_nullspace(u, C)
idx = np.asarray(bins) - 1
for ch in range(3):
    before = np.max(np.abs(spectrum(u)[idx, ch]))
    after = np.max(np.abs(spectrum(p)[idx, ch]))
    print(f"channel {ch + 1}: band peak {before:8.3f} -> {after:.1e}")

###############################################################################
# Adding the torque box
# ---------------------
# Clipping to ``|u| <= 20`` brings the band back. The exact projection onto
# the intersection of box and null space keeps both.

u_big = rng.normal(scale=25.0, size=(N, 3))
clipped = np.clip(project_onto_nullspace(u_big, C), -20, 20)
print("clip after projection, band peak:", np.max(np.abs(spectrum(clipped)[idx][:, [0, 2]])))
both = project_feasible(u_big, -20.0, 20.0, C, tol=1e-13, max_sweeps=2000, method="newton")
print("joint projection: band peak", np.max(np.abs(spectrum(both)[idx][:, [0, 2]])),
      " max |u|", np.max(np.abs(both)))
