"""DFT spectra of control trajectories and linear frequency constraints.

A control trajectory is an ``(N, m)`` array: row ``t`` is the control at
stage ``t``. Bins are numbered ``1..N`` and bin ``j`` carries the frequency
``2*pi*(j-1)/N`` rad/sample. The DFT is the unitary one,
``D[r, c] = exp(-2j*pi*r*c/N) / sqrt(N)`` with zero-based ``r, c``.

Forbidding bin ``j`` of channel ``k`` yields the real equality constraints
``Re(D_j) u^(k) = 0`` and ``Im(D_j) u^(k) = 0``. Collected over all
forbidden bins they read ``sum_t F_t u_t = 0`` with ``F_t`` of shape
``(ell, m)``.
"""

import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .errors import RankDeficientF

__all__ = [
    "ForbiddenBinSpec",
    "FrequencyConstraintSet",
    "dft_matrix",
    "spectrum",
    "bin_frequencies",
    "band_bins",
    "build_constraints",
    "project_onto_nullspace",
    "auxiliary_trajectory",
]

RANK_TOL = 1e-10


@dataclass(frozen=True)
class ForbiddenBinSpec:
    """Bins (1-based) whose content must vanish on one channel (1-based)."""

    channel: int
    bins: tuple

    def __post_init__(self):
        object.__setattr__(self, "bins", tuple(sorted({int(b) for b in self.bins})))


def dft_matrix(N):
    """Unitary ``N x N`` DFT matrix."""
    if N < 1:
        raise ValueError("N must be positive")
    k = np.arange(N)
    return np.exp(-2j * np.pi * np.outer(k, k) / N) / np.sqrt(N)


def bin_frequencies(N):
    """Frequency in rad/sample of bins ``1..N``."""
    return 2.0 * np.pi * np.arange(N) / N


def spectrum(u):
    """Per-channel unitary DFT of ``u``; returns an ``(N, m)`` complex array.

    Column ``k`` is ``dft_matrix(N) @ u[:, k]``.
    """
    u = np.asarray(u, dtype=float)
    if u.ndim == 1:
        u = u[:, None]
    N = u.shape[0]
    return np.fft.fft(u, axis=0) / np.sqrt(N)


def band_bins(N, low, high):
    """Bins whose frequency lies strictly inside ``(low, high)`` rad/sample."""
    freqs = bin_frequencies(N)
    return tuple(int(j) + 1 for j in np.flatnonzero((freqs > low) & (freqs < high)))


@dataclass(frozen=True, eq=False)
class FrequencyConstraintSet:
    """Full-row-rank frequency equality ``sum_t F[t] @ u[t] = 0``.

    ``F`` has shape ``(N, ell, m)``. ``rows`` records, for every row, the
    ``(channel, bin, part)`` it came from with ``part`` in ``{"re", "im"}``.
    ``basis`` is an orthonormal basis (``(N*m, ell)``) of the row space of the
    stacked map, used for projections.
    """

    N: int
    m: int
    F: np.ndarray
    rows: tuple
    specs: tuple = ()
    basis: np.ndarray = field(default=None, repr=False)

    @property
    def ell(self):
        return self.F.shape[1]

    @property
    def is_empty(self):
        return self.ell == 0

    @property
    def matrix(self):
        """Stacked ``(ell, N*m)`` matrix acting on ``u.reshape(-1)``."""
        return self.F.transpose(1, 0, 2).reshape(self.ell, self.N * self.m)

    def apply(self, u):
        """``sum_t F[t] @ u[t]`` summed in stage order ``t = 0, 1, ...``.

        The order matches :func:`auxiliary_trajectory`, so its last state is
        bitwise equal to this value.
        """
        u = np.asarray(u, dtype=float)
        w = np.zeros(self.ell)
        for t in range(self.N):
            w = w + self.F[t] @ u[t]
        return w

    def adjoint_apply(self, eta):
        """``F[t].T @ eta`` for every stage, as an ``(N, m)`` array."""
        return np.einsum("tlm,l->tm", self.F, np.asarray(eta, dtype=float))

    def forbidden(self):
        """Mapping ``channel (1-based) -> sorted forbidden bins``."""
        out = {}
        for spec in self.specs:
            out.setdefault(spec.channel, set()).update(spec.bins)
        return {k: sorted(v) for k, v in sorted(out.items())}


def _independent_rows(A, tol=RANK_TOL):
    """Indices of a maximal independent subset of rows of ``A`` (pivoted QR)."""
    if A.shape[0] == 0:
        return np.zeros(0, dtype=int)
    _, R, piv = scipy.linalg.qr(A.T, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    if diag.size == 0 or diag[0] == 0.0:
        return np.zeros(0, dtype=int)
    rank = int(np.sum(diag > tol * max(1.0, diag[0])))
    return np.sort(piv[:rank])


def build_constraints(N, m, specs):
    """Assemble the frequency constraint set for ``specs``.

    Each forbidden bin contributes a real-part row and, unless the DFT row
    is real (bin 1, and bin ``N/2 + 1`` for even ``N``), an imaginary-part
    row. Rows made redundant by listing both members of a conjugate pair
    are dropped so the result has full row rank.
    """
    specs = tuple(specs)
    D = dft_matrix(N)
    candidates = []
    for spec in specs:
        if not 1 <= spec.channel <= m:
            raise ValueError(f"channel {spec.channel} outside 1..{m}")
        for j in spec.bins:
            if not 1 <= j <= N:
                raise ValueError(f"bin {j} outside 1..{N}")
            if j == 1:
                warnings.warn(
                    f"forbidding bin 1 (DC) on channel {spec.channel} forces a zero-mean control",
                    stacklevel=2,
                )
            candidates.append((spec.channel, j, "re", D[j - 1].real))
            real_row = j == 1 or (N % 2 == 0 and j == N // 2 + 1)
            if not real_row:
                candidates.append((spec.channel, j, "im", D[j - 1].imag))

    if not candidates:
        warnings.warn("no forbidden bins: the frequency constraint set is empty", stacklevel=2)
        return FrequencyConstraintSet(
            N=N, m=m, F=np.zeros((N, 0, m)), rows=(), specs=specs, basis=np.zeros((N * m, 0))
        )

    # deduplicate identical (channel, bin, part) before the rank test
    seen = {}
    for ch, j, part, row in candidates:
        seen.setdefault((ch, j, part), row)
    keys = list(seen)
    A = np.zeros((len(keys), N * m))
    for r, (ch, j, part) in enumerate(keys):
        A[r, ch - 1 :: m] = seen[(ch, j, part)]
    keep = _independent_rows(A)
    A = A[keep]
    rows = tuple(keys[i] for i in keep)
    F = A.reshape(len(rows), N, m).transpose(1, 0, 2).copy()
    basis, R = np.linalg.qr(A.T)
    if np.min(np.abs(np.diag(R))) <= RANK_TOL * np.max(np.abs(np.diag(R))):
        raise RankDeficientF("frequency constraint rows are not independent")
    return FrequencyConstraintSet(N=N, m=m, F=F, rows=rows, specs=specs, basis=basis)


def project_onto_nullspace(u, C):
    """Euclidean projection of ``u`` onto ``{u : sum_t F_t u_t = 0}``."""
    u = np.asarray(u, dtype=float)
    if C is None or C.is_empty:
        return u.copy()
    flat = u.reshape(-1)
    Q = C.basis
    return (flat - Q @ (Q.T @ flat)).reshape(u.shape)


def auxiliary_trajectory(u, C):
    """States ``w_0..w_N`` of ``w_{t+1} = w_t + F_t u_t`` with ``w_0 = 0``."""
    u = np.asarray(u, dtype=float)
    W = np.zeros((C.N + 1, C.ell))
    for t in range(C.N):
        W[t + 1] = W[t] + C.F[t] @ u[t]
    return W
