"""POD basis construction, projection to and lifting from reduced coordinates.

The basis is the set of leading left singular vectors of the raw snapshot
matrix (no mean-centering). The retained rank comes either from a fixed r or
from the cumulative-energy rule: the smallest r with
sum_{i<=r} sigma_i^2 / sum_i sigma_i^2 >= 1 - energy_tol.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from adjrom.fom import SnapshotMatrix

__all__ = ["PodBasis", "compute_pod", "project", "lift"]

# Singular values below this fraction of sigma_1 count as numerically zero.
RANK_CUTOFF = 1e-12


@dataclass(frozen=True)
class PodBasis:
    """Orthonormal reduced basis with the full singular-value spectrum.

    basis is n x r with orthonormal columns; singular_values holds all
    min(n, k) values of the source matrix in non-increasing order.
    energy_captured is the retained fraction of squared singular values.
    """

    basis: np.ndarray
    singular_values: np.ndarray
    r: int
    energy_captured: float

    def __post_init__(self):
        basis = np.asarray(self.basis, dtype=float)
        sv = np.asarray(self.singular_values, dtype=float)
        if basis.ndim != 2 or basis.shape[1] != self.r:
            raise ValueError("basis must be n x r")
        if np.any(np.diff(sv) > 0) or np.any(sv < 0):
            raise ValueError("singular values must be non-increasing and >= 0")
        gram = basis.T @ basis
        if np.abs(gram - np.eye(self.r)).max() > 1e-10:
            raise ValueError("basis columns are not orthonormal")
        basis.flags.writeable = False
        sv.flags.writeable = False
        object.__setattr__(self, "basis", basis)
        object.__setattr__(self, "singular_values", sv)

    @property
    def n(self) -> int:
        return self.basis.shape[0]

    def truncate(self, r: int) -> "PodBasis":
        """Drop trailing columns; valid because SVD bases are nested."""
        if not 1 <= r <= self.r:
            raise ValueError(f"cannot truncate rank-{self.r} basis to r={r}")
        energy = float(np.sum(self.singular_values[:r] ** 2)
                       / np.sum(self.singular_values**2))
        return PodBasis(self.basis[:, :r], self.singular_values, r, energy)


def compute_pod(snapshots: SnapshotMatrix | np.ndarray,
                r: int | None = None,
                energy_tol: float | None = None) -> PodBasis:
    """Build a POD basis by thin SVD of the snapshot matrix.

    Exactly one of `r` (fixed rank) and `energy_tol` (cumulative-energy
    tolerance) must be given. Each retained singular vector is sign-fixed so
    its largest-magnitude entry is positive, making bases reproducible.
    """
    if (r is None) == (energy_tol is None):
        raise ValueError("give exactly one of r= and energy_tol=")
    U = snapshots.states if isinstance(snapshots, SnapshotMatrix) else np.asarray(snapshots, dtype=float)
    if U.ndim != 2 or U.size == 0:
        raise ValueError("snapshot matrix must be a non-empty 2-D array")

    Phi, sv, _ = np.linalg.svd(U, full_matrices=False)
    if sv[0] == 0.0:
        raise ValueError("all-zero snapshot matrix has no basis")
    numerical_rank = int(np.count_nonzero(sv > RANK_CUTOFF * sv[0]))
    total_energy = float(np.sum(sv**2))

    if r is not None:
        if not 1 <= r <= numerical_rank:
            raise ValueError(
                f"requested rank {r} exceeds the numerical rank {numerical_rank}")
        rank = r
    else:
        cum = np.cumsum(sv**2) / total_energy
        rank = int(np.searchsorted(cum, 1.0 - energy_tol) + 1)
        rank = min(rank, numerical_rank)

    V = Phi[:, :rank].copy()
    for j in range(rank):
        lead = np.argmax(np.abs(V[:, j]))
        if V[lead, j] < 0:
            V[:, j] = -V[:, j]
    energy = float(np.sum(sv[:rank] ** 2) / total_energy)
    return PodBasis(V, sv, rank, energy)


def project(basis: PodBasis, snapshots: SnapshotMatrix) -> SnapshotMatrix:
    """Form reduced snapshots V_r^T U, keeping the time stamps."""
    if snapshots.n != basis.n:
        raise ValueError(
            f"snapshot rows ({snapshots.n}) do not match basis rows ({basis.n})")
    return SnapshotMatrix(basis.basis.T @ snapshots.states, snapshots.times)


def lift(basis: PodBasis, reduced: SnapshotMatrix) -> SnapshotMatrix:
    """Map reduced snapshots back to full coordinates: V_r Q."""
    if reduced.n != basis.r:
        raise ValueError(
            f"reduced rows ({reduced.n}) do not match basis rank ({basis.r})")
    return SnapshotMatrix(basis.basis @ reduced.states, reduced.times)
