"""Classical operator inference: regress quadratic-model operators onto
finite-difference estimates of reduced time derivatives.

The regression min_O || D O^T - Qdot^T ||_F^2 + ridge * ||O||_F^2 is solved
through the SVD of the data matrix D, optionally discarding the smallest
singular directions (TSVD) before applying the ridge-filtered pseudoinverse.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from adjrom.fom import SnapshotMatrix
from adjrom.rom import (IntegrationDiverged, RomParams, integrate_forward,
                        symmetrize_quadratic)

__all__ = [
    "DerivativeEstimate",
    "OpinfHyperparams",
    "OpinfGrids",
    "fd_weights",
    "estimate_derivatives",
    "assemble_data_matrix",
    "solve_opinf",
    "grid_search",
]

#: Relative spacing deviation below which a time grid counts as uniform.
#: Index-rounded subsampled grids are uniform only to +-1 source index.
UNIFORM_GRID_TOL = 0.01


@dataclass(frozen=True)
class DerivativeEstimate:
    """Estimated reduced time derivatives, same shape as the data matrix."""

    derivatives: np.ndarray
    stencil_order: int


@dataclass(frozen=True)
class OpinfHyperparams:
    ridge_weight: float = 0.0
    tsvd_discard: int = 0
    stencil_order: int = 2

    def __post_init__(self):
        if self.ridge_weight < 0:
            raise ValueError("ridge_weight must be >= 0")
        if self.tsvd_discard < 0:
            raise ValueError("tsvd_discard must be >= 0")
        if self.stencil_order not in (2, 6):
            raise ValueError("stencil_order must be 2 or 6")

    def as_dict(self) -> dict:
        return {"ridge_weight": self.ridge_weight,
                "tsvd_discard": self.tsvd_discard,
                "stencil_order": self.stencil_order}


@dataclass(frozen=True)
class OpinfGrids:
    """Hyperparameter grid for validation-driven selection.

    Ridge weights are the study grid {0, 1e-2, 1e-1, 1}; discards cover
    {0, ..., 7} so the unregularized corner needed by clean-data recovery is
    always present.
    """

    ridge_weights: tuple = (0.0, 1e-2, 1e-1, 1.0)
    tsvd_discards: tuple = (0, 1, 2, 3, 4, 5, 6, 7)
    stencil_orders: tuple = (2, 6)


def fd_weights(offsets: np.ndarray, deriv: int = 1) -> np.ndarray:
    """First-derivative (or higher) finite-difference weights at offset 0.

    Classic recursive construction for arbitrarily spaced nodes; exact for
    polynomials up to degree len(offsets) - 1.
    """
    x = np.asarray(offsets, dtype=float)
    n = x.size - 1
    if deriv > n:
        raise ValueError("not enough nodes for the requested derivative")
    z = 0.0
    C = np.zeros((n + 1, deriv + 1))
    C[0, 0] = 1.0
    c1 = 1.0
    c4 = x[0] - z
    for i in range(1, n + 1):
        mn = min(i, deriv)
        c2 = 1.0
        c5 = c4
        c4 = x[i] - z
        for j in range(i):
            c3 = x[i] - x[j]
            c2 *= c3
            if j == i - 1:
                for k in range(mn, 0, -1):
                    C[i, k] = c1 * (k * C[i - 1, k - 1] - c5 * C[i - 1, k]) / c2
                C[i, 0] = -c1 * c5 * C[i - 1, 0] / c2
            for k in range(mn, 0, -1):
                C[j, k] = (c4 * C[j, k] - k * C[j, k - 1]) / c3
            C[j, 0] = c4 * C[j, 0] / c3
        c1 = c2
    return C[:, deriv]


def _stencil_operator(k: int, dt: float, order: int) -> sp.csr_matrix:
    """Banded differentiation matrix: interior central stencils of the given
    order, one-sided stencils of the same formal order at the ends."""
    width = order + 1
    half = order // 2
    rows, cols, vals = [], [], []
    cache: dict[int, np.ndarray] = {}
    for j in range(k):
        start = min(max(j - half, 0), k - width)
        pos = j - start
        if pos not in cache:
            cache[pos] = fd_weights(np.arange(width) - pos) / dt
        rows.extend([j] * width)
        cols.extend(range(start, start + width))
        vals.extend(cache[pos])
    return sp.csr_matrix((vals, (rows, cols)), shape=(k, k))


def estimate_derivatives(Q, times: np.ndarray | None = None,
                         order: int = 2,
                         uniform_tol: float = UNIFORM_GRID_TOL) -> DerivativeEstimate:
    """Estimate reduced time derivatives on a (near-)uniform grid.

    Q is an (r, k) array or a reduced SnapshotMatrix (whose times are used).
    Interior nodes use the central stencil of the requested order (2 or 6);
    boundary nodes use one-sided stencils of the same formal order. Grids
    whose spacing deviates from the mean by more than `uniform_tol`
    (relative) are rejected.
    """
    if isinstance(Q, SnapshotMatrix):
        times = Q.times
        Q = Q.states
    Q = np.asarray(Q, dtype=float)
    if times is None:
        raise ValueError("times are required when Q is a bare array")
    times = np.asarray(times, dtype=float)
    if order not in (2, 6):
        raise ValueError("stencil order must be 2 or 6")
    k = Q.shape[1]
    if times.shape != (k,):
        raise ValueError("times must match the snapshot columns")
    if k < order + 1:
        raise ValueError(f"need at least {order + 1} samples for order {order}")
    steps = np.diff(times)
    dt = float(np.mean(steps))
    if dt <= 0 or np.max(np.abs(steps - dt)) > uniform_tol * dt:
        raise ValueError("time grid is not uniform")
    S = _stencil_operator(k, dt, order)
    return DerivativeEstimate((S @ Q.T).T, order)


def assemble_data_matrix(Q: np.ndarray, S: np.ndarray | None = None) -> np.ndarray:
    """Stack regression rows [1, q_i^T, (q_i ⊗ q_i)^T, s_i^T] for each sample.

    Column order is fixed: constant, linear, quadratic (Kronecker in
    row-major pair order), input. Returns a k x (1 + r + r^2 + m) matrix.
    """
    Q = np.asarray(Q, dtype=float)
    r, k = Q.shape
    blocks = [np.ones((k, 1)), Q.T]
    QT = Q.T
    blocks.append((QT[:, :, None] * QT[:, None, :]).reshape(k, r * r))
    if S is not None:
        S = np.asarray(S, dtype=float)
        if S.shape[1] != k:
            raise ValueError("inputs must share the snapshot columns")
        blocks.append(S.T)
    return np.hstack(blocks)


def solve_opinf(D: np.ndarray, Qdot: np.ndarray,
                hp: OpinfHyperparams) -> RomParams:
    """Solve the operator regression with TSVD truncation and ridge filtering.

    The smallest `tsvd_discard` singular directions of D are removed, then
    the retained spectrum is filtered by sigma / (sigma^2 + ridge_weight).
    With ridge_weight = 0, directions below machine rank are dropped, which
    yields the minimum-norm solution on rank-deficient data. The returned
    quadratic block is symmetrized.
    """
    D = np.asarray(D, dtype=float)
    Qdot = np.asarray(Qdot, dtype=float)
    k, p = D.shape
    r = Qdot.shape[0]
    if Qdot.shape[1] != k:
        raise ValueError("derivative columns must match data-matrix rows")
    m = p - 1 - r - r * r
    if m < 0:
        raise ValueError("data matrix has too few columns for the state dimension")
    if hp.tsvd_discard >= p:
        raise ValueError("tsvd_discard must be smaller than the column count")

    U, s, Vt = np.linalg.svd(D, full_matrices=False)
    keep = len(s) - hp.tsvd_discard
    if keep <= 0:
        raise ValueError("tsvd_discard leaves no singular directions")
    s = s[:keep]
    if hp.ridge_weight == 0.0:
        filt = np.where(s > 1e-13 * s[0], 1.0, 0.0)
        filt = np.divide(filt, s, out=np.zeros_like(s), where=s > 0)
    else:
        filt = s / (s * s + hp.ridge_weight)
    coeffs = Vt[:keep].T @ (filt[:, None] * (U[:, :keep].T @ Qdot.T))
    O = coeffs.T  # (r, p)
    c = O[:, 0]
    A = O[:, 1:1 + r]
    H = symmetrize_quadratic(O[:, 1 + r:1 + r + r * r])
    B = O[:, 1 + r + r * r:]
    return RomParams(c, A, H, B)


def grid_search(train: SnapshotMatrix, val: SnapshotMatrix,
                grids: OpinfGrids = OpinfGrids(),
                train_inputs: np.ndarray | None = None,
                input_signal=None,
                rtol: float = 1e-6, atol: float = 1e-9,
                max_steps: int = 20_000):
    """Validation-driven hyperparameter selection.

    Fits every (stencil order, ridge, discard) grid point on the training
    data, rolls the fitted model out from the validation initial state over
    the validation window, and returns the argmin of the validation relative
    state error: (params, hyperparams, val_rse). Divergent roll-outs score
    +inf; if every grid point diverges, raises with a pointer toward
    stronger regularization.
    """
    from adjrom.harness import rse  # local import to avoid a module cycle

    if train.k < 2 or val.k < 2:
        raise ValueError("train and validation windows must hold >= 2 snapshots")
    q0_val = val.states[:, 0]
    t_span = (float(val.times[0]), float(val.times[-1]))

    best = None
    for order in grids.stencil_orders:
        est = estimate_derivatives(train, order=order)
        D = assemble_data_matrix(train.states, train_inputs)
        for ridge, discard in itertools.product(grids.ridge_weights,
                                                grids.tsvd_discards):
            hp = OpinfHyperparams(ridge, discard, order)
            try:
                params = solve_opinf(D, est.derivatives, hp)
            except ValueError:
                continue  # discard too large for this data matrix
            try:
                traj = integrate_forward(params, q0_val, input_signal, t_span,
                                         rtol=rtol, atol=atol,
                                         max_steps=max_steps)
                score = rse(traj.evaluate(val.times), val.states)
            except IntegrationDiverged:
                score = np.inf
            if best is None or score < best[2]:
                best = (params, hp, score)
    if best is None or not np.isfinite(best[2]):
        raise RuntimeError(
            "every grid point diverged on the validation window; "
            "widen the ridge/TSVD grids toward stronger regularization")
    return best
