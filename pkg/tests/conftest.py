import numpy as np
import pytest

from adjrom import fom


@pytest.fixture(scope="session")
def burgers_default_snapshots():
    """Full-resolution Burgers run (1000 x 10000); shared across tests."""
    return fom.solve_burgers(fom.BurgersConfig())


def random_rom(rng, r, m=0, linear_scale=0.5, quad_scale=0.3):
    """Random stable-ish quadratic model for property tests."""
    from adjrom.rom import RomParams
    A = -np.eye(r) + linear_scale * rng.standard_normal((r, r))
    H = quad_scale * rng.standard_normal((r, r * r))
    c = 0.3 * rng.standard_normal(r)
    B = rng.standard_normal((r, m)) if m else np.zeros((r, 0))
    return RomParams(c, A, H, B)


def exact_latent_fom(n=20, r=4, seed=0):
    """Full-order quadratic system whose dynamics live exactly in an
    r-dimensional subspace, with the latent model and basis returned.

    The full operators are lifted from a latent quadratic model through an
    orthonormal basis V, so trajectories started inside the subspace stay
    there and Galerkin projection is exact. The latent linear part is a
    lightly damped rotation, which keeps the trajectory oscillatory and the
    regression features well conditioned.
    """
    from adjrom.rom import RomParams
    rng = np.random.default_rng(seed)
    skew = rng.standard_normal((r, r))
    A = 1.5 * (skew - skew.T) - 0.15 * np.eye(r)
    H = 0.2 * rng.standard_normal((r, r * r))
    c = 0.4 * rng.standard_normal(r)
    latent = RomParams(c, A, H, np.zeros((r, 0)))
    V, _ = np.linalg.qr(rng.standard_normal((n, r)))
    VV = np.kron(V, V)
    ops = fom.QuadraticFomOperators(V @ latent.c, V @ latent.A @ V.T,
                                    V @ latent.H @ VV.T, np.zeros((n, 0)))
    q0 = 0.8 * rng.standard_normal(r)
    return ops, latent, V, V @ q0


def galerkin_projection(ops, basis_matrix):
    """Intrusively projected reduced operators (the recovery oracle)."""
    from adjrom.rom import RomParams
    W = basis_matrix
    r = W.shape[1]
    return RomParams(W.T @ ops.C, W.T @ ops.A @ W,
                     W.T @ ops.H @ np.kron(W, W), np.zeros((r, 0)))
