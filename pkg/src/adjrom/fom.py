"""Full-order snapshot generation for the benchmark PDEs.

Three finite-difference solvers (1D viscous Burgers, 2D Fisher-KPP, 2D
advection-diffusion) plus a synthetic quadratic full-order model used to
manufacture ground truth for operator-recovery tests. All solvers are
deterministic: identical configs produce bit-identical snapshot matrices.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.sparse as sp
from scipy.linalg import solve_banded
from scipy.sparse.linalg import splu

from adjrom import rom

__all__ = [
    "SnapshotMatrix",
    "BurgersConfig",
    "FkppConfig",
    "AdeConfig",
    "QuadraticFomOperators",
    "FomDivergence",
    "FomSolverError",
    "CflViolation",
    "solve_burgers",
    "solve_fisher_kpp",
    "solve_ade",
    "simulate_synthetic_fom",
]


class FomDivergence(RuntimeError):
    """Non-finite state detected mid-integration; names the failing step."""

    def __init__(self, message: str, step: int):
        super().__init__(message)
        self.step = int(step)


class FomSolverError(RuntimeError):
    """Linear-solve failure inside a time stepper."""


class CflViolation(ValueError):
    """Explicit scheme refused: a stability bound is not satisfied."""


@dataclass(frozen=True)
class SnapshotMatrix:
    """States stacked over a time grid: column i is the state at times[i]."""

    states: np.ndarray
    times: np.ndarray

    def __post_init__(self):
        states = np.asarray(self.states, dtype=float)
        times = np.asarray(self.times, dtype=float)
        if states.ndim != 2:
            raise ValueError("states must be a 2-D (n, k) array")
        if times.ndim != 1 or times.size != states.shape[1]:
            raise ValueError("column count must equal the number of time stamps")
        if times.size > 1 and np.any(np.diff(times) <= 0):
            raise ValueError("times must be strictly increasing")
        if not np.all(np.isfinite(states)) or not np.all(np.isfinite(times)):
            raise ValueError("snapshot entries must be finite")
        states.flags.writeable = False
        times.flags.writeable = False
        object.__setattr__(self, "states", states)
        object.__setattr__(self, "times", times)

    @property
    def n(self) -> int:
        return self.states.shape[0]

    @property
    def k(self) -> int:
        return self.states.shape[1]


def _default_burgers_ic(x: np.ndarray) -> np.ndarray:
    return np.sin(2.0 * np.pi * x)


@dataclass(frozen=True)
class BurgersConfig:
    """1D viscous Burgers on [0, 1] with homogeneous Dirichlet data."""

    n_interior: int = 998
    viscosity: float = 0.01
    horizon_T: float = 1.0
    n_steps: int = 9999
    initial_profile: Callable[[np.ndarray], np.ndarray] = _default_burgers_ic

    def __post_init__(self):
        if self.n_interior < 2:
            raise ValueError("n_interior must be >= 2")
        if self.n_steps < 1:
            raise ValueError("n_steps must be >= 1")
        if self.viscosity <= 0:
            raise ValueError("viscosity must be positive")

    @property
    def dx(self) -> float:
        return 1.0 / (self.n_interior + 1)

    @property
    def dt(self) -> float:
        return self.horizon_T / self.n_steps


def solve_burgers(cfg: BurgersConfig) -> SnapshotMatrix:
    """Second-order semi-implicit Burgers solve.

    Each step applies an explicit Lax-Wendroff update for convection to get
    an intermediate field w, then solves the Crank-Nicolson tridiagonal
    system (I - nu*dt/2 * T) u_next = w + nu*dt/2 * T u on interior nodes.
    Boundary rows are stored and fixed at zero. Returns an
    (n_interior + 2) x (n_steps + 1) snapshot matrix.
    """
    N, M = cfg.n_interior, cfg.n_steps
    dx, dt, nu = cfg.dx, cfg.dt, cfg.viscosity
    x = np.linspace(0.0, 1.0, N + 2)
    u = np.asarray(cfg.initial_profile(x), dtype=float).copy()
    if u.shape != x.shape:
        raise ValueError("initial_profile must return one value per node")
    u[0] = u[-1] = 0.0

    # Crank-Nicolson system in banded form; the tridiagonal {1,-2,1}/dx^2
    # Laplacian on interior nodes encodes the Dirichlet boundary.
    a = nu * dt / (2.0 * dx * dx)
    ab = np.zeros((3, N))
    ab[0, 1:] = -a
    ab[1, :] = 1.0 + 2.0 * a
    ab[2, :-1] = -a

    snaps = np.empty((N + 2, M + 1))
    snaps[:, 0] = u
    c1 = dt / (2.0 * dx)
    c2 = dt * dt / (2.0 * dx * dx)
    for m in range(M):
        um, up = u[:-2], u[2:]
        ui = u[1:-1]
        du = up - um
        d2u = up - 2.0 * ui + um
        w = ui - c1 * ui * du + c2 * ui * (0.5 * du * du + ui * d2u)
        rhs_vec = w + a * d2u
        if not np.all(np.isfinite(rhs_vec)):
            raise FomDivergence(
                f"non-finite state at time step {m + 1}", step=m + 1)
        ui_new = solve_banded((1, 1), ab, rhs_vec)
        if not np.all(np.isfinite(ui_new)):
            raise FomDivergence(
                f"non-finite state at time step {m + 1}", step=m + 1)
        u = np.zeros(N + 2)
        u[1:-1] = ui_new
        snaps[:, m + 1] = u
    times = np.arange(M + 1) * dt
    return SnapshotMatrix(snaps, times)


@dataclass(frozen=True)
class FkppConfig:
    """2D Fisher-KPP reaction-diffusion on [0,Lx]x[0,Ly], zero-flux walls.

    The default initial profile is the Gaussian bump
    exp(-10 [(x - Lx/2)^2 + (y - Ly/2)^2]) centered in the domain.
    """

    nx: int = 125
    ny: int = 125
    Lx: float = 10.0
    Ly: float = 10.0
    diffusivity: float = 0.1
    growth: float = 1.0
    horizon_T: float = 5.0
    dt: float = 0.0025
    initial_profile: Callable[[np.ndarray, np.ndarray], np.ndarray] | None = None

    def __post_init__(self):
        if self.nx < 3 or self.ny < 3:
            raise ValueError("nx and ny must be >= 3")
        if self.dt <= 0:
            raise ValueError("dt must be positive")

    @property
    def n_steps(self) -> int:
        return int(round(self.horizon_T / self.dt))


def neumann_laplacian_1d(n: int, dx: float) -> sp.csr_matrix:
    """Second-difference matrix with mirrored-point zero-flux boundary rows.

    Interior stencil {1,-2,1}/dx^2; first/last rows use -2/dx^2 on the
    diagonal and +2/dx^2 off-diagonal, so constants are in the null space.
    """
    main = -2.0 * np.ones(n)
    off = np.ones(n - 1)
    L = sp.diags([off, main, off], [-1, 0, 1], format="lil")
    L[0, 1] = 2.0
    L[n - 1, n - 2] = 2.0
    return (L / (dx * dx)).tocsr()


def fkpp_laplacian(cfg: FkppConfig) -> sp.csr_matrix:
    """Kronecker-sum 2D Neumann Laplacian on the lexicographic grid."""
    dx = cfg.Lx / (cfg.nx - 1)
    dy = cfg.Ly / (cfg.ny - 1)
    Lx1 = neumann_laplacian_1d(cfg.nx, dx)
    Ly1 = neumann_laplacian_1d(cfg.ny, dy)
    return (sp.kron(sp.identity(cfg.ny), Lx1)
            + sp.kron(Ly1, sp.identity(cfg.nx))).tocsr()


def solve_fisher_kpp(cfg: FkppConfig) -> SnapshotMatrix:
    """IMEX Crank-Nicolson / explicit-Euler Fisher-KPP solve.

    Each step solves (I - a L) u_next = (I + a L) u + dt * rho * u * (1 - u)
    with a = diffusivity * dt / 2 and L the Kronecker-sum Neumann Laplacian.
    The (I - a L) factorization is computed once and reused (the system is
    time-invariant). Returns an (nx*ny) x (n_steps + 1) snapshot matrix.
    """
    x = np.linspace(0.0, cfg.Lx, cfg.nx)
    y = np.linspace(0.0, cfg.Ly, cfg.ny)
    X, Y = np.meshgrid(x, y, indexing="xy")
    if cfg.initial_profile is not None:
        u0_field = np.asarray(cfg.initial_profile(X, Y), dtype=float)
    else:
        u0_field = np.exp(-10.0 * ((X - cfg.Lx / 2) ** 2 + (Y - cfg.Ly / 2) ** 2))
    if u0_field.shape != (cfg.ny, cfg.nx):
        raise ValueError("initial_profile must return a (ny, nx) field")
    u = u0_field.reshape(-1).copy()

    L = fkpp_laplacian(cfg)
    alpha = cfg.diffusivity * cfg.dt / 2.0
    n = cfg.nx * cfg.ny
    M_impl = (sp.identity(n) - alpha * L).tocsc()
    M_expl = (sp.identity(n) + alpha * L).tocsr()
    try:
        lu = splu(M_impl)
    except RuntimeError as exc:
        raise FomSolverError(f"implicit diffusion system factorization failed: {exc}")

    n_steps = cfg.n_steps
    snaps = np.empty((n, n_steps + 1))
    snaps[:, 0] = u
    rho_dt = cfg.growth * cfg.dt
    for m in range(n_steps):
        rhs_vec = M_expl @ u + rho_dt * u * (1.0 - u)
        u = lu.solve(rhs_vec)
        if not np.all(np.isfinite(u)):
            raise FomDivergence(
                f"non-finite state at time step {m + 1}", step=m + 1)
        snaps[:, m + 1] = u
    times = np.arange(n_steps + 1) * cfg.dt
    return SnapshotMatrix(snaps, times)


def _default_ade_ic(X: np.ndarray, Y: np.ndarray) -> np.ndarray:
    sigma = 0.1
    return np.exp(-(((X + 0.5) ** 2 + (Y + 0.5) ** 2) / (2.0 * sigma * sigma)))


@dataclass(frozen=True)
class AdeConfig:
    """2D advection-diffusion on [-1,1]^2 with periodic boundaries.

    The default time step 2.5e-4 (2000 steps over T=0.5) is finer than the
    stability limit requires; it makes snapshot grids with up to 2001 samples
    available to the subsampling protocol.
    """

    nx: int = 201
    ny: int = 201
    cx: float = 1.0
    cy: float = 1.5
    viscosity: float = 0.005
    horizon_T: float = 0.5
    dt: float = 2.5e-4
    center: tuple[float, float] = (-0.5, -0.5)
    width: float = 0.1
    initial_profile: Callable[[np.ndarray, np.ndarray], np.ndarray] | None = None

    def __post_init__(self):
        if self.nx < 3 or self.ny < 3:
            raise ValueError("nx and ny must be >= 3")
        if self.dt <= 0:
            raise ValueError("dt must be positive")

    @property
    def dx(self) -> float:
        return 2.0 / (self.nx - 1)

    @property
    def dy(self) -> float:
        return 2.0 / (self.ny - 1)

    @property
    def n_steps(self) -> int:
        return int(round(self.horizon_T / self.dt))


def check_ade_cfl(cfg: AdeConfig) -> None:
    """Raise CflViolation unless both explicit stability bounds hold."""
    adv = abs(cfg.cx) * cfg.dt / cfg.dx + abs(cfg.cy) * cfg.dt / cfg.dy
    diff = cfg.dt * cfg.viscosity * (1.0 / cfg.dx**2 + 1.0 / cfg.dy**2)
    if adv > 1.0 or diff > 0.5:
        raise CflViolation(
            "explicit advection-diffusion step is unstable: "
            f"|cx|*dt/dx + |cy|*dt/dy = {adv:.6g} (must be <= 1) and "
            f"dt*nu*(1/dx^2 + 1/dy^2) = {diff:.6g} (must be <= 1/2)")


def solve_ade(cfg: AdeConfig) -> SnapshotMatrix:
    """Explicit Euler advection-diffusion solve with periodic wrap.

    Centered differences in both directions (indices modulo nx, ny); each
    step is u_next = u + dt * (-cx Dx u - cy Dy u + nu Lap u). Refuses to run
    when either CFL bound fails. Returns an (nx*ny) x (n_steps + 1) matrix.
    """
    check_ade_cfl(cfg)
    x = -1.0 + cfg.dx * np.arange(cfg.nx)
    y = -1.0 + cfg.dy * np.arange(cfg.ny)
    X, Y = np.meshgrid(x, y, indexing="xy")
    if cfg.initial_profile is not None:
        u = np.asarray(cfg.initial_profile(X, Y), dtype=float).copy()
    else:
        x0, y0 = cfg.center
        u = np.exp(-(((X - x0) ** 2 + (Y - y0) ** 2) / (2.0 * cfg.width**2)))
    if u.shape != (cfg.ny, cfg.nx):
        raise ValueError("initial_profile must return a (ny, nx) field")

    n_steps = cfg.n_steps
    snaps = np.empty((cfg.nx * cfg.ny, n_steps + 1))
    snaps[:, 0] = u.reshape(-1)
    inv2dx = 1.0 / (2.0 * cfg.dx)
    inv2dy = 1.0 / (2.0 * cfg.dy)
    invdx2 = 1.0 / cfg.dx**2
    invdy2 = 1.0 / cfg.dy**2
    for m in range(n_steps):
        # axis 1 is x (index i), axis 0 is y (index j)
        uxp = np.roll(u, -1, axis=1)
        uxm = np.roll(u, 1, axis=1)
        uyp = np.roll(u, -1, axis=0)
        uym = np.roll(u, 1, axis=0)
        dx_u = (uxp - uxm) * inv2dx
        dy_u = (uyp - uym) * inv2dy
        lap = (uxp - 2.0 * u + uxm) * invdx2 + (uyp - 2.0 * u + uym) * invdy2
        u = u + cfg.dt * (-cfg.cx * dx_u - cfg.cy * dy_u + cfg.viscosity * lap)
        if not np.all(np.isfinite(u)):
            raise FomDivergence(
                f"non-finite state at time step {m + 1}", step=m + 1)
        snaps[:, m + 1] = u.reshape(-1)
    times = np.arange(n_steps + 1) * cfg.dt
    return SnapshotMatrix(snaps, times)


@dataclass(frozen=True)
class QuadraticFomOperators:
    """Full-order quadratic operators (C, A, H, B) for synthetic systems."""

    C: np.ndarray
    A: np.ndarray
    H: np.ndarray
    B: np.ndarray

    def __post_init__(self):
        C = np.atleast_1d(np.asarray(self.C, dtype=float))
        n = C.shape[0]
        A = np.asarray(self.A, dtype=float).reshape(n, n)
        H = np.asarray(self.H, dtype=float).reshape(n, n * n)
        B = np.asarray(self.B, dtype=float).reshape(n, -1)
        H3 = H.reshape(n, n, n)
        if not np.allclose(H3, H3.transpose(0, 2, 1), rtol=0, atol=1e-12 * max(1.0, np.abs(H).max())):
            raise ValueError("H must be symmetric in its last two modes")
        for arr in (C, A, H, B):
            if not np.all(np.isfinite(arr)):
                raise ValueError("operator entries must be finite")
            arr.flags.writeable = False
        object.__setattr__(self, "C", C)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "H", H)
        object.__setattr__(self, "B", B)

    @property
    def n(self) -> int:
        return self.C.shape[0]

    @property
    def m(self) -> int:
        return self.B.shape[1]


def simulate_synthetic_fom(ops: QuadraticFomOperators, u0: np.ndarray,
                           input_signal, times: np.ndarray,
                           rtol: float = 1e-8, atol: float = 1e-10,
                           max_steps: int = rom.DEFAULT_MAX_STEPS) -> SnapshotMatrix:
    """Integrate du/dt = C + A u + H (u ⊗ u) + B s(t), sampled at `times`.

    Uses the same adaptive integrator as the reduced model, at oracle-duty
    tolerances by default. Raises IntegrationDiverged on blow-up.
    """
    times = np.asarray(times, dtype=float)
    if times.ndim != 1 or times.size < 2:
        raise ValueError("need at least two sample times")
    if np.any(np.diff(times) <= 0):
        raise ValueError("sample times must be strictly increasing")
    u0 = np.atleast_1d(np.asarray(u0, dtype=float))
    if u0.shape != (ops.n,):
        raise ValueError(f"u0 has shape {u0.shape}, expected ({ops.n},)")

    C, A = ops.C, ops.A
    H3 = ops.H.reshape(ops.n, ops.n, ops.n)
    if ops.m == 0:
        def f(t, u):
            return C + A @ u + (H3 @ u) @ u
    else:
        if input_signal is None:
            raise ValueError("operators have m > 0 but no input signal was given")
        B = ops.B

        def f(t, u):
            return C + A @ u + (H3 @ u) @ u + B @ np.asarray(input_signal(t))

    traj = rom.propagate(f, (times[0], times[-1]), u0,
                         rtol=rtol, atol=atol, max_steps=max_steps)
    return SnapshotMatrix(traj.evaluate(times), times)
