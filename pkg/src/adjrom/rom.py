"""Quadratic reduced-order model: right-hand side, exact derivatives, and
adaptive forward time integration with dense trajectory evaluation.

The model is

    dq/dt = c + A q + H (q ⊗ q) + B s(t),

with state q in R^r, input s(t) in R^m, and H stored as an r-by-r^2 matrix
that is symmetric in its last two modes (H[i, j*r+k] == H[i, k*r+j]).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "RomParams",
    "ReducedTrajectory",
    "IntegrationDiverged",
    "symmetrize_quadratic",
    "rhs",
    "jac_state",
    "integrate_forward",
    "eval_trajectory",
    "propagate",
]

DEFAULT_RTOL = 1e-6
DEFAULT_ATOL = 1e-9
DEFAULT_MAX_STEPS = 100_000


class IntegrationDiverged(RuntimeError):
    """Adaptive integration failed (non-finite state or step-size underflow).

    Carries the time at which the failure was detected. This is an expected
    outcome for unstable parameter values and is meant to be caught and
    scored, not to abort a study.
    """

    def __init__(self, message: str, time: float):
        super().__init__(message)
        self.time = float(time)


def symmetrize_quadratic(H_raw: np.ndarray) -> np.ndarray:
    """Symmetrize an r-by-r^2 quadratic operator in its last two modes.

    H[i, j*r+k] <- (H_raw[i, j*r+k] + H_raw[i, k*r+j]) / 2. Idempotent, and
    preserves the map q -> H (q ⊗ q).
    """
    H_raw = np.asarray(H_raw, dtype=float)
    r = H_raw.shape[0]
    if H_raw.shape != (r, r * r):
        raise ValueError(f"expected shape ({r}, {r * r}), got {H_raw.shape}")
    H3 = H_raw.reshape(r, r, r)
    return ((H3 + H3.transpose(0, 2, 1)) / 2.0).reshape(r, r * r)


@dataclass(frozen=True)
class RomParams:
    """Parameter bundle (c, A, H, B) of the quadratic model.

    H is symmetrized on construction, so the stored operator always satisfies
    the last-two-mode symmetry that the state Jacobian formula relies on.
    The total parameter count is d = r + r^2 + r^3 + r*m.
    """

    c: np.ndarray
    A: np.ndarray
    H: np.ndarray
    B: np.ndarray
    H3: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        c = np.atleast_1d(np.asarray(self.c, dtype=float))
        r = c.shape[0]
        A = np.asarray(self.A, dtype=float).reshape(r, r)
        H = symmetrize_quadratic(np.asarray(self.H, dtype=float).reshape(r, r * r))
        B = np.asarray(self.B, dtype=float).reshape(r, -1)
        for name, arr in (("c", c), ("A", A), ("H", H), ("B", B)):
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"non-finite entries in parameter block {name}")
        H3 = H.reshape(r, r, r)
        for name, arr in (("c", c), ("A", A), ("H", H), ("B", B), ("H3", H3)):
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)
        assert self.d == r + r**2 + r**3 + r * self.m

    @property
    def r(self) -> int:
        return self.c.shape[0]

    @property
    def m(self) -> int:
        return self.B.shape[1]

    @property
    def d(self) -> int:
        """Total number of scalar parameters."""
        return self.c.size + self.A.size + self.H.size + self.B.size

    @classmethod
    def zeros(cls, r: int, m: int = 0) -> "RomParams":
        return cls(np.zeros(r), np.zeros((r, r)), np.zeros((r, r * r)),
                   np.zeros((r, m)))

    def as_vector(self) -> np.ndarray:
        """Flatten to a d-vector in block order (c, A, H, B), row-major."""
        return np.concatenate([self.c, self.A.ravel(), self.H.ravel(),
                               self.B.ravel()])

    @classmethod
    def from_vector(cls, r: int, m: int, vec: np.ndarray) -> "RomParams":
        vec = np.asarray(vec, dtype=float)
        d = r + r * r + r**3 + r * m
        if vec.shape != (d,):
            raise ValueError(f"expected a vector of length {d}, got {vec.shape}")
        c = vec[:r]
        A = vec[r:r + r * r].reshape(r, r)
        H = vec[r + r * r:r + r * r + r**3].reshape(r, r * r)
        B = vec[r + r * r + r**3:].reshape(r, m)
        return cls(c, A, H, B)

    def to_dict(self) -> dict:
        return {
            "r": self.r,
            "m": self.m,
            "c": self.c.tolist(),
            "A": self.A.ravel().tolist(),
            "H": self.H.ravel().tolist(),
            "B": self.B.ravel().tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "RomParams":
        r, m = int(data["r"]), int(data["m"])
        return cls(
            np.asarray(data["c"], dtype=float),
            np.asarray(data["A"], dtype=float).reshape(r, r),
            np.asarray(data["H"], dtype=float).reshape(r, r * r),
            np.asarray(data["B"], dtype=float).reshape(r, m),
        )

    def save(self, path, extra: dict | None = None) -> None:
        payload = self.to_dict()
        if extra:
            payload.update(extra)
        with open(path, "w") as fh:
            json.dump(payload, fh, indent=2)

    @classmethod
    def load(cls, path) -> "RomParams":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def rhs(q: np.ndarray, s: np.ndarray | None, params: RomParams) -> np.ndarray:
    """Evaluate c + A q + H (q ⊗ q) + B s."""
    q = np.asarray(q, dtype=float)
    if q.shape != (params.r,):
        raise ValueError(f"state has shape {q.shape}, expected ({params.r},)")
    out = params.c + params.A @ q + (params.H3 @ q) @ q
    if params.m:
        s = np.asarray(s, dtype=float)
        if s.shape != (params.m,):
            raise ValueError(f"input has shape {s.shape}, expected ({params.m},)")
        out = out + params.B @ s
    return out


def jac_state(q: np.ndarray, params: RomParams) -> np.ndarray:
    """State Jacobian A + 2 H (I_r ⊗ q), valid under the H symmetry."""
    q = np.asarray(q, dtype=float)
    if q.shape != (params.r,):
        raise ValueError(f"state has shape {q.shape}, expected ({params.r},)")
    return params.A + 2.0 * (params.H3 @ q)


class ReducedTrajectory:
    """Piecewise-cubic trajectory built from integrator nodes.

    Stores node times (strictly increasing), node states, and node
    derivatives; evaluation between nodes uses the cubic Hermite interpolant,
    which reproduces node states exactly.
    """

    def __init__(self, times: np.ndarray, states: np.ndarray,
                 derivs: np.ndarray, stats: dict | None = None):
        times = np.asarray(times, dtype=float)
        states = np.asarray(states, dtype=float)
        derivs = np.asarray(derivs, dtype=float)
        if times.ndim != 1 or times.size < 2:
            raise ValueError("need at least two node times")
        if np.any(np.diff(times) <= 0):
            raise ValueError("node times must be strictly increasing")
        if states.shape != (states.shape[0], times.size) or states.shape != derivs.shape:
            raise ValueError("states/derivs must be (r, n_nodes) matching times")
        self.times = times
        self.states = states
        self.derivs = derivs
        self.stats = stats or {}

    @property
    def r(self) -> int:
        return self.states.shape[0]

    @property
    def t_span(self) -> tuple[float, float]:
        return float(self.times[0]), float(self.times[-1])

    def _eval_scalar(self, t: float) -> np.ndarray:
        times = self.times
        t0 = times[0]
        t1 = times[-1]
        if t < t0 or t > t1:
            slack = 1e-12 * max(abs(t0), abs(t1), t1 - t0)
            if t < t0 - slack or t > t1 + slack:
                raise ValueError(f"evaluation time outside span [{t0}, {t1}]")
            t = t0 if t < t0 else t1
        idx = int(np.searchsorted(times, t, side="right")) - 1
        if idx > times.size - 2:
            idx = times.size - 2
        elif idx < 0:
            idx = 0
        h = times[idx + 1] - times[idx]
        s = (t - times[idx]) / h
        s2 = s * s
        s3 = s2 * s
        return (self.states[:, idx] * (2 * s3 - 3 * s2 + 1)
                + self.derivs[:, idx] * (h * (s3 - 2 * s2 + s))
                + self.states[:, idx + 1] * (-2 * s3 + 3 * s2)
                + self.derivs[:, idx + 1] * (h * (s3 - s2)))

    def evaluate(self, t) -> np.ndarray:
        """Evaluate at scalar or array times inside the trajectory span."""
        if isinstance(t, float) or np.ndim(t) == 0:
            return self._eval_scalar(float(t))
        t_arr = np.atleast_1d(np.asarray(t, dtype=float))
        t0, t1 = self.times[0], self.times[-1]
        slack = 1e-12 * max(abs(t0), abs(t1), t1 - t0)
        if np.any(t_arr < t0 - slack) or np.any(t_arr > t1 + slack):
            raise ValueError(
                f"evaluation time outside span [{t0}, {t1}]")
        tc = np.clip(t_arr, t0, t1)
        idx = np.searchsorted(self.times, tc, side="right") - 1
        idx = np.clip(idx, 0, self.times.size - 2)
        h = self.times[idx + 1] - self.times[idx]
        s = (tc - self.times[idx]) / h
        s2 = s * s
        s3 = s2 * s
        h00 = 2 * s3 - 3 * s2 + 1
        h10 = s3 - 2 * s2 + s
        h01 = -2 * s3 + 3 * s2
        h11 = s3 - s2
        return (self.states[:, idx] * h00 + self.derivs[:, idx] * (h * h10)
                + self.states[:, idx + 1] * h01
                + self.derivs[:, idx + 1] * (h * h11))


def eval_trajectory(traj: ReducedTrajectory, t) -> np.ndarray:
    """Dense-evaluate a trajectory at time(s) t (exact at stored nodes)."""
    return traj.evaluate(t)


# Dormand-Prince 5(4) tableau.
_DP_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_DP_A = [
    np.array([]),
    np.array([1 / 5]),
    np.array([3 / 40, 9 / 40]),
    np.array([44 / 45, -56 / 15, 32 / 9]),
    np.array([19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729]),
    np.array([9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656]),
    np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84]),
]
# Difference between the 5th-order and the embedded 4th-order weights.
_DP_E = np.array([71 / 57600, 0.0, -71 / 16695, 71 / 1920,
                  -17253 / 339200, 22 / 525, -1 / 40])


def _initial_step(f, t0, y0, f0, direction, span, rtol, atol):
    with np.errstate(over="ignore", invalid="ignore"):
        scale = atol + rtol * np.abs(y0)
        d0 = np.sqrt(np.mean((y0 / scale) ** 2))
        d1 = np.sqrt(np.mean((f0 / scale) ** 2))
        h0 = 1e-6 if (d0 < 1e-5 or d1 < 1e-5) else 0.01 * d0 / d1
        h0 = min(h0, span)
        y1 = y0 + h0 * direction * f0
        f1 = f(t0 + h0 * direction, y1)
        d2 = np.sqrt(np.mean(((f1 - f0) / scale) ** 2)) / h0
        if not np.isfinite(d2):
            return h0 * 1e-3
        if max(d1, d2) <= 1e-15:
            h1 = max(1e-6, h0 * 1e-3)
        else:
            h1 = (0.01 / max(d1, d2)) ** 0.2
    return min(100 * h0, h1, span)


def propagate(f, t_span: tuple[float, float], y0: np.ndarray,
              rtol: float = DEFAULT_RTOL, atol: float = DEFAULT_ATOL,
              max_steps: int = DEFAULT_MAX_STEPS) -> ReducedTrajectory:
    """Adaptive embedded Runge-Kutta 5(4) solve of dy/dt = f(t, y).

    Integrates from t_span[0] to t_span[1] (either direction). Node times,
    states, and derivatives are recorded for Hermite dense output; nodes are
    returned in increasing time order regardless of integration direction.

    Raises IntegrationDiverged on non-finite states, step-size underflow, or
    an exhausted step budget, reporting the failure time.
    """
    t0, t1 = float(t_span[0]), float(t_span[1])
    if t0 == t1:
        raise ValueError("degenerate time span")
    y0 = np.atleast_1d(np.asarray(y0, dtype=float))
    if not np.all(np.isfinite(y0)):
        raise ValueError("non-finite initial state")
    direction = 1.0 if t1 > t0 else -1.0
    span = abs(t1 - t0)

    t = t0
    y = y0
    fval = f(t, y)
    if not np.all(np.isfinite(fval)):
        raise IntegrationDiverged(
            f"non-finite derivative at the initial time t={t!r}", t)
    h = _initial_step(f, t0, y0, fval, direction, span, rtol, atol)

    ts = [t]
    ys = [y]
    fs = [fval]
    K = np.empty((7, y.size))
    n_accepted = 0
    n_rejected = 0
    h_min_floor = 10.0 * np.finfo(float).eps

    while (t1 - t) * direction > 0:
        if abs(t1 - t) <= h_min_floor * max(abs(t1), span):
            break  # within roundoff of the endpoint
        if n_accepted + n_rejected >= max_steps:
            raise IntegrationDiverged(
                f"step budget of {max_steps} exhausted at t={t!r}", t)
        h = min(h, abs(t1 - t))
        if h < h_min_floor * max(abs(t), span):
            raise IntegrationDiverged(
                f"step size underflow at t={t!r}", t)
        hs = h * direction
        K[0] = fval
        # Non-finite stage values propagate into err_norm, which is checked
        # below; warnings from intentional blow-ups are suppressed.
        with np.errstate(over="ignore", invalid="ignore"):
            for i in range(1, 7):
                K[i] = f(t + _DP_C[i] * hs, y + hs * (K[:i].T @ _DP_A[i]))
            y_new = y + hs * (K[:6].T @ _DP_A[6])
            err = hs * (K.T @ _DP_E)
            scale = atol + rtol * np.maximum(np.abs(y), np.abs(y_new))
            err_norm = float(np.sqrt(np.mean((err / scale) ** 2)))
        if not err_norm <= 1e290 or not np.all(np.isfinite(y_new)):
            n_rejected += 1
            h *= 0.2
            continue
        if err_norm <= 1.0:
            # FSAL: the 7th stage is f at (t + h, y_new).
            t, y, fval = t + hs, y_new, K[6].copy()
            ts.append(t)
            ys.append(y)
            fs.append(fval)
            n_accepted += 1
            factor = 10.0 if err_norm == 0 else min(10.0, 0.9 * err_norm ** -0.2)
            h *= factor
        else:
            n_rejected += 1
            h *= max(0.2, min(1.0, 0.9 * err_norm ** -0.2))

    times = np.array(ts)
    states = np.array(ys).T
    derivs = np.array(fs).T
    if direction < 0:
        times = times[::-1].copy()
        states = states[:, ::-1].copy()
        derivs = derivs[:, ::-1].copy()
    stats = {"n_accepted": n_accepted, "n_rejected": n_rejected,
             "n_feval": 6 * (n_accepted + n_rejected) + 2}
    return ReducedTrajectory(times, states, derivs, stats)


def integrate_forward(params: RomParams, q0: np.ndarray, input_signal,
                      t_span: tuple[float, float],
                      rtol: float = DEFAULT_RTOL, atol: float = DEFAULT_ATOL,
                      max_steps: int = DEFAULT_MAX_STEPS) -> ReducedTrajectory:
    """Integrate the quadratic model from q0 over t_span.

    input_signal is a callable t -> (m,) array, or None when m == 0.
    Divergence (an expected outcome for unstable parameters) raises
    IntegrationDiverged carrying the failure time.
    """
    q0 = np.atleast_1d(np.asarray(q0, dtype=float))
    if q0.shape != (params.r,):
        raise ValueError(f"q0 has shape {q0.shape}, expected ({params.r},)")
    c, A, H3 = params.c, params.A, params.H3
    if params.m == 0:
        def f(t, q):
            return c + A @ q + (H3 @ q) @ q
    else:
        if input_signal is None:
            raise ValueError("model has m > 0 but no input signal was given")
        Bmat = params.B

        def f(t, q):
            return c + A @ q + (H3 @ q) @ q + Bmat @ np.asarray(input_signal(t))
    return propagate(f, t_span, q0, rtol=rtol, atol=atol, max_steps=max_steps)
