import json

import numpy as np
import pytest

from adjrom.rom import (IntegrationDiverged, ReducedTrajectory, RomParams,
                        eval_trajectory, integrate_forward, jac_state, rhs,
                        symmetrize_quadratic)
from conftest import random_rom


def kron_contract_loops(H, q):
    """Naive triple-loop evaluation of H (q ⊗ q) as the oracle."""
    r = len(q)
    out = np.zeros(r)
    for i in range(r):
        for j in range(r):
            for k in range(r):
                out[i] += H[i, j * r + k] * q[j] * q[k]
    return out


class TestRhs:
    def test_zero_params_give_zero(self):
        p = RomParams.zeros(3)
        assert np.all(rhs(np.array([1.0, -2.0, 0.5]), None, p) == 0.0)

    def test_identity_linear_term(self):
        p = RomParams(np.zeros(2), np.eye(2), np.zeros((2, 4)), np.zeros((2, 0)))
        q = np.array([0.3, -1.2])
        np.testing.assert_array_equal(rhs(q, None, p), q)

    def test_quadratic_term_matches_loop_oracle(self):
        rng = np.random.default_rng(3)
        for _ in range(10):
            r = 3
            H = rng.standard_normal((r, r * r))
            Hs = symmetrize_quadratic(H)
            p = RomParams(np.zeros(r), np.zeros((r, r)), Hs, np.zeros((r, 0)))
            q = rng.standard_normal(r)
            expected = kron_contract_loops(Hs, q)
            np.testing.assert_allclose(rhs(q, None, p), expected, atol=1e-14)

    def test_input_term(self):
        p = RomParams(np.zeros(2), np.zeros((2, 2)), np.zeros((2, 4)),
                      np.array([[1.0], [2.0]]))
        out = rhs(np.zeros(2), np.array([3.0]), p)
        np.testing.assert_allclose(out, [3.0, 6.0])

    def test_dimension_mismatch(self):
        p = RomParams.zeros(2)
        with pytest.raises(ValueError):
            rhs(np.zeros(3), None, p)


class TestJacState:
    def test_zero_quadratic_gives_A(self):
        rng = np.random.default_rng(0)
        A = rng.standard_normal((3, 3))
        p = RomParams(np.zeros(3), A, np.zeros((3, 9)), np.zeros((3, 0)))
        np.testing.assert_array_equal(jac_state(rng.standard_normal(3), p), A)

    def test_origin_gives_A(self):
        rng = np.random.default_rng(1)
        p = random_rom(rng, 4)
        np.testing.assert_array_equal(jac_state(np.zeros(4), p), p.A)

    def test_matches_central_differences(self):
        # 100 random draws across r = 1..6, relative error <= 1e-7
        rng = np.random.default_rng(42)
        step = 1e-6
        for draw in range(100):
            r = 1 + draw % 6
            p = random_rom(rng, r)
            q = rng.standard_normal(r)
            J = jac_state(q, p)
            J_fd = np.empty((r, r))
            for j in range(r):
                qp, qm = q.copy(), q.copy()
                qp[j] += step
                qm[j] -= step
                J_fd[:, j] = (rhs(qp, None, p) - rhs(qm, None, p)) / (2 * step)
            scale = np.abs(J_fd).max() + 1.0
            assert np.abs(J - J_fd).max() / scale <= 1e-7


class TestSymmetrize:
    def test_symmetric_unchanged(self):
        rng = np.random.default_rng(5)
        H = symmetrize_quadratic(rng.standard_normal((3, 9)))
        np.testing.assert_array_equal(symmetrize_quadratic(H), H)

    def test_antisymmetric_part_vanishes(self):
        r = 3
        rng = np.random.default_rng(6)
        raw = rng.standard_normal((r, r, r))
        anti = (raw - raw.transpose(0, 2, 1)).reshape(r, r * r)
        assert np.abs(symmetrize_quadratic(anti)).max() == 0.0

    def test_contraction_preserved(self):
        rng = np.random.default_rng(7)
        for _ in range(10):
            r = 4
            H_raw = rng.standard_normal((r, r * r))
            q = rng.standard_normal(r)
            a = kron_contract_loops(H_raw, q)
            b = kron_contract_loops(symmetrize_quadratic(H_raw), q)
            np.testing.assert_allclose(a, b, atol=1e-14)


class TestRomParams:
    @pytest.mark.parametrize("r,m", [(1, 0), (3, 0), (2, 2), (5, 1)])
    def test_parameter_count_identity(self, r, m):
        p = RomParams.zeros(r, m)
        assert p.d == r + r**2 + r**3 + r * m

    def test_vector_roundtrip(self):
        rng = np.random.default_rng(8)
        p = random_rom(rng, 3, m=2)
        q = RomParams.from_vector(3, 2, p.as_vector())
        np.testing.assert_array_equal(q.c, p.c)
        np.testing.assert_array_equal(q.A, p.A)
        np.testing.assert_array_equal(q.H, p.H)
        np.testing.assert_array_equal(q.B, p.B)

    def test_json_roundtrip(self, tmp_path):
        rng = np.random.default_rng(9)
        p = random_rom(rng, 2, m=1)
        path = tmp_path / "theta.json"
        p.save(path, extra={"hyperparams": {"ridge": 0.1}})
        loaded = RomParams.load(path)
        np.testing.assert_allclose(loaded.as_vector(), p.as_vector())
        payload = json.loads(path.read_text())
        assert payload["r"] == 2 and payload["m"] == 1
        assert payload["hyperparams"] == {"ridge": 0.1}

    def test_construction_symmetrizes_H(self):
        rng = np.random.default_rng(10)
        H_raw = rng.standard_normal((2, 4))
        p = RomParams(np.zeros(2), np.zeros((2, 2)), H_raw, np.zeros((2, 0)))
        np.testing.assert_array_equal(p.H, symmetrize_quadratic(H_raw))
        q = rng.standard_normal(2)
        np.testing.assert_allclose(rhs(q, None, p),
                                   kron_contract_loops(H_raw, q), atol=1e-14)

    def test_nonfinite_rejected(self):
        with pytest.raises(ValueError):
            RomParams(np.array([np.nan]), np.zeros((1, 1)), np.zeros((1, 1)),
                      np.zeros((1, 0)))


class TestIntegrateForward:
    def test_zero_params_constant_trajectory(self):
        p = RomParams.zeros(3)
        q0 = np.array([1.0, -2.0, 0.5])
        traj = integrate_forward(p, q0, None, (0.0, 2.0))
        assert np.abs(traj.states - q0[:, None]).max() < 1e-12

    @pytest.mark.parametrize("a", [-1.3, 0.7])
    def test_scalar_linear_closed_form(self, a):
        rtol = 1e-8
        p = RomParams(np.zeros(1), np.array([[a]]), np.zeros((1, 1)),
                      np.zeros((1, 0)))
        traj = integrate_forward(p, np.array([2.0]), None, (0.0, 1.5),
                                 rtol=rtol, atol=1e-12)
        exact = 2.0 * np.exp(a * 1.5)
        assert abs(traj.states[0, -1] - exact) <= 10 * rtol * abs(exact)

    def test_scalar_logistic_closed_form(self):
        rho, q0, T = 1.0, 0.1, 4.0
        rtol = 1e-8
        p = RomParams(np.zeros(1), np.array([[rho]]), np.array([[-rho]]),
                      np.zeros((1, 0)))
        traj = integrate_forward(p, np.array([q0]), None, (0.0, T),
                                 rtol=rtol, atol=1e-12)
        exact = (q0 * np.exp(rho * traj.times)
                 / (1.0 + q0 * (np.exp(rho * traj.times) - 1.0)))
        assert np.abs(traj.states[0] - exact).max() <= 10 * rtol

    def test_deterministic(self):
        rng = np.random.default_rng(11)
        p = random_rom(rng, 4)
        q0 = rng.standard_normal(4)
        t1 = integrate_forward(p, q0, None, (0.0, 1.0))
        t2 = integrate_forward(p, q0, None, (0.0, 1.0))
        np.testing.assert_array_equal(t1.times, t2.times)
        np.testing.assert_array_equal(t1.states, t2.states)

    def test_divergence_reports_failure_time(self):
        # dq/dt = q^2 from q0 = 5 has a pole at t = 0.2
        p = RomParams(np.zeros(1), np.zeros((1, 1)), np.ones((1, 1)),
                      np.zeros((1, 0)))
        with pytest.raises(IntegrationDiverged) as info:
            integrate_forward(p, np.array([5.0]), None, (0.0, 1.0))
        assert abs(info.value.time - 0.2) < 0.01

    def test_input_signal_drives_state(self):
        # dq/dt = s(t) with s = cos(t): q(T) = sin(T)
        p = RomParams(np.zeros(1), np.zeros((1, 1)), np.zeros((1, 1)),
                      np.eye(1))
        traj = integrate_forward(p, np.zeros(1), lambda t: np.array([np.cos(t)]),
                                 (0.0, 1.0), rtol=1e-9, atol=1e-12)
        assert abs(traj.states[0, -1] - np.sin(1.0)) < 1e-7


class TestDenseEvaluation:
    def test_exact_at_nodes(self):
        rng = np.random.default_rng(12)
        p = random_rom(rng, 3)
        traj = integrate_forward(p, rng.standard_normal(3), None, (0.0, 1.0))
        for i in (0, len(traj.times) // 2, len(traj.times) - 1):
            np.testing.assert_array_equal(eval_trajectory(traj, traj.times[i]),
                                          traj.states[:, i])

    def test_constant_trajectory_constant_everywhere(self):
        p = RomParams.zeros(2)
        q0 = np.array([3.0, -1.0])
        traj = integrate_forward(p, q0, None, (0.0, 1.0))
        ts = np.linspace(0.0, 1.0, 17)
        assert np.abs(traj.evaluate(ts) - q0[:, None]).max() < 1e-12

    def test_fourth_order_interpolation(self):
        # Hermite error on analytic linear dynamics drops ~16x per halving.
        A = np.array([[0.0, 1.0], [-4.0, 0.0]])

        def analytic(ts):
            w = 2.0
            return np.vstack([np.cos(w * ts), -w * np.sin(w * ts)])

        errs = []
        for n in (8, 16, 32):
            ts = np.linspace(0.0, 1.0, n + 1)
            states = analytic(ts)
            traj = ReducedTrajectory(ts, states, A @ states)
            fine = np.linspace(0.0, 1.0, 4 * n + 1)[1::2]  # off-node points
            errs.append(np.abs(traj.evaluate(fine) - analytic(fine)).max())
        for e0, e1 in zip(errs[:-1], errs[1:]):
            assert 10.0 <= e0 / e1 <= 24.0

    def test_outside_span_raises(self):
        p = RomParams.zeros(1)
        traj = integrate_forward(p, np.ones(1), None, (0.0, 1.0))
        with pytest.raises(ValueError):
            traj.evaluate(1.5)
