import json

import numpy as np
import pytest

from adjrom import fom, harness
from adjrom.adjoint import TrainConfig
from adjrom.fom import SnapshotMatrix, simulate_synthetic_fom
from adjrom.harness import (CSV_HEADER, ExperimentConfig, add_noise, rse,
                            run_cell, split, subsample, write_results_csv)
from adjrom.opinf import OpinfGrids
from conftest import exact_latent_fom


def uniform_snap(n=3, k=100, seed=0):
    rng = np.random.default_rng(seed)
    return SnapshotMatrix(rng.standard_normal((n, k)),
                          np.linspace(0.0, 1.0, k))


class TestSubsample:
    def test_full_count_is_identity(self):
        snap = uniform_snap()
        out = subsample(snap, snap.k)
        np.testing.assert_array_equal(out.states, snap.states)

    def test_index_formula(self):
        snap = uniform_snap(k=10000)
        out = subsample(snap, 20)
        expected = np.floor(np.arange(20) * 9999 / 19 + 0.5).astype(int)
        assert expected[0] == 0 and expected[-1] == 9999
        assert expected[1] == 526
        np.testing.assert_array_equal(out.times, snap.times[expected])

    def test_endpoints_and_ordering_preserved(self):
        snap = uniform_snap(k=1234)
        for target in (2, 17, 500):
            out = subsample(snap, target)
            assert out.k == target
            assert out.times[0] == snap.times[0]
            assert out.times[-1] == snap.times[-1]
            assert np.all(np.diff(out.times) > 0)

    def test_out_of_range_rejected(self):
        snap = uniform_snap(k=10)
        with pytest.raises(ValueError):
            subsample(snap, 1)
        with pytest.raises(ValueError):
            subsample(snap, 11)


class TestSplit:
    def test_ten_uniform_times(self):
        times = np.linspace(0.0, 1.0, 10)
        spl = split(times, (0.5, 0.2, 0.3))
        assert (len(spl.train), len(spl.val), len(spl.test)) == (5, 2, 3)
        assert np.all(np.diff(np.concatenate([spl.train, spl.val, spl.test])) == 1)

    def test_study_fractions_on_dense_grid(self):
        times = np.linspace(0.0, 1.0, 10000)
        spl = split(times, (0.5, 0.1, 0.4))
        assert times[spl.train[-1]] <= 0.5 + 1e-9
        assert times[spl.val[0]] > 0.5
        assert times[spl.val[-1]] <= 0.6 + 1e-9
        assert times[spl.test[0]] > 0.6

    def test_boundary_snapshot_goes_to_earlier_partition(self):
        times = np.array([0.0, 0.25, 0.5, 0.75, 1.0])
        spl = split(times, (0.5, 0.25, 0.25))
        assert 2 in spl.train  # t = 0.5 exactly on the boundary
        assert 3 in spl.val    # t = 0.75 exactly on the second boundary

    def test_degenerate_fractions_rejected(self):
        times = np.linspace(0, 1, 10)
        with pytest.raises(ValueError):
            split(times, (1.0, 0.0, 0.0))
        with pytest.raises(ValueError):
            split(times, (0.6, 0.3, 0.3))

    def test_empty_partition_rejected(self):
        times = np.linspace(0, 1, 4)
        with pytest.raises(ValueError, match="empty"):
            split(times, (0.8, 0.05, 0.15))


class TestAddNoise:
    def test_zero_level_bit_exact(self):
        snap = uniform_snap()
        spl = split(snap.times, (0.5, 0.2, 0.3))
        out = add_noise(snap, spl, 0.0, seed=1)
        assert out is snap

    def test_test_partition_untouched(self):
        snap = uniform_snap(seed=2)
        spl = split(snap.times, (0.5, 0.2, 0.3))
        out = add_noise(snap, spl, 120.0, seed=3)
        np.testing.assert_array_equal(out.states[:, spl.test],
                                      snap.states[:, spl.test])
        assert not np.array_equal(out.states[:, spl.train],
                                  snap.states[:, spl.train])
        assert not np.array_equal(out.states[:, spl.val],
                                  snap.states[:, spl.val])

    def test_deterministic_given_seed(self):
        snap = uniform_snap(seed=4)
        spl = split(snap.times, (0.5, 0.2, 0.3))
        a = add_noise(snap, spl, 80.0, seed=5)
        b = add_noise(snap, spl, 80.0, seed=5)
        np.testing.assert_array_equal(a.states, b.states)

    def test_noise_scale_matches_sigma_q(self):
        # 1e5 noisy entries: the sample std of (noisy - clean) sits within
        # 2% of the requested scale
        rng = np.random.default_rng(6)
        snap = SnapshotMatrix(rng.standard_normal((10, 12500)),
                              np.linspace(0, 1, 12500))
        spl = split(snap.times, (0.5, 0.3, 0.2))
        sigma_q = float(np.std(snap.states[:, spl.train]))
        out = add_noise(snap, spl, 100.0, seed=7)
        cols = np.concatenate([spl.train, spl.val])
        diff = out.states[:, cols] - snap.states[:, cols]
        assert diff.size >= 1e5
        assert abs(np.std(diff) - sigma_q) <= 0.02 * sigma_q

    def test_noise_grid_constants(self):
        assert harness.NOISE_GRID == (0.0, 40.0, 80.0, 120.0, 160.0, 200.0)


class TestRse:
    def test_exact_prediction(self):
        x = np.arange(6.0).reshape(2, 3) + 1
        assert rse(x, x) == 0.0

    def test_zero_prediction(self):
        x = np.ones((2, 4))
        assert rse(np.zeros_like(x), x) == 1.0

    def test_hand_example(self):
        truth = np.array([[3.0, 4.0]])
        pred = np.array([[3.0, 0.0]])
        assert rse(pred, truth) == pytest.approx(0.8)

    def test_zero_reference_rejected(self):
        with pytest.raises(ValueError):
            rse(np.ones((1, 2)), np.zeros((1, 2)))


def small_cell_config(**overrides):
    base = dict(
        pde="synthetic",
        pde_params={"n": 12, "horizon_T": 1.5, "n_samples": 241, "seed": 3},
        r_values=(2, 3),
        methods=("opinf-ord2",),
        seed=11,
        train_config=TrainConfig(n_cycles=1, max_iters_per_segment=4,
                                 max_steps=4000),
        opinf_grids=OpinfGrids(ridge_weights=(0.0, 1e-2),
                               tsvd_discards=(0, 1), stencil_orders=(2,)),
    )
    base.update(overrides)
    return ExperimentConfig(**base)


class TestRunCell:
    def test_record_count_matches_methods_times_r(self):
        records = run_cell(small_cell_config())
        assert len(records) == 2  # one method, two r values
        assert {rec.r for rec in records} == {2, 3}

    def test_exact_latent_dynamics_recovered(self):
        ops, latent, V, u0 = exact_latent_fom(n=16, r=3, seed=3)
        times = np.linspace(0.0, 3.0, 3001)
        snap = simulate_synthetic_fom(ops, u0, None, times,
                                      rtol=1e-10, atol=1e-12)
        cfg = small_cell_config(r_values=(3,),
                                methods=("opinf-ord2", "opinf-ord6"),
                                opinf_grids=OpinfGrids())
        records = run_cell(cfg, snapshots=snap)
        assert len(records) == 2
        for rec in records:
            assert not rec.diverged
            assert rec.test_rse <= 1e-4

    def test_failures_flagged_not_raised(self):
        # dq/dt = q^2 data with the pole inside the validation window: the
        # unregularized fit recovers the blow-up and diverges when rolled out
        times = np.linspace(0.0, 1.0, 101)
        states = (1.0 / (0.8837 - times))[None, :]
        lifted = np.linspace(1.0, 2.0, 10)[:, None] * states
        snap = SnapshotMatrix(lifted, times)
        cfg = small_cell_config(r_values=(1,), methods=("opinf-ord2",),
                                split_fractions=(0.5, 0.4, 0.1),
                                opinf_grids=OpinfGrids(ridge_weights=(0.0,),
                                                       tsvd_discards=(0,),
                                                       stencil_orders=(2,)))
        records = run_cell(cfg, snapshots=snap)
        assert len(records) == 1
        assert records[0].diverged
        assert not np.isfinite(records[0].test_rse)

    def test_csv_schema_and_determinism(self, tmp_path):
        cfg = small_cell_config()
        rec_a = run_cell(cfg)
        rec_b = run_cell(cfg)
        pa, pb = tmp_path / "a.csv", tmp_path / "b.csv"
        write_results_csv(rec_a, pa)
        write_results_csv(rec_b, pb)
        lines_a = pa.read_text().splitlines()
        lines_b = pb.read_text().splitlines()
        assert lines_a[0] == ",".join(CSV_HEADER)
        strip = lambda line: line.split(",")[:8] + line.split(",")[9:]
        assert [strip(l) for l in lines_a] == [strip(l) for l in lines_b]

    def test_adjoint_method_produces_record(self):
        cfg = small_cell_config(
            r_values=(2,), methods=("adjoint",), noise_pct=40.0,
            train_config=TrainConfig(n_cycles=1, max_iters_per_segment=3,
                                     ridge_grid=(0.0, 1e-1), max_steps=4000),
            opinf_grids=OpinfGrids(ridge_weights=(0.0, 1e-2, 1e-1, 1.0),
                                   tsvd_discards=(0, 1, 2, 3),
                                   stencil_orders=(2,)))
        records = run_cell(cfg)
        assert len(records) == 1
        rec = records[0]
        assert rec.method == "adjoint"
        assert "theta_ridge" in rec.hyperparams
        assert rec.test_rse >= 0.0


class TestRunCells:
    def test_multiple_cells_ordered(self):
        cfgs = [small_cell_config(seed=1), small_cell_config(seed=2)]
        records = harness.run_cells(cfgs, workers=1)
        assert [rec.seed for rec in records] == [1, 1, 2, 2]

    def test_worker_pool_matches_sequential(self):
        cfgs = [small_cell_config(seed=1), small_cell_config(seed=2)]
        seq = harness.run_cells(cfgs, workers=1)
        par = harness.run_cells(cfgs, workers=2)
        assert [(r.pde, r.method, r.r, r.val_rse, r.test_rse) for r in seq] \
            == [(r.pde, r.method, r.r, r.val_rse, r.test_rse) for r in par]


class TestConfigParsing:
    def test_from_dict_roundtrip(self):
        data = {
            "pde": "synthetic",
            "pde_params": {"n": 8},
            "snapshot_count": 101,
            "noise_pct": 80.0,
            "r_values": [1, 2],
            "methods": ["opinf-ord2", "adjoint"],
            "seed": 7,
            "train_config": {"n_cycles": 2, "ridge_grid": [0.0, 1.0]},
            "opinf_grids": {"ridge_weights": [0.0], "tsvd_discards": [0],
                            "stencil_orders": [2]},
        }
        cfg = ExperimentConfig.from_dict(json.loads(json.dumps(data)))
        assert cfg.r_values == (1, 2)
        assert cfg.train_config.n_cycles == 2
        assert cfg.train_config.ridge_grid == (0.0, 1.0)
        assert cfg.opinf_grids.stencil_orders == (2,)

    def test_unknown_pde_rejected(self):
        with pytest.raises(ValueError):
            ExperimentConfig(pde="heat")

    def test_unknown_method_rejected(self):
        with pytest.raises(ValueError):
            ExperimentConfig(methods=("newton",))


class TestGenerateSnapshots:
    def test_synthetic_generation_deterministic(self):
        cfg = small_cell_config()
        a = harness.generate_snapshots(cfg)
        b = harness.generate_snapshots(cfg)
        np.testing.assert_array_equal(a.states, b.states)

    def test_pde_params_forwarded(self):
        cfg = ExperimentConfig(pde="burgers",
                               pde_params={"n_interior": 30, "n_steps": 40,
                                           "horizon_T": 0.1},
                               methods=("opinf-ord2",))
        snap = harness.generate_snapshots(cfg)
        assert snap.states.shape == (32, 41)
