"""Perturbation-study orchestration: snapshot thinning, chronological splits,
reduced-coordinate noise injection, method comparison, and result records.

A study cell fixes (PDE, snapshot count, noise level, seed) and evaluates the
requested methods over a range of reduced dimensions r, scoring each fitted
model by its relative state error on a clean held-out test window.
"""

from __future__ import annotations

import json
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from adjrom import adjoint, opinf
from adjrom.adjoint import ObservedTrajectory, TrainConfig
from adjrom.fom import (AdeConfig, BurgersConfig, FkppConfig,
                        QuadraticFomOperators, SnapshotMatrix,
                        simulate_synthetic_fom, solve_ade, solve_burgers,
                        solve_fisher_kpp)
from adjrom.opinf import OpinfGrids
from adjrom.pod import compute_pod, project
from adjrom.rom import IntegrationDiverged, RomParams, integrate_forward

__all__ = [
    "SplitIndices",
    "ExperimentConfig",
    "ResultRecord",
    "subsample",
    "split",
    "add_noise",
    "rse",
    "make_synthetic_fom",
    "generate_snapshots",
    "run_cell",
    "run_cells",
    "write_results_csv",
    "CSV_HEADER",
]

DEFAULT_SPLITS = {
    "burgers": (0.5, 0.1, 0.4),
    "fkpp": (0.75, 0.1, 0.15),
    "ade": (0.75, 0.1, 0.15),
    "synthetic": (0.5, 0.1, 0.4),
}

NOISE_GRID = (0.0, 40.0, 80.0, 120.0, 160.0, 200.0)

CSV_HEADER = ("pde", "method", "r", "noise_pct", "samples", "val_rse",
              "test_rse", "diverged", "wall_ms", "hyperparams")

_NUMERICAL_FAILURES = (IntegrationDiverged, RuntimeError, ValueError,
                       np.linalg.LinAlgError)


@dataclass(frozen=True)
class SplitIndices:
    """Contiguous chronological index ranges for train/validation/test."""

    train: np.ndarray
    val: np.ndarray
    test: np.ndarray


@dataclass(frozen=True)
class ExperimentConfig:
    """One perturbation-study cell."""

    pde: str = "synthetic"
    pde_params: dict = field(default_factory=dict)
    snapshot_count: int | None = None
    split_fractions: tuple | None = None
    noise_pct: float = 0.0
    r_values: tuple = (1, 2, 3, 4, 5)
    methods: tuple = ("opinf-ord2", "opinf-ord6", "adjoint")
    seed: int = 0
    pod_on_noisy: bool = False
    weight_exponent: float = 1.0
    weight_floor: float = 1e-8
    train_config: TrainConfig = field(default_factory=TrainConfig)
    opinf_grids: OpinfGrids = field(default_factory=OpinfGrids)

    def __post_init__(self):
        if self.pde not in DEFAULT_SPLITS:
            raise ValueError(f"unknown pde {self.pde!r}")
        if self.noise_pct < 0:
            raise ValueError("noise_pct must be >= 0")
        known = {"opinf-ord2", "opinf-ord6", "adjoint"}
        if not self.methods or not set(self.methods) <= known:
            raise ValueError(f"methods must be a non-empty subset of {known}")

    @property
    def fractions(self) -> tuple:
        return self.split_fractions or DEFAULT_SPLITS[self.pde]

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        data = dict(data)
        if "train_config" in data and isinstance(data["train_config"], dict):
            tc = dict(data["train_config"])
            if "ridge_grid" in tc:
                tc["ridge_grid"] = tuple(tc["ridge_grid"])
            data["train_config"] = TrainConfig(**tc)
        if "opinf_grids" in data and isinstance(data["opinf_grids"], dict):
            og = {k: tuple(v) for k, v in data["opinf_grids"].items()}
            data["opinf_grids"] = OpinfGrids(**og)
        for key in ("r_values", "methods", "split_fractions"):
            if key in data and data[key] is not None:
                data[key] = tuple(data[key])
        return cls(**data)


@dataclass
class ResultRecord:
    pde: str
    method: str
    r: int
    noise_pct: float
    samples: int
    val_rse: float
    test_rse: float
    diverged: bool
    wall_ms: float
    hyperparams: dict
    seed: int


def subsample(snap: SnapshotMatrix, target_count: int) -> SnapshotMatrix:
    """Uniformly thin the time grid, always retaining both endpoints.

    Keeps indices round(j * (k-1) / (target_count-1)) for j = 0 ..
    target_count-1; the resulting spacing is uniform to +-1 source index.
    """
    k = snap.k
    if not 2 <= target_count <= k:
        raise ValueError(f"target_count must lie in [2, {k}]")
    if target_count == k:
        return snap
    j = np.arange(target_count)
    idx = np.floor(j * (k - 1) / (target_count - 1) + 0.5).astype(int)
    if np.any(np.diff(idx) <= 0):
        raise ValueError("subsampling produced non-increasing indices")
    return SnapshotMatrix(snap.states[:, idx], snap.times[idx])


def split(times: np.ndarray, fractions) -> SplitIndices:
    """Chronological split into contiguous train/validation/test ranges.

    Boundaries sit at the cumulative fractions of the time span; a snapshot
    exactly on a boundary goes to the earlier partition.
    """
    times = np.asarray(times, dtype=float)
    f = np.asarray(fractions, dtype=float)
    if f.shape != (3,) or np.any(f <= 0):
        raise ValueError("need three positive split fractions")
    if f.sum() > 1.0 + 1e-12:
        raise ValueError("split fractions must sum to at most 1")
    t0 = times[0]
    span = times[-1] - times[0]
    eps = 1e-9 * span
    b1 = t0 + f[0] * span
    b2 = t0 + (f[0] + f[1]) * span
    b3 = t0 + f.sum() * span
    train = np.where(times <= b1 + eps)[0]
    val = np.where((times > b1 + eps) & (times <= b2 + eps))[0]
    test = np.where((times > b2 + eps) & (times <= b3 + eps))[0]
    if len(train) == 0 or len(val) == 0 or len(test) == 0:
        raise ValueError("a split partition is empty; adjust the fractions")
    return SplitIndices(train, val, test)


def add_noise(reduced: SnapshotMatrix, spl: SplitIndices, delta_pct: float,
              seed) -> SnapshotMatrix:
    """Corrupt the train and validation partitions with i.i.d. Gaussian noise.

    The noise standard deviation is (delta_pct / 100) * sigma_q, where
    sigma_q is the empirical standard deviation of all clean reduced entries
    over the training window (one scalar). The test partition stays clean.
    delta_pct = 0 returns the input unchanged, bit-exactly.
    """
    if delta_pct < 0:
        raise ValueError("delta_pct must be >= 0")
    if delta_pct == 0:
        return reduced
    sigma_q = float(np.std(reduced.states[:, spl.train]))
    rng = np.random.default_rng(seed)
    noisy = reduced.states.copy()
    cols = np.concatenate([spl.train, spl.val])
    noisy[:, cols] += rng.normal(0.0, delta_pct / 100.0 * sigma_q,
                                 size=(reduced.n, cols.size))
    return SnapshotMatrix(noisy, reduced.times)


def rse(pred: np.ndarray, truth: np.ndarray) -> float:
    """Relative state error: Frobenius-norm misfit over the window."""
    pred = np.asarray(pred, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {truth.shape}")
    denom = np.linalg.norm(truth)
    if denom == 0.0:
        raise ValueError("reference trajectory is identically zero")
    return float(np.linalg.norm(truth - pred) / denom)


def make_synthetic_fom(n: int = 16, m: int = 0, seed: int = 0,
                       linear_scale: float = 0.4,
                       quadratic_scale: float = 0.25):
    """Random stable quadratic full-order system plus an initial state."""
    rng = np.random.default_rng(seed)
    A = -0.8 * np.eye(n) + linear_scale / np.sqrt(n) * rng.standard_normal((n, n))
    H3 = quadratic_scale / n * rng.standard_normal((n, n, n))
    H3 = (H3 + H3.transpose(0, 2, 1)) / 2.0
    C = 0.1 * rng.standard_normal(n)
    B = rng.standard_normal((n, m)) if m else np.zeros((n, 0))
    ops = QuadraticFomOperators(C, A, H3.reshape(n, n * n), B)
    u0 = rng.standard_normal(n) / np.sqrt(n)
    return ops, u0


def generate_snapshots(cfg: ExperimentConfig) -> SnapshotMatrix:
    """Generate full-order snapshots for the cell's PDE and parameters."""
    params = dict(cfg.pde_params)
    if cfg.pde == "burgers":
        return solve_burgers(BurgersConfig(**params))
    if cfg.pde == "fkpp":
        return solve_fisher_kpp(FkppConfig(**params))
    if cfg.pde == "ade":
        return solve_ade(AdeConfig(**params))
    n = int(params.pop("n", 16))
    horizon = float(params.pop("horizon_T", 1.0))
    n_samples = int(params.pop("n_samples", 501))
    seed = int(params.pop("seed", cfg.seed))
    ops, u0 = make_synthetic_fom(n, seed=seed, **params)
    times = np.linspace(0.0, horizon, n_samples)
    return simulate_synthetic_fom(ops, u0, None, times)


def _prepare_reduced_data(cfg: ExperimentConfig, snap: SnapshotMatrix,
                          spl: SplitIndices, r_max: int):
    """Basis from the training window, reduced coordinates for all columns.

    Returns (basis, clean reduced matrix, observed reduced matrix or None).
    In the default protocol the basis comes from clean training snapshots
    and noise is injected per r later; with pod_on_noisy the full-order
    train/val snapshots are corrupted first (noise scale from the full-state
    training standard deviation) and the basis absorbs the noise.
    """
    if cfg.pod_on_noisy:
        sigma_u = float(np.std(snap.states[:, spl.train]))
        rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 977)))
        states = snap.states.copy()
        cols = np.concatenate([spl.train, spl.val])
        states[:, cols] += rng.normal(0.0, cfg.noise_pct / 100.0 * sigma_u,
                                      size=(snap.n, cols.size))
        noisy_full = SnapshotMatrix(states, snap.times)
        basis = compute_pod(SnapshotMatrix(noisy_full.states[:, spl.train],
                                           snap.times[spl.train]), r=r_max)
        return basis, project(basis, snap), project(basis, noisy_full)
    basis = compute_pod(SnapshotMatrix(snap.states[:, spl.train],
                                       snap.times[spl.train]), r=r_max)
    return basis, project(basis, snap), None


def _rollout_rse(theta: RomParams, q0: np.ndarray, times: np.ndarray,
                 truth: np.ndarray, tc: TrainConfig) -> float:
    traj = integrate_forward(theta, q0, None,
                             (float(times[0]), float(times[-1])),
                             rtol=tc.rtol, atol=tc.atol, max_steps=tc.max_steps)
    return rse(traj.evaluate(times), truth)


def run_cell(cfg: ExperimentConfig,
             snapshots: SnapshotMatrix | None = None) -> list[ResultRecord]:
    """Execute one study cell and return a record per (method, r).

    Pipeline per r: POD basis from the clean training snapshots -> project ->
    noise injection on train/validation -> derivative-regression grid search
    -> (for the adjoint method) mode-weight estimation, ridge grid search,
    and training -> roll-out from the clean test initial state -> relative
    state error. Numerical failures are captured in the record's divergence
    flag; they never abort the sweep.
    """
    snap = snapshots if snapshots is not None else generate_snapshots(cfg)
    if cfg.snapshot_count is not None:
        snap = subsample(snap, cfg.snapshot_count)
    spl = split(snap.times, cfg.fractions)
    if len(spl.val) < 2 or len(spl.test) < 2:
        raise ValueError("validation and test windows need >= 2 snapshots "
                         "for roll-out scoring")
    r_max = max(cfg.r_values)
    tc = cfg.train_config

    try:
        prepared = _prepare_reduced_data(cfg, snap, spl, r_max)
    except _NUMERICAL_FAILURES:
        # Basis construction failed (e.g. snapshot rank below r_max):
        # every cell still gets a flagged record.
        return [ResultRecord(pde=cfg.pde, method=method, r=r,
                             noise_pct=cfg.noise_pct, samples=snap.k,
                             val_rse=np.inf, test_rse=np.inf, diverged=True,
                             wall_ms=0.0, hyperparams={}, seed=cfg.seed)
                for r in cfg.r_values for method in cfg.methods]
    basis, clean_all, observed_all = prepared
    records: list[ResultRecord] = []
    for r in cfg.r_values:
        clean_r = SnapshotMatrix(clean_all.states[:r], clean_all.times)
        if cfg.pod_on_noisy:
            noisy_r = SnapshotMatrix(observed_all.states[:r], observed_all.times)
        else:
            noise_seed = np.random.SeedSequence((cfg.seed, r))
            noisy_r = add_noise(clean_r, spl, cfg.noise_pct, noise_seed)

        train_snap = SnapshotMatrix(noisy_r.states[:, spl.train],
                                    snap.times[spl.train])
        val_snap = SnapshotMatrix(noisy_r.states[:, spl.val],
                                  snap.times[spl.val])
        test_truth = clean_r.states[:, spl.test]
        test_times = snap.times[spl.test]
        test_q0 = test_truth[:, 0]

        for method in cfg.methods:
            t_start = time.perf_counter()
            val_rse = np.inf
            test_rse = np.inf
            diverged = False
            hyper: dict = {}
            try:
                if method in ("opinf-ord2", "opinf-ord6"):
                    order = 2 if method.endswith("2") else 6
                    grids = replace(cfg.opinf_grids, stencil_orders=(order,))
                    theta, hp, val_rse = opinf.grid_search(
                        train_snap, val_snap, grids,
                        rtol=tc.rtol, atol=tc.atol, max_steps=tc.max_steps)
                    hyper = hp.as_dict()
                else:
                    theta0, hp0, _ = opinf.grid_search(
                        train_snap, val_snap, cfg.opinf_grids,
                        rtol=tc.rtol, atol=tc.atol, max_steps=tc.max_steps)
                    weights = adjoint.estimate_mode_weights(
                        train_snap, basis.singular_values,
                        p=cfg.weight_exponent, tau=cfg.weight_floor)
                    obs_train = ObservedTrajectory.from_snapshots(train_snap)
                    obs_val = ObservedTrajectory.from_snapshots(val_snap)
                    theta, ridge = adjoint.ridge_grid_search(
                        theta0, obs_train, obs_val, weights, tc)
                    hyper = hp0.as_dict() | {"theta_ridge": ridge}
                    val_rse = _rollout_rse(theta, val_snap.states[:, 0],
                                           val_snap.times, val_snap.states, tc)
                test_rse = _rollout_rse(theta, test_q0, test_times,
                                        test_truth, tc)
            except _NUMERICAL_FAILURES:
                diverged = True
            if not np.isfinite(test_rse):
                diverged = True
            wall_ms = (time.perf_counter() - t_start) * 1e3
            records.append(ResultRecord(
                pde=cfg.pde, method=method, r=r, noise_pct=cfg.noise_pct,
                samples=snap.k, val_rse=float(val_rse),
                test_rse=float(test_rse), diverged=diverged,
                wall_ms=wall_ms, hyperparams=hyper, seed=cfg.seed))
    return records


def run_cells(configs, workers: int = 1) -> list[ResultRecord]:
    """Run independent cells, optionally on a bounded process pool.

    Results are concatenated in the order the configs were given, so the
    output is deterministic regardless of worker count.
    """
    configs = list(configs)
    if workers <= 1 or len(configs) <= 1:
        groups = [run_cell(c) for c in configs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            groups = list(pool.map(run_cell, configs))
    return [rec for group in groups for rec in group]


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_results_csv(records, path) -> None:
    """Emit one CSV row per record with the fixed sweep schema."""
    lines = [",".join(CSV_HEADER)]
    for rec in records:
        hyper = json.dumps(rec.hyperparams, sort_keys=True).replace('"', "'")
        row = (rec.pde, rec.method, rec.r, rec.noise_pct, rec.samples,
               rec.val_rse, rec.test_rse, rec.diverged, rec.wall_ms,
               f'"{hyper}"')
        lines.append(",".join(_fmt(v) for v in row))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
