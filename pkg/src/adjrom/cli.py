"""Command-line interface: snapshot generation, training, sweeps, evaluation.

Exit codes: 0 on success, 1 on configuration errors (unknown flags, invalid
config files), 2 on numerical failures (divergence, no convergent candidate).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from adjrom import adjoint, harness, io, opinf
from adjrom.adjoint import ObservedTrajectory
from adjrom.fom import SnapshotMatrix
from adjrom.harness import ExperimentConfig
from adjrom.pod import compute_pod, project
from adjrom.rom import IntegrationDiverged, RomParams, integrate_forward

__all__ = ["cli", "main"]


class _ConfigError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # Spec'd contract: bad flags print usage and exit with code 1.
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _load_json(path) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise _ConfigError(f"cannot read config {path}: {exc}")


def _build_parser() -> _Parser:
    parser = _Parser(prog="adjrom")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("generate-fom", parents=[], add_help=True)
    gen.add_argument("--pde", required=True,
                     choices=("burgers", "fkpp", "ade", "synthetic"))
    gen.add_argument("--out", required=True)
    gen.add_argument("--config", help="JSON file of PDE parameters")
    gen.add_argument("--seed", type=int, default=0)

    tr = sub.add_parser("train")
    tr.add_argument("--snapshots", required=True)
    tr.add_argument("--config", required=True,
                    help="JSON study-cell config with a single r value")
    tr.add_argument("--out-dir", default=".")
    tr.add_argument("--seed", type=int)

    sw = sub.add_parser("sweep")
    sw.add_argument("--config", required=True,
                    help="JSON study-cell config, or {'cells': [...]}")
    sw.add_argument("--out-dir", default=".")
    sw.add_argument("--workers", type=int, default=1)
    sw.add_argument("--seed", type=int)

    ev = sub.add_parser("evaluate")
    ev.add_argument("--params", required=True)
    ev.add_argument("--snapshots", required=True)
    ev.add_argument("--basis", help="optional basis container for projection")
    return parser


def _cell_config(data: dict, seed: int | None) -> ExperimentConfig:
    try:
        cfg = ExperimentConfig.from_dict(data)
    except (TypeError, ValueError) as exc:
        raise _ConfigError(f"invalid cell config: {exc}")
    if seed is not None:
        cfg = ExperimentConfig.from_dict({**data, "seed": seed})
    return cfg


def _cmd_generate(args) -> int:
    params = _load_json(args.config) if args.config else {}
    cfg = ExperimentConfig(pde=args.pde, pde_params=params, seed=args.seed,
                           methods=("opinf-ord2",))
    try:
        snap = harness.generate_snapshots(cfg)
    except (TypeError, ValueError) as exc:
        raise _ConfigError(str(exc))
    io.write_snapshots(args.out, snap,
                       meta={"pde": args.pde, "params": params,
                             "seed": args.seed})
    print(f"wrote {snap.n} x {snap.k} snapshots to {args.out}")
    return 0


def _cmd_train(args) -> int:
    data = _load_json(args.config)
    cfg = _cell_config(data, args.seed)
    if len(cfg.r_values) != 1:
        raise _ConfigError("train expects exactly one entry in r_values")
    r = cfg.r_values[0]
    snap = io.read_snapshots(args.snapshots)
    if cfg.snapshot_count is not None:
        snap = harness.subsample(snap, cfg.snapshot_count)
    spl = harness.split(snap.times, cfg.fractions)
    basis = compute_pod(SnapshotMatrix(snap.states[:, spl.train],
                                       snap.times[spl.train]), r=r)
    reduced = project(basis, snap)
    noisy = harness.add_noise(reduced, spl, cfg.noise_pct,
                              np.random.SeedSequence((cfg.seed, r)))
    train_snap = SnapshotMatrix(noisy.states[:, spl.train], snap.times[spl.train])
    val_snap = SnapshotMatrix(noisy.states[:, spl.val], snap.times[spl.val])

    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    tc = cfg.train_config
    theta0, hp0, _ = opinf.grid_search(train_snap, val_snap, cfg.opinf_grids,
                                       rtol=tc.rtol, atol=tc.atol,
                                       max_steps=tc.max_steps)
    weights = adjoint.estimate_mode_weights(train_snap, basis.singular_values,
                                            p=cfg.weight_exponent,
                                            tau=cfg.weight_floor)
    log_path = out_dir / "train_log.jsonl"
    with open(log_path, "w") as log_fh:
        def log_cb(record: dict) -> None:
            log_fh.write(json.dumps(record, sort_keys=True,
                                    default=float) + "\n")

        theta, ridge = adjoint.ridge_grid_search(
            theta0, ObservedTrajectory.from_snapshots(train_snap),
            ObservedTrajectory.from_snapshots(val_snap), weights, tc,
            log_cb=log_cb)
    theta_path = out_dir / "theta.json"
    theta.save(theta_path,
               extra={"hyperparams": hp0.as_dict() | {"theta_ridge": ridge},
                      "mode_weights": weights.diagonal.tolist(),
                      "savgol_noise_variances": weights.noise_variances.tolist()})
    print(f"wrote {theta_path} and {log_path}")
    return 0


def _cmd_sweep(args) -> int:
    data = _load_json(args.config)
    cell_dicts = data["cells"] if isinstance(data, dict) and "cells" in data \
        else [data]
    cfgs = [_cell_config(d, args.seed) for d in cell_dicts]
    records = harness.run_cells(cfgs, workers=args.workers)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    out_path = out_dir / "results.csv"
    harness.write_results_csv(records, out_path)
    print(f"wrote {len(records)} records to {out_path}")
    return 0


def _cmd_evaluate(args) -> int:
    theta = RomParams.load(args.params)
    snap = io.read_snapshots(args.snapshots)
    if args.basis:
        basis = io.read_basis(args.basis)
        snap = project(basis, snap)
    if snap.n != theta.r:
        raise _ConfigError(
            f"snapshot rows ({snap.n}) do not match the model dimension "
            f"({theta.r}); pass --basis to project first")
    # scoring-duty roll-out: integration error well below reportable RSEs
    traj = integrate_forward(theta, snap.states[:, 0], None,
                             (float(snap.times[0]), float(snap.times[-1])),
                             rtol=1e-9, atol=1e-12)
    score = harness.rse(traj.evaluate(snap.times), snap.states)
    print(f"rse={score!r}")
    return 0


def cli(argv=None) -> int:
    """Run the CLI; returns the process exit code."""
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    commands = {"generate-fom": _cmd_generate, "train": _cmd_train,
                "sweep": _cmd_sweep, "evaluate": _cmd_evaluate}
    try:
        return commands[args.command](args)
    except _ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (IntegrationDiverged, RuntimeError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(cli())
