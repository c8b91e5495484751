"""Operator entry point: manifold fitting, training, inference, evaluation,
and the selfcheck gate.

Exit codes: 0 ok, 1 check failure, 2 usage/input error, 3 numerical failure.
Every command writes a manifest.json into its run directory (command, config
snapshot, seed, content hashes of inputs, output paths, timestamps); the
manifest timestamps are the only output bytes that vary between reruns.
"""

from __future__ import annotations

import argparse
import datetime
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .biasnet import BiasNetwork, TargetSpec
from .checkpoint import CheckpointError, load_tensors
from .dynamics import SystemState, write_trajectory_csv
from .energy import EnergyError, fit_rbf_manifold, load_potential, read_point_cloud
from .kernels import pairwise_sq_dists
from .metrics import MetricsConfig, MetricsError, evaluate_report
from .selfcheck import run_all
from .trainer import ConfigError, TrainConfig, TrainError, infer, load_config, train

EXIT_OK = 0
EXIT_CHECK = 1
EXIT_USAGE = 2
EXIT_NUMERICAL = 3


class _Lock:
    def __init__(self, directory: Path):
        self.path = directory / ".lock"

    def __enter__(self):
        try:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.fd = self.path.open("x")
        except FileExistsError:
            raise ConfigError(f"run directory {self.path.parent} is locked by another run")
        return self

    def __exit__(self, *exc):
        self.fd.close()
        self.path.unlink(missing_ok=True)


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_manifest(directory: Path, command: str, config: dict, seed: int,
                    inputs: list[Path], outputs: list[str],
                    started: str) -> None:
    manifest = {
        "command": command,
        "config": config,
        "seed": seed,
        "input_hashes": {str(p): _sha256(Path(p)) for p in inputs if Path(p).is_file()},
        "outputs": sorted(outputs),
        "started_at": started,
        "finished_at": _now(),
        "version": __version__,
    }
    (directory / "manifest.json").write_text(
        json.dumps(manifest, sort_keys=True, indent=2) + "\n")


def _now() -> str:
    return datetime.datetime.now(datetime.timezone.utc).isoformat()


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_fit_manifold(args) -> int:
    started = _now()
    data_path = Path(args.data)
    if not data_path.is_file():
        print(f"error: data file not found: {data_path}", file=sys.stderr)
        return EXIT_USAGE
    out_dir = Path(args.out)
    with _Lock(out_dir):
        try:
            data = read_point_cloud(data_path)
        except EnergyError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_USAGE
        try:
            manifold = fit_rbf_manifold(data, n_centroids=args.nc, kappa=args.kappa,
                                        seed=args.seed)
        except EnergyError as exc:
            print(f"fit failure: {exc}", file=sys.stderr)
            return EXIT_NUMERICAL
        ckpt = out_dir / "manifold.bin"
        manifold.save(ckpt)
        report = {
            "fit_residual": manifold.fit_residual,
            "n_centroids": args.nc,
            "kappa": args.kappa,
            "n_points": int(data.shape[0]),
            "dim": int(data.shape[1]),
        }
        (out_dir / "fit_report.json").write_text(
            json.dumps(report, sort_keys=True, indent=2) + "\n")
        _write_manifest(out_dir, "fit-manifold",
                        {"data": str(data_path), "nc": args.nc, "kappa": args.kappa},
                        args.seed, [data_path],
                        [str(ckpt), str(ckpt.with_suffix(".json")),
                         str(out_dir / "fit_report.json")], started)
    print(f"fit residual {manifold.fit_residual:.3e} -> {ckpt}")
    return EXIT_OK


def cmd_train(args) -> int:
    started = _now()
    config_path = Path(args.config)
    if not config_path.is_file():
        print(f"error: config file not found: {config_path}", file=sys.stderr)
        return EXIT_USAGE
    overrides = {}
    for item in args.set or []:
        if "=" not in item:
            print(f"error: --set expects key=value, got {item!r}", file=sys.stderr)
            return EXIT_USAGE
        key, value = item.split("=", 1)
        overrides[key.strip()] = value.strip()
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    config = load_config(config_path, overrides)
    out_dir = Path(args.out)
    with _Lock(out_dir):
        report = train(config, out_dir, base_dir=config_path.parent)
        (out_dir / "config.txt").write_text(config.to_text())
        loss_csv = out_dir / "loss.csv"
        with open(loss_csv, "w") as fh:
            fh.write("rollout,loss,mean_reward\n")
            for i, (lo, re) in enumerate(zip(report.loss_curve, report.reward_curve)):
                fh.write(f"{i},{lo!r},{re!r}\n")
        inputs = [config_path]
        if Path(config.potential).is_file():
            inputs.append(Path(config.potential))
        for src in (config.init_source, config.target_source):
            if not src.startswith("point:"):
                inputs.append(Path(src))
        _write_manifest(out_dir, "train", config.to_dict(), config.seed, inputs,
                        [report.checkpoint_path, str(loss_csv),
                         str(out_dir / "config.txt")], started)
    print(f"trained {config.n_rollouts} rollouts in {report.wall_time:.1f}s "
          f"-> {report.checkpoint_path}")
    return EXIT_OK


def _clusters_from_cloud(cloud: np.ndarray, n: int, m: int,
                         rng: np.random.Generator) -> list[np.ndarray]:
    if cloud.shape[0] == n:
        return [cloud.copy() for _ in range(m)]
    out = []
    for _ in range(m):
        anchor = int(rng.integers(cloud.shape[0]))
        d2 = pairwise_sq_dists(cloud[anchor:anchor + 1], cloud)[0]
        out.append(cloud[np.argsort(d2, kind="stable")[:n]])
    return out


def cmd_simulate(args) -> int:
    started = _now()
    ckpt_path = Path(args.checkpoint)
    for p in (ckpt_path, Path(args.init), Path(args.target)):
        if not p.is_file():
            print(f"error: file not found: {p}", file=sys.stderr)
            return EXIT_USAGE
    net, meta = BiasNetwork.load(ckpt_path)
    cfg_dict = meta.get("train_config")
    if cfg_dict is None:
        print("error: checkpoint sidecar has no embedded train config", file=sys.stderr)
        return EXIT_USAGE
    config = TrainConfig(**cfg_dict)
    if args.seed is not None:
        config.seed = args.seed
    m = args.samples if args.samples is not None else config.n_samples

    init_cloud = read_point_cloud(args.init)
    target_cloud = read_point_cloud(args.target)
    if init_cloud.shape[1] != net.dim or target_cloud.shape[1] != net.dim:
        print(f"error: checkpoint dimension {net.dim} does not match input clouds",
              file=sys.stderr)
        return EXIT_USAGE
    if init_cloud.shape[0] < config.n_particles or target_cloud.shape[0] < config.n_particles:
        print(f"error: clouds must have at least n_particles={config.n_particles} rows",
              file=sys.stderr)
        return EXIT_USAGE

    out_dir = Path(args.out)
    with _Lock(out_dir):
        potential = load_potential(config.potential)
        rng = np.random.default_rng(config.seed)
        n = config.n_particles
        init_clusters = _clusters_from_cloud(init_cloud, n, m, rng)
        target_clusters = _clusters_from_cloud(target_cloud, n, m, rng)
        states, targets = [], []
        for r0, rb in zip(init_clusters, target_clusters):
            if config.mode == "underdamped":
                v0 = rng.normal(0.0, np.sqrt(config.k_b * config.tau_start / config.mass),
                                (n, net.dim))
            else:
                v0 = np.zeros((n, net.dim))
            states.append(SystemState(r0, v0))
            targets.append(TargetSpec(rb, config.sigma))
        trajs = infer(net, states, targets, config.dynamics_params(), potential,
                      seed=config.seed + 1)
        outputs = []
        for i, traj in enumerate(trajs):
            path = out_dir / f"traj_{i:03d}.csv"
            write_trajectory_csv(traj, path)
            outputs.append(str(path))
        endpoints = out_dir / "endpoints.csv"
        with open(endpoints, "w") as fh:
            fh.write(",".join(f"x{j}" for j in range(net.dim)) + "\n")
            for traj in trajs:
                for row in traj.endpoint:
                    fh.write(",".join(repr(float(v)) for v in row) + "\n")
        targets_csv = out_dir / "targets.csv"
        with open(targets_csv, "w") as fh:
            fh.write(",".join(f"x{j}" for j in range(net.dim)) + "\n")
            for tgt in targets:
                for row in tgt.positions:
                    fh.write(",".join(repr(float(v)) for v in row) + "\n")
        outputs += [str(endpoints), str(targets_csv)]
        _write_manifest(out_dir, "simulate",
                        {"checkpoint": str(ckpt_path), "init": args.init,
                         "target": args.target, "samples": m},
                        config.seed, [ckpt_path, Path(args.init), Path(args.target)],
                        outputs, started)
    print(f"simulated {m} trajectories -> {out_dir}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    started = _now()
    gen_dir = Path(args.generated)
    ref_path = Path(args.reference)
    if not ref_path.is_file():
        print(f"error: reference file not found: {ref_path}", file=sys.stderr)
        return EXIT_USAGE
    endpoints_csv = gen_dir / "endpoints.csv"
    if endpoints_csv.is_file():
        generated = read_point_cloud(endpoints_csv)
    else:
        traj_files = sorted(gen_dir.glob("traj_*.csv")) if gen_dir.is_dir() else []
        if not traj_files:
            print(f"error: no endpoints.csv or trajectory CSVs in {gen_dir}",
                  file=sys.stderr)
            return EXIT_USAGE
        from .dynamics import read_trajectory_csv
        rows = []
        for tf in traj_files:
            positions, _ = read_trajectory_csv(tf)
            rows.append(positions[-1])
        generated = np.concatenate(rows, axis=0)
    reference = read_point_cloud(ref_path)
    if generated.shape[1] != reference.shape[1]:
        print("error: generated and reference dimensions differ", file=sys.stderr)
        return EXIT_USAGE
    metric_names = [mname.strip() for mname in args.metrics.split(",") if mname.strip()]
    try:
        report = evaluate_report(generated, reference, metric_names,
                                 MetricsConfig(), seed=args.seed, repeats=args.repeats)
    except MetricsError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    out_path = Path(args.out) if args.out else gen_dir / "metrics.json"
    out_path.parent.mkdir(parents=True, exist_ok=True)
    out_path.write_text(json.dumps(report, sort_keys=True, indent=2) + "\n")
    if out_path.parent.is_dir():
        _write_manifest(out_path.parent, "evaluate",
                        {"generated": str(gen_dir), "reference": str(ref_path),
                         "metrics": metric_names, "repeats": args.repeats},
                        args.seed, [ref_path], [str(out_path)], started)
    for name in metric_names:
        entry = report[name]
        print(f"{name}: {entry['mean']:.6f} +/- {entry['std']:.6f}")
    return EXIT_OK


def cmd_selfcheck(args) -> int:
    results = run_all(fast=args.fast, seed=args.seed)
    if args.checkpoint:
        try:
            load_tensors(args.checkpoint)
            results.append(("checkpoint/load", True, "parsed"))
        except (CheckpointError, OSError) as exc:
            results.append(("checkpoint/load", False, str(exc)))
    failed = [name for name, ok, _ in results if not ok]
    for name, ok, detail in results:
        print(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
    if failed:
        print(f"{len(failed)} suite(s) failed: {', '.join(failed)}", file=sys.stderr)
        return EXIT_CHECK
    print(f"all {len(results)} checks passed")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="esbm",
        description="Train and evaluate entangled bias forces for controlled "
                    "Langevin trajectory sampling.",
    )
    parser.add_argument("--version", action="version", version=f"esbm {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit-manifold", help="fit an RBF manifold energy to a point cloud")
    p.add_argument("--data", required=True, help="CSV point cloud")
    p.add_argument("--nc", type=int, required=True, help="number of RBF centroids")
    p.add_argument("--kappa", type=float, required=True, help="bandwidth multiplier")
    p.add_argument("--out", required=True, help="output run directory")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_fit_manifold)

    p = sub.add_parser("train", help="train a bias force")
    p.add_argument("--config", required=True, help="key = value config file")
    p.add_argument("--out", required=True, help="output run directory")
    p.add_argument("--seed", type=int, default=None, help="override config seed")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a config key")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("simulate", help="roll out trajectories from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--init", required=True, help="CSV of initial positions")
    p.add_argument("--target", required=True, help="CSV of target positions")
    p.add_argument("--out", required=True, help="output run directory")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--samples", type=int, default=None, help="number of trajectories")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("evaluate", help="distribution metrics for generated endpoints")
    p.add_argument("--generated", required=True, help="simulate output directory")
    p.add_argument("--reference", required=True, help="CSV reference cloud")
    p.add_argument("--metrics", default="mmd,w1,w2")
    p.add_argument("--out", default=None, help="metrics JSON path")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--repeats", type=int, default=5)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("selfcheck", help="run the built-in consistency suites")
    p.add_argument("--fast", action="store_true", help="reduced draw counts")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--checkpoint", default=None, help="also validate this checkpoint file")
    p.set_defaults(func=cmd_selfcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (CheckpointError, EnergyError, MetricsError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
