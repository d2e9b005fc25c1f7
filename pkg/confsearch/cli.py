import argparse
import logging
import math
from dataclasses import replace
from datetime import datetime
from pathlib import Path

from confsearch.config import INITIAL_CONFORMATIONS, ExperimentConfig, Method, PtmcConfig
from confsearch.energy import EnergyModel
from confsearch.harness import (
    MIN_PROPOSALS_PER_TORSION,
    generate_reference,
    reference_path_for,
    run_experiment,
    sweep_neighbourhood_size,
    write_reference,
)
from confsearch.molmodel import generate_alkane, generate_star, load_molecule, write_molecule

logger = logging.getLogger("confsearch")

FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"


def configure_logging(verbose: bool = False) -> None:
    logger.setLevel(logging.DEBUG if verbose else logging.INFO)
    console_handler = logging.StreamHandler()
    console_handler.setFormatter(logging.Formatter(FORMAT))
    logger.addHandler(console_handler)


def attach_log_file(log_dir: Path) -> None:
    log_dir.mkdir(parents=True, exist_ok=True)
    file_handler = logging.FileHandler(log_dir / "confsearch.log", mode="a")
    file_handler.setFormatter(logging.Formatter(FORMAT))
    logger.addHandler(file_handler)


def _add_ptmc_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--sweeps", type=int, help="PTMC sweeps.")
    parser.add_argument("--replicas", type=int, help="PTMC replicas.")
    parser.add_argument("--tmin", type=float, help="Coldest PTMC temperature [kcal/mol].")
    parser.add_argument("--tmax", type=float, help="Hottest PTMC temperature [kcal/mol].")


def _add_run_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("molecule", help="Molecule-spec file.")
    parser.add_argument("-c", "--config", help="YAML experiment config; flags override its values.")
    parser.add_argument("-o", "--output", help="Results directory.")
    parser.add_argument("--method", choices=[m.value for m in Method] + ["ls_vnd"])
    parser.add_argument("--solver", choices=["exact", "brute", "sa", "remote"])
    parser.add_argument("--d", type=int, help="Torsion levels.")
    parser.add_argument("--s", type=int, help="Neighbourhood budget.")
    parser.add_argument("--max-iters", type=int)
    parser.add_argument("--max-no-improve", type=int)
    parser.add_argument("--penalty", help="'auto' or a fixed penalty [kcal/mol].")
    parser.add_argument("--initial", choices=list(INITIAL_CONFORMATIONS), help="Starting conformation of each run.")
    parser.add_argument("--runs", type=int)
    parser.add_argument("--seed", type=int, help="Base seed; run k uses seed + k.")
    parser.add_argument("--reference", help="Reference JSON file.")
    parser.add_argument("--remote-url", help="Endpoint of the remote solver.")
    parser.add_argument("--sa-reads", type=int, help="Simulated-annealing reads.")
    parser.add_argument("--workers", type=int, help="Worker processes (default: CONFSEARCH_WORKERS or CPU count).")
    _add_ptmc_flags(parser)


def build_experiment_config(args: argparse.Namespace) -> ExperimentConfig:
    if args.config:
        cfg = ExperimentConfig.from_yaml(Path(args.config))
        cfg = replace(cfg, molecule=Path(args.molecule))
    else:
        cfg = ExperimentConfig(molecule=Path(args.molecule))

    search = cfg.search
    solver = dict(search.solver)
    if args.solver:
        solver = {"type": args.solver}
    if args.remote_url:
        solver = {"type": "remote", "endpoint": args.remote_url, **{k: v for k, v in solver.items() if k == "timeout"}}
    if args.sa_reads is not None and solver["type"] == "sa":
        solver["reads"] = args.sa_reads
    if solver["type"] == "remote" and "endpoint" not in solver:
        raise ValueError("the remote solver needs --remote-url")

    overrides = {
        "d": args.d,
        "s": args.s,
        "max_iters": args.max_iters,
        "max_no_improve": args.max_no_improve,
        "penalty": args.penalty if args.penalty in (None, "auto") else float(args.penalty),
        "initial": args.initial,
    }
    search = replace(search, solver=solver, **{k: v for k, v in overrides.items() if v is not None})

    ptmc_overrides = {"sweeps": args.sweeps, "replicas": args.replicas, "t_min": args.tmin, "t_max": args.tmax}
    if args.d is not None:
        ptmc_overrides["d"] = args.d
    ptmc = replace(cfg.ptmc, **{k: v for k, v in ptmc_overrides.items() if v is not None})

    top = {
        "method": Method(args.method) if args.method else None,
        "runs": args.runs,
        "seed": args.seed,
        "reference": Path(args.reference) if args.reference else None,
        "output": Path(args.output) if args.output else None,
        "workers": args.workers,
    }
    return replace(cfg, search=search, ptmc=ptmc, **{k: v for k, v in top.items() if v is not None})


def cmd_reference(args: argparse.Namespace) -> None:
    spec = load_molecule(Path(args.molecule))
    params = {"sweeps": args.sweeps, "replicas": args.replicas, "t_min": args.tmin, "t_max": args.tmax}
    params.update({"d": args.d, "seed": args.seed})
    cfg = PtmcConfig(**{k: v for k, v in params.items() if v is not None})
    if args.sweeps is None:
        cfg = replace(cfg, sweeps=max(cfg.sweeps, math.ceil(args.min_proposals / cfg.replicas)))
    model = EnergyModel(spec, scale_14=args.scale_14)
    record = generate_reference(model, cfg, method=args.method, min_proposals_per_torsion=args.min_proposals)
    output = Path(args.output) if args.output else reference_path_for(Path(args.molecule))
    write_reference(record, output)
    logger.info("Reference written to %s", output)


def cmd_run(args: argparse.Namespace) -> None:
    cfg = build_experiment_config(args)
    attach_log_file(cfg.output)
    metrics, _ = run_experiment(cfg)
    print(metrics.to_row())


def cmd_sweep(args: argparse.Namespace) -> None:
    cfg = build_experiment_config(args)
    attach_log_file(cfg.output)
    sizes = [int(s) for s in args.sizes.split(",") if s.strip()]
    table = sweep_neighbourhood_size(cfg, sizes)
    print(table.to_string(index=False))


def cmd_alkane(args: argparse.Namespace) -> None:
    spec = generate_alkane(args.carbons)
    write_molecule(spec, Path(args.output))
    logger.info("Wrote %s (%d atoms, %d torsions) to %s", spec.name, spec.n_atoms, spec.n_torsions, args.output)


def cmd_star(args: argparse.Namespace) -> None:
    spec = generate_star(n_arms=args.arms, arm_carbons=args.arm_carbons)
    write_molecule(spec, Path(args.output))
    logger.info("Wrote %s (%d atoms, %d torsions) to %s", spec.name, spec.n_atoms, spec.n_torsions, args.output)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="confsearch", description="Conformational search over discretized torsions with QUBO-based VND."
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="Log every search iteration.")
    commands = parser.add_subparsers(dest="command", required=True)

    reference = commands.add_parser("reference", help="Generate the reference conformation of a molecule.")
    reference.add_argument("molecule", help="Molecule-spec file.")
    reference.add_argument("-o", "--output", help="Reference JSON (default: next to the molecule).")
    reference.add_argument("--method", choices=["ptmc", "grid"], default="ptmc")
    reference.add_argument("--d", type=int, help="Torsion levels.")
    reference.add_argument("--seed", type=int)
    reference.add_argument("--scale-14", type=float, default=1.0)
    reference.add_argument("--min-proposals", type=int, default=MIN_PROPOSALS_PER_TORSION)
    _add_ptmc_flags(reference)
    reference.set_defaults(func=cmd_reference)

    run = commands.add_parser("run", help="Run a batch of seeded searches and aggregate metrics.")
    _add_run_flags(run)
    run.set_defaults(func=cmd_run)

    sweep = commands.add_parser("sweep-s", help="Repeat an experiment over neighbourhood budgets.")
    _add_run_flags(sweep)
    sweep.add_argument("--sizes", default="30,60,90,120", help="Comma-separated budgets.")
    sweep.set_defaults(func=cmd_sweep)

    alkane = commands.add_parser("alkane", help="Write an idealized all-anti n-alkane.")
    alkane.add_argument("--carbons", type=int, required=True)
    alkane.add_argument("-o", "--output", required=True)
    alkane.set_defaults(func=cmd_alkane)

    star = commands.add_parser("star", help="Write a hub carbon with alkyl arms.")
    star.add_argument("--arms", type=int, default=4)
    star.add_argument("--arm-carbons", type=int, default=3)
    star.add_argument("-o", "--output", required=True)
    star.set_defaults(func=cmd_star)

    return parser


def main(argv: list[str] | None = None) -> None:
    args = build_parser().parse_args(argv)
    configure_logging(verbose=args.verbose)

    start_time = datetime.now()
    args.func(args)
    logger.info(f"Finished! Took {datetime.now() - start_time}")


if __name__ == "__main__":
    main()
