import hashlib
import json
import math
import multiprocessing as mp
import os
import time
from dataclasses import dataclass, replace
from datetime import datetime, timezone
from logging import getLogger
from pathlib import Path
from typing import Any, Self

import numpy as np
import pandas as pd

import confsearch
from confsearch.config import ExperimentConfig, Method, PtmcConfig
from confsearch.energy import EnergyModel, EvalCounter
from confsearch.errors import ConfigurationError
from confsearch.molmodel import MoleculeSpec, load_molecule
from confsearch.search import RunResult, grid_minimum, local_search, ls_vnd, ptmc, vnd

logger = getLogger(__name__)

MIN_PROPOSALS_PER_TORSION = int(1e5)
GRID_REFERENCE_LIMIT = 4096
ATOM_COUNT_CONVENTION = "all atoms, hydrogens included"
LS_COUNTING_CONVENTION = "one full-molecule evaluation per scanned level"


class ReferenceMismatchError(ValueError):
    pass


@dataclass
class ReferenceRecord:
    """
    Best known conformation of a molecule, used as the target of an experiment.

    :param t: Torsion vector [degrees].
    :param energy: Energy of ``t`` [kcal/mol].
    :param n_atoms: Atom count of the molecule it was generated for.
    :param n_torsions: Torsion count of the molecule it was generated for.
    :param provenance: Generation method and parameters.
    """

    t: tuple[float, ...]
    energy: float
    n_atoms: int
    n_torsions: int
    molecule: str = ""
    provenance: dict[str, Any] | None = None

    def to_dict(self) -> dict[str, Any]:
        return {
            "t": list(self.t),
            "energy": self.energy,
            "n_atoms": self.n_atoms,
            "n_torsions": self.n_torsions,
            "molecule": self.molecule,
            "provenance": self.provenance or {},
        }

    @staticmethod
    def from_dict(data: dict[str, Any]) -> Self:
        return ReferenceRecord(
            t=tuple(float(x) for x in data["t"]),
            energy=float(data["energy"]),
            n_atoms=int(data["n_atoms"]),
            n_torsions=int(data["n_torsions"]),
            molecule=data.get("molecule", ""),
            provenance=data.get("provenance", {}),
        )


def stable_hash(s: str) -> str:
    """Generate a stable hash for a given string using SHA-256."""
    return hashlib.sha256(s.encode("utf-8")).hexdigest()


def reference_seed(cfg: ExperimentConfig) -> int:
    """Seed of the PTMC reference run, derived from the experiment seed and never equal to a run seed."""
    seed = int(stable_hash(json.dumps({"reference": cfg.seed}))[:16], 16)
    if cfg.seed <= seed < cfg.seed + cfg.runs:
        seed += cfg.runs
    return seed


def reference_path_for(molecule: Path) -> Path:
    molecule = Path(molecule)
    return molecule.with_name(molecule.stem + ".reference.json")


def generate_reference(
    model: EnergyModel,
    cfg: PtmcConfig,
    method: str = "ptmc",
    min_proposals_per_torsion: int = MIN_PROPOSALS_PER_TORSION,
) -> ReferenceRecord:
    """
    Long run to find the reference conformation, with the same energy model as the searches.

    :param model: Energy model of the molecule.
    :param cfg: PTMC settings; ``cfg.d`` also sets the grid for ``method="grid"``.
    :param method: ``"ptmc"`` or ``"grid"`` (exhaustive scan, small molecules only).
    :param min_proposals_per_torsion: Lower bound on ``sweeps * replicas`` for PTMC references.
    """
    start = time.perf_counter()
    counter = EvalCounter()
    spec = model.spec
    provenance: dict[str, Any] = {"method": method, "created": datetime.now(timezone.utc).isoformat()}
    provenance["version"] = confsearch.__version__
    provenance["scale_14"] = model.scale_14

    if model.n_torsions == 0:
        t, energy = np.zeros(0), model.total_energy(np.zeros(0), counter)
        provenance["method"] = "fixed"
    elif method == "grid":
        t, energy = grid_minimum(model, cfg.theta, counter)
        provenance["d"] = cfg.d
    elif method == "ptmc":
        if cfg.sweeps * cfg.replicas < min_proposals_per_torsion:
            raise ValueError(
                f"{cfg.sweeps} sweeps x {cfg.replicas} replicas is below the minimum of "
                f"{min_proposals_per_torsion} proposals per torsion for a reference run"
            )
        logger.info("Generating PTMC reference for %s with %d sweeps", spec.name, cfg.sweeps)
        result = ptmc(model, replace(cfg, target_energy=None), np.random.default_rng(cfg.seed), counter=counter)
        t, energy = np.asarray(result.best_t), result.best_energy
        provenance["ptmc"] = cfg.to_dict()
    else:
        raise ValueError(f"Unknown reference method: {method}")

    provenance["energy_evals"] = counter.count
    provenance["wall_time"] = time.perf_counter() - start
    logger.info("Reference energy of %s: %.6f kcal/mol", spec.name, energy)
    return ReferenceRecord(
        t=tuple(float(x) for x in t),
        energy=float(energy),
        n_atoms=spec.n_atoms,
        n_torsions=spec.n_torsions,
        molecule=spec.name,
        provenance=provenance,
    )


def write_reference(record: ReferenceRecord, path: Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as file:
        json.dump(record.to_dict(), file, indent=4)


def load_reference(path: Path, model: EnergyModel | None = None) -> ReferenceRecord:
    """Read a reference; with a model, check that it belongs to the molecule and re-derive its energy."""
    with open(path, "r") as file:
        record = ReferenceRecord.from_dict(json.load(file))
    if model is not None:
        verify_reference(record, model)
    return record


def verify_reference(record: ReferenceRecord, model: EnergyModel) -> None:
    if record.n_atoms != model.n_atoms or record.n_torsions != model.n_torsions:
        raise ReferenceMismatchError(
            f"reference is for {record.n_atoms} atoms / {record.n_torsions} torsions, "
            f"molecule has {model.n_atoms} atoms / {model.n_torsions} torsions"
        )
    energy = model.total_energy(record.t, EvalCounter())
    if not math.isclose(energy, record.energy, rel_tol=1e-9, abs_tol=1e-9):
        raise ReferenceMismatchError(f"reference energy {record.energy} does not match its torsions ({energy})")


def ensure_reference(cfg: ExperimentConfig, model: EnergyModel) -> ReferenceRecord:
    path = cfg.reference if cfg.reference is not None else reference_path_for(cfg.molecule)
    if Path(path).exists():
        logger.info("Reading reference from %s", path)
        return load_reference(path, model)

    ptmc_cfg = cfg.ptmc
    if ptmc_cfg.d**model.n_torsions <= GRID_REFERENCE_LIMIT:
        record = generate_reference(model, ptmc_cfg, method="grid")
    else:
        sweeps = max(ptmc_cfg.sweeps, math.ceil(MIN_PROPOSALS_PER_TORSION / ptmc_cfg.replicas))
        record = generate_reference(model, replace(ptmc_cfg, sweeps=sweeps, seed=reference_seed(cfg)))
    write_reference(record, path)
    logger.info("Reference written to %s", path)
    return record


def run_single(model: EnergyModel, cfg: ExperimentConfig, seed: int, target: float | None) -> RunResult:
    """One seeded run of ``cfg.method`` with early stop at ``target``."""
    rng = np.random.default_rng(seed)
    if cfg.method is Method.PTMC:
        return ptmc(model, replace(cfg.ptmc, seed=seed, target_energy=target), rng)

    search_cfg = replace(cfg.search, seed=seed, target_energy=target)
    if cfg.method is Method.LS:
        return local_search(model, search_cfg, rng)
    solver = search_cfg.create_solver()
    if cfg.method is Method.VND:
        return vnd(model, search_cfg, solver, rng)
    return ls_vnd(model, search_cfg, solver, rng)


def run_task(
    spec: MoleculeSpec, cfg: ExperimentConfig, run: int, seed: int, target: float | None, reference_energy: float
) -> dict[str, Any]:
    scale_14 = cfg.ptmc.scale_14 if cfg.method is Method.PTMC else cfg.search.scale_14
    model = EnergyModel(spec, scale_14=scale_14, memoize=cfg.search.memoize)
    try:
        result = run_single(model, cfg, seed, target)
    except ConfigurationError as err:
        logger.error("Run %d (seed %d) failed: %s", run, seed, err)
        return {"run": run, "seed": seed, "method": cfg.method.value, "error": f"{err.__class__.__name__}: {err}"}

    record = {"run": run, "seed": seed, **result.to_dict(), "error": None}
    record["residual"] = result.best_energy - reference_energy
    record["success"] = bool(record["residual"] <= cfg.success_threshold)
    logger.info("Run %d (seed %d): %.6f kcal/mol, %s", run, seed, result.best_energy, result.terminated_by.value)
    return record


def _run_task_star(args) -> dict[str, Any]:
    return run_task(*args)


@dataclass
class Metrics:
    """
    Aggregate of one experiment.

    Residuals are in kcal/mol, normalized residuals in kcal/mol per atom and TTS in seconds. ``energy_evals``
    is the mean number of evaluations needed to reach each run's best conformation.
    """

    method: str
    model: str
    runs: int
    errors: int
    success_rate: float
    energy_evals: float
    residual_min: float
    residual_p50: float
    residual_p75: float
    normalized_residual_min: float
    normalized_residual_p50: float
    normalized_residual_p75: float
    tts_min: float
    tts_p50: float
    tts_p75: float

    def to_dict(self) -> dict[str, Any]:
        return dict(self.__dict__)

    def to_row(self) -> dict[str, Any]:
        return {
            "method": self.method,
            "model": self.model,
            "success rate": self.success_rate,
            "num. energy evaluations": self.energy_evals,
            "residual min": self.residual_min,
            "residual 50th": self.residual_p50,
            "residual 75th": self.residual_p75,
            "TTS min": self.tts_min,
            "TTS 50th": self.tts_p50,
            "TTS 75th": self.tts_p75,
        }


def _percentiles(series: pd.Series) -> tuple[float, float, float]:
    if series.empty:
        return math.nan, math.nan, math.nan
    return float(series.min()), float(series.quantile(0.5)), float(series.quantile(0.75))


def compute_metrics(
    records: list[dict[str, Any]],
    reference_energy: float,
    n_atoms: int,
    success_threshold: float = 1.0,
    method: str = "",
    model: str = "",
) -> Metrics:
    """Aggregate per-run records; failed runs count against the success rate and are left out elsewhere."""
    done = pd.DataFrame([r for r in records if r.get("error") is None])
    errors = len(records) - len(done)
    if done.empty:
        residual = tts = evals = pd.Series(dtype=float)
    else:
        residual = done["best_energy"] - reference_energy
        tts = done["time_to_best"]
        evals = done["evals_to_best"]

    successes = int((residual <= success_threshold).sum())
    r_min, r_50, r_75 = _percentiles(residual)
    t_min, t_50, t_75 = _percentiles(tts)
    return Metrics(
        method=method,
        model=model,
        runs=len(records),
        errors=errors,
        success_rate=successes / len(records) if records else 0.0,
        energy_evals=float(evals.mean()) if not evals.empty else math.nan,
        residual_min=r_min,
        residual_p50=r_50,
        residual_p75=r_75,
        normalized_residual_min=r_min / n_atoms,
        normalized_residual_p50=r_50 / n_atoms,
        normalized_residual_p75=r_75 / n_atoms,
        tts_min=t_min,
        tts_p50=t_50,
        tts_p75=t_75,
    )


def resolve_workers(workers: int | None) -> int:
    if workers is not None:
        return max(1, int(workers))
    if "CONFSEARCH_WORKERS" in os.environ:
        value = os.environ["CONFSEARCH_WORKERS"]
        try:
            return max(1, int(value))
        except ValueError:
            raise ConfigurationError(f"CONFSEARCH_WORKERS must be an integer, got {value!r}") from None
    return os.cpu_count() or 1


def store_results(metrics: Metrics, cfg: ExperimentConfig, reference: ReferenceRecord, output_path: Path) -> None:
    conf = cfg.to_dict()
    config_str = json.dumps(conf, sort_keys=True)
    output_path.mkdir(exist_ok=True, parents=True)

    with open(output_path / "config.json", "w") as file:
        json.dump(conf, file, indent=4)

    pd.DataFrame([metrics.to_row()]).to_csv(output_path / "metrics.csv", index=False)

    provenance = {
        "config": conf,
        "config_hash": stable_hash(config_str),
        "reference": reference.to_dict(),
        "atom_count": ATOM_COUNT_CONVENTION,
        "ls_energy_evals": LS_COUNTING_CONVENTION,
        "version": confsearch.__version__,
        "created": datetime.now(timezone.utc).isoformat(),
    }
    with open(output_path / "metrics.json", "w") as file:
        json.dump({"metrics": metrics.to_dict(), "provenance": provenance}, file, indent=4)


def run_experiment(cfg: ExperimentConfig) -> tuple[Metrics, list[dict[str, Any]]]:
    """
    Run ``cfg.runs`` seeded runs and aggregate them.

    Records stream to ``runs.jsonl`` in the output directory as they complete; ``metrics.csv``,
    ``metrics.json`` and ``config.json`` are written at the end.
    """
    spec = load_molecule(cfg.molecule)
    scale_14 = cfg.ptmc.scale_14 if cfg.method is Method.PTMC else cfg.search.scale_14
    model = EnergyModel(spec, scale_14=scale_14)
    reference = ensure_reference(cfg, model)
    target = reference.energy + cfg.early_stop

    output_path = Path(cfg.output)
    output_path.mkdir(parents=True, exist_ok=True)
    tasks = [(spec, cfg, k, cfg.seed + k, target, reference.energy) for k in range(cfg.runs)]
    workers = min(resolve_workers(cfg.workers), cfg.runs)

    logger.info("Running %d %s runs on %s with %d workers", cfg.runs, cfg.method.value, spec.name, workers)
    start = time.perf_counter()
    records = []
    with open(output_path / "runs.jsonl", "w") as file:
        if workers > 1:
            with mp.Pool(processes=workers) as pool:
                for record in pool.imap(_run_task_star, tasks):
                    file.write(json.dumps(record) + "\n")
                    file.flush()
                    records.append(record)
        else:
            for task in tasks:
                record = run_task(*task)
                file.write(json.dumps(record) + "\n")
                file.flush()
                records.append(record)

    metrics = compute_metrics(
        records, reference.energy, spec.n_atoms, cfg.success_threshold, method=cfg.method.value, model=spec.name
    )
    store_results(metrics, cfg, reference, output_path)
    logger.info(
        "Finished %d runs in %.1f s: success rate %.2f, median residual %.4f kcal/mol",
        cfg.runs,
        time.perf_counter() - start,
        metrics.success_rate,
        metrics.residual_p50,
    )
    return metrics, records


def sweep_neighbourhood_size(cfg: ExperimentConfig, sizes: list[int]) -> pd.DataFrame:
    """Repeat :func:`run_experiment` for each budget in ``sizes``, one subdirectory per budget."""
    if not sizes:
        raise ValueError("sizes must not be empty")
    rows = []
    for s in sizes:
        sub = replace(cfg, search=replace(cfg.search, s=s), output=Path(cfg.output) / f"s{s}")
        metrics, _ = run_experiment(sub)
        rows.append({"s": s, **metrics.to_row(), "errors": metrics.errors})
    table = pd.DataFrame(rows)
    Path(cfg.output).mkdir(parents=True, exist_ok=True)
    table.to_csv(Path(cfg.output) / "neighbourhood_size.csv", index=False)
    return table
