from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Self

import yaml

from confsearch.encoding import Discretization
from confsearch.solvers import Solver, create_solver

INITIAL_CONFORMATIONS = ("random", "greedy")


class Method(Enum):
    VND = "vnd"
    LS = "ls"
    LSVND = "lsvnd"
    PTMC = "ptmc"

    @classmethod
    def _missing_(cls, value):
        if isinstance(value, str) and value.lower().replace("_", "").replace("-", "") == "lsvnd":
            return cls.LSVND
        return None


@dataclass
class SearchConfig:
    """
    Parameters of the VND, LS and LS-VND drivers.

    :param d: Number of torsion levels.
    :param s: Neighbourhood budget, the total number of levels offered per VND iteration.
    :param max_iters: Iteration budget (passes for LS).
    :param max_no_improve: Consecutive non-improving VND iterations before stopping.
    :param penalty: ``"auto"`` or a fixed one-hot penalty [kcal/mol].
    :param solver: Solver description, see :func:`confsearch.solvers.create_solver`.
    :param seed: Seed of the run's random generator.
    :param target_energy: Stop as soon as the current energy is at or below this value.
    :param reference_energy: Reference energy, recorded for reporting.
    :param scale_14: Weight of 1-4 pairs in the energy model.
    :param memoize: Cache group energies between VND iterations.
    :param initial: Starting conformation, ``"random"`` levels or a ``"greedy"`` build one torsion at a time.
    """

    d: int = 16
    s: int = 63
    max_iters: int = 200
    max_no_improve: int = 10
    penalty: str | float = "auto"
    solver: dict[str, Any] = field(default_factory=lambda: {"type": "exact"})
    seed: int | None = None
    target_energy: float | None = None
    reference_energy: float | None = None
    scale_14: float = 1.0
    memoize: bool = True
    initial: str = "random"

    def __post_init__(self):
        if self.initial not in INITIAL_CONFORMATIONS:
            raise ValueError(f"initial must be one of {INITIAL_CONFORMATIONS}, got {self.initial!r}")
        if self.d < 2:
            raise ValueError("d must be at least 2")
        if self.s < 2:
            raise ValueError("s must be at least 2")
        if self.max_iters < 1 or self.max_no_improve < 1:
            raise ValueError("max_iters and max_no_improve must be at least 1")
        if self.penalty != "auto":
            self.penalty = float(self.penalty)
            if self.penalty <= 0:
                raise ValueError("a fixed penalty must be positive")

    @property
    def theta(self) -> Discretization:
        return Discretization.uniform(self.d)

    def create_solver(self) -> Solver:
        return create_solver(self.solver)

    def to_dict(self) -> dict[str, Any]:
        return {
            "d": self.d,
            "s": self.s,
            "max_iters": self.max_iters,
            "max_no_improve": self.max_no_improve,
            "penalty": self.penalty,
            "solver": dict(self.solver),
            "seed": self.seed,
            "target_energy": self.target_energy,
            "reference_energy": self.reference_energy,
            "scale_14": self.scale_14,
            "memoize": self.memoize,
            "initial": self.initial,
        }

    @staticmethod
    def from_dict(data: dict[str, Any]) -> Self:
        solver = data.get("solver", {"type": "exact"})
        return SearchConfig(
            d=data.get("d", 16),
            s=data.get("s", 63),
            max_iters=data.get("max_iters", 200),
            max_no_improve=data.get("max_no_improve", 10),
            penalty=data.get("penalty", "auto"),
            solver={"type": solver} if isinstance(solver, str) else dict(solver),
            seed=data.get("seed"),
            target_energy=data.get("target_energy"),
            reference_energy=data.get("reference_energy"),
            scale_14=data.get("scale_14", 1.0),
            memoize=data.get("memoize", True),
            initial=data.get("initial", "random"),
        )


@dataclass
class PtmcConfig:
    """
    Parallel tempering parameters.

    :param replicas: Number of chains.
    :param sweeps: Sweep budget; one sweep proposes one move per torsion in every replica.
    :param t_min: Temperature of the coldest replica [kcal/mol].
    :param t_max: Temperature of the hottest replica [kcal/mol].
    :param exchange_interval: Sweeps between replica-exchange attempts.
    :param d: Number of torsion levels.
    """

    replicas: int = 10
    sweeps: int = 2000
    t_min: float = 0.5
    t_max: float = 100.0
    exchange_interval: int = 1
    d: int = 16
    seed: int | None = None
    target_energy: float | None = None
    scale_14: float = 1.0

    def __post_init__(self):
        if self.replicas < 2:
            raise ValueError("parallel tempering needs at least 2 replicas")
        if not 0 < self.t_min < self.t_max:
            raise ValueError("need 0 < t_min < t_max")
        if self.sweeps < 0 or self.exchange_interval < 1:
            raise ValueError("sweeps must be non-negative and exchange_interval positive")

    @property
    def theta(self) -> Discretization:
        return Discretization.uniform(self.d)

    def to_dict(self) -> dict[str, Any]:
        return {
            "replicas": self.replicas,
            "sweeps": self.sweeps,
            "t_min": self.t_min,
            "t_max": self.t_max,
            "exchange_interval": self.exchange_interval,
            "d": self.d,
            "seed": self.seed,
            "target_energy": self.target_energy,
            "scale_14": self.scale_14,
        }

    @staticmethod
    def from_dict(data: dict[str, Any]) -> Self:
        return PtmcConfig(**{k: v for k, v in data.items() if k in PtmcConfig.__dataclass_fields__})


@dataclass
class ExperimentConfig:
    """
    A batch of independent seeded runs of one method on one molecule.

    :param molecule: Molecule-spec file.
    :param method: Search method.
    :param search: VND/LS settings.
    :param ptmc: PTMC settings, used by the ``ptmc`` method.
    :param runs: Number of runs; run k uses seed ``seed + k``.
    :param reference: Reference JSON file; looked up next to the molecule when unset.
    :param output: Results directory.
    :param success_threshold: Runs ending within this gap of the reference count as successes [kcal/mol].
    :param early_stop: Runs stop once within this gap of the reference [kcal/mol].
    """

    molecule: Path
    method: Method = Method.VND
    search: SearchConfig = field(default_factory=SearchConfig)
    ptmc: PtmcConfig = field(default_factory=PtmcConfig)
    runs: int = 100
    reference: Path | None = None
    output: Path = Path("results")
    seed: int = 0
    workers: int | None = None
    success_threshold: float = 1.0
    early_stop: float = 0.1

    def __post_init__(self):
        self.molecule = Path(self.molecule)
        self.output = Path(self.output)
        if self.reference is not None:
            self.reference = Path(self.reference)
        if not isinstance(self.method, Method):
            self.method = Method(self.method)
        if self.runs < 1:
            raise ValueError("runs must be at least 1")

    def to_dict(self) -> dict[str, Any]:
        return {
            "molecule": str(self.molecule),
            "method": self.method.value,
            "search": self.search.to_dict(),
            "ptmc": self.ptmc.to_dict(),
            "runs": self.runs,
            "reference": None if self.reference is None else str(self.reference),
            "output": str(self.output),
            "seed": self.seed,
            "workers": self.workers,
            "success_threshold": self.success_threshold,
            "early_stop": self.early_stop,
        }

    def __str__(self):
        return self.__repr__()

    @staticmethod
    def from_dict(data: dict[str, Any]) -> Self:
        return ExperimentConfig(
            molecule=Path(data["molecule"]),
            method=Method(data.get("method", "vnd")),
            search=SearchConfig.from_dict(data.get("search", {})),
            ptmc=PtmcConfig.from_dict(data.get("ptmc", {})),
            runs=data.get("runs", 100),
            reference=data.get("reference"),
            output=Path(data.get("output", "results")),
            seed=data.get("seed", 0),
            workers=data.get("workers"),
            success_threshold=data.get("success_threshold", 1.0),
            early_stop=data.get("early_stop", 0.1),
        )

    @staticmethod
    def from_yaml(yaml_file: Path) -> Self:
        with open(yaml_file, "r") as file:
            data = yaml.safe_load(file)
        return ExperimentConfig.from_dict(data=data)
