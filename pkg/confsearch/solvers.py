import math
import time
from abc import ABCMeta, abstractmethod
from dataclasses import dataclass
from logging import getLogger
from typing import Any

import numpy as np
import requests

from confsearch.encoding import QuboProblem, qubo_energies, qubo_energy, qubo_to_document, qubo_to_ising
from confsearch.errors import ConfigurationError

logger = getLogger(__name__)

TIE_TOLERANCE = 1e-9
CHUNK_SIZE = 1 << 16


class ProblemSizeError(ConfigurationError):
    pass


class RemoteSolverError(RuntimeError):
    pass


class RemoteNetworkError(RemoteSolverError):
    pass


class RemoteTimeoutError(RemoteSolverError):
    pass


class RemoteStatusError(RemoteSolverError):
    pass


class RemoteResponseError(RemoteSolverError):
    pass


class RemoteSampleLengthError(RemoteResponseError):
    pass


@dataclass(frozen=True, eq=False)
class SolverResult:
    """
    Outcome of one QUBO minimization.

    :param best_bits: Lowest-energy bitstring found.
    :param best_energy: ``qubo_energy(q, best_bits)``.
    :param samples_feasible: Number of one-hot feasible samples (all samples when the QUBO has no layout).
    :param samples_total: Number of samples examined.
    :param wall_time: Solver time [s].
    :param feasible_bits: Lowest-energy one-hot feasible sample, if any.
    """

    best_bits: np.ndarray
    best_energy: float
    samples_feasible: int
    samples_total: int
    wall_time: float
    feasible_bits: np.ndarray | None = None


def lexicographic_argmin(X: np.ndarray, energies: np.ndarray) -> int:
    """Row of minimum energy; near-ties go to the lexicographically smallest bitstring."""
    e_min = float(np.min(energies))
    candidates = np.flatnonzero(energies <= e_min + TIE_TOLERANCE * (1.0 + abs(e_min)))
    if len(candidates) == 1:
        return int(candidates[0])
    order = np.lexsort(np.asarray(X)[candidates].T[::-1])
    return int(candidates[order[0]])


class _Incumbent:
    """Running best over chunks of samples, overall and among feasible ones."""

    def __init__(self, q: QuboProblem):
        self.q = q
        self.best: tuple[float, np.ndarray] | None = None
        self.feasible: tuple[float, np.ndarray] | None = None
        self.samples_total = 0
        self.samples_feasible = 0

    @staticmethod
    def _merge(current, X, energies):
        i = lexicographic_argmin(X, energies)
        if current is None:
            return float(energies[i]), X[i].copy()
        pool = np.vstack([current[1], X[i]])
        k = lexicographic_argmin(pool, np.array([current[0], energies[i]]))
        return (current[0], current[1]) if k == 0 else (float(energies[i]), X[i].copy())

    def update(self, X: np.ndarray, energies: np.ndarray, feasible: np.ndarray | None = None) -> None:
        if len(X) == 0:
            return
        self.samples_total += len(X)
        self.best = self._merge(self.best, X, energies)
        if feasible is None:
            feasible = self.q.layout.feasible_mask(X) if self.q.layout is not None else np.ones(len(X), dtype=bool)
        self.samples_feasible += int(feasible.sum())
        if feasible.any():
            self.feasible = self._merge(self.feasible, X[feasible], energies[feasible])

    def result(self, start: float) -> SolverResult:
        bits = self.best[1].astype(np.int8)
        return SolverResult(
            best_bits=bits,
            best_energy=qubo_energy(self.q, bits),
            samples_feasible=self.samples_feasible,
            samples_total=self.samples_total,
            wall_time=time.perf_counter() - start,
            feasible_bits=None if self.feasible is None else self.feasible[1].astype(np.int8),
        )


def solve_exact(q: QuboProblem, max_feasible: int = int(1e7)) -> SolverResult:
    """Minimize over the one-hot feasible assignments of ``q.layout`` only."""
    if q.layout is None:
        raise ValueError("exact feasible-space enumeration needs a one-hot layout")
    start = time.perf_counter()
    layout = q.layout
    total = math.prod(layout.sizes)
    if total > max_feasible:
        raise ProblemSizeError(f"{total} feasible assignments exceed the cap of {max_feasible}")

    offsets = np.asarray(layout.offsets)
    incumbent = _Incumbent(q)
    for lo in range(0, total, CHUNK_SIZE):
        idx = np.arange(lo, min(lo + CHUNK_SIZE, total))
        choice = np.unravel_index(idx, layout.sizes)
        X = np.zeros((len(idx), layout.n), dtype=np.int8)
        rows = np.arange(len(idx))
        for b, k in enumerate(choice):
            X[rows, offsets[b] + k] = 1
        incumbent.update(X, qubo_energies(q, X), feasible=np.ones(len(idx), dtype=bool))
    return incumbent.result(start)


def solve_brute(q: QuboProblem, max_variables: int = 24) -> SolverResult:
    """Minimize over all 2^n bitstrings; bit 0 is the most significant position of the enumeration."""
    if q.n > max_variables:
        raise ProblemSizeError(f"{q.n} variables exceed the brute-force limit of {max_variables}")
    start = time.perf_counter()
    shifts = np.arange(q.n - 1, -1, -1, dtype=np.int64)
    incumbent = _Incumbent(q)
    total = 1 << q.n
    for lo in range(0, total, CHUNK_SIZE):
        ints = np.arange(lo, min(lo + CHUNK_SIZE, total), dtype=np.int64)
        X = ((ints[:, None] >> shifts[None, :]) & 1).astype(np.int8)
        incumbent.update(X, qubo_energies(q, X))
    return incumbent.result(start)


@dataclass
class SaConfig:
    """
    Simulated-annealing schedule.

    When the inverse temperatures are left unset they scale with the largest Ising coefficient c:
    ``beta_initial = 0.1 / c`` and ``beta_final = 10 / c``.
    """

    reads: int = 5000
    sweeps: int = 100
    beta_initial: float | None = None
    beta_final: float | None = None
    seed: int | None = None

    def __post_init__(self):
        if self.reads < 1:
            raise ConfigurationError("reads must be at least 1")
        if self.sweeps < 0:
            raise ConfigurationError("sweeps must be non-negative")
        if self.beta_initial is not None and self.beta_final is not None:
            if not 0 < self.beta_initial < self.beta_final:
                raise ConfigurationError("need 0 < beta_initial < beta_final")

    def to_dict(self) -> dict[str, Any]:
        return {
            "reads": self.reads,
            "sweeps": self.sweeps,
            "beta_initial": self.beta_initial,
            "beta_final": self.beta_final,
            "seed": self.seed,
        }


def solve_sa(q: QuboProblem, cfg: SaConfig, rng: np.random.Generator | None = None) -> SolverResult:
    """
    Single-spin-flip Metropolis annealing of ``cfg.reads`` independent replicas on the Ising image of ``q``.

    All reads advance together; each sweep visits the spins in index order at one inverse temperature.
    """
    start = time.perf_counter()
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    ising = qubo_to_ising(q)
    n = ising.n
    J = ising.matrix + ising.matrix.T
    h = np.asarray(ising.h, dtype=float)

    scale = max(float(np.max(np.abs(h), initial=0.0)), float(np.max(np.abs(J), initial=0.0)))
    scale = scale if scale > 0 else 1.0
    beta_initial = cfg.beta_initial if cfg.beta_initial is not None else 0.1 / scale
    beta_final = cfg.beta_final if cfg.beta_final is not None else 10.0 / scale
    betas = np.geomspace(beta_initial, beta_final, cfg.sweeps) if cfg.sweeps > 0 else np.zeros(0)

    spins = rng.choice(np.array([-1.0, 1.0]), size=(cfg.reads, n))
    field = spins @ J + h
    for beta in betas:
        for i in range(n):
            delta = -2.0 * spins[:, i] * field[:, i]
            accept = rng.random(cfg.reads) < np.exp(np.minimum(0.0, -beta * delta))
            flipped = np.flatnonzero(accept)
            if len(flipped):
                spins[flipped, i] *= -1.0
                field[flipped] += 2.0 * spins[flipped, i][:, None] * J[i][None, :]

    X = ((spins + 1) // 2).astype(np.int8)
    incumbent = _Incumbent(q)
    incumbent.update(X, qubo_energies(q, X))
    return incumbent.result(start)


def solve_remote(q: QuboProblem, endpoint: str, timeout: float = 30.0) -> SolverResult:
    """
    POST ``q`` as a QUBO document to ``endpoint`` and keep the best returned sample.

    Sample energies reported by the service are ignored; every sample is re-evaluated locally.
    """
    start = time.perf_counter()
    try:
        response = requests.post(endpoint, json=qubo_to_document(q), timeout=timeout)
    except requests.Timeout as err:
        raise RemoteTimeoutError(f"no answer from {endpoint} within {timeout} s") from err
    except requests.RequestException as err:
        raise RemoteNetworkError(f"request to {endpoint} failed: {err}") from err

    if response.status_code != 200:
        raise RemoteStatusError(f"{endpoint} answered with status {response.status_code}")

    try:
        samples = response.json()["samples"]
        rows = [sample["bits"] for sample in samples]
    except (ValueError, KeyError, TypeError) as err:
        raise RemoteResponseError(f"malformed response from {endpoint}: {err}") from err
    if not rows:
        raise RemoteResponseError(f"{endpoint} returned no samples")
    for bits in rows:
        if not isinstance(bits, list):
            raise RemoteResponseError("sample bits must be a list")
        if len(bits) != q.n:
            raise RemoteSampleLengthError(f"sample has {len(bits)} bits, expected {q.n}")
        if any(b not in (0, 1) for b in bits):
            raise RemoteResponseError("sample bits must be 0 or 1")

    X = np.asarray(rows, dtype=np.int8).reshape(len(rows), q.n)
    incumbent = _Incumbent(q)
    incumbent.update(X, qubo_energies(q, X))
    return incumbent.result(start)


class Solver(metaclass=ABCMeta):
    @abstractmethod
    def solve(self, q: QuboProblem, rng: np.random.Generator | None = None) -> SolverResult:
        pass

    @abstractmethod
    def to_dict(self) -> dict[str, Any]:
        pass

    def __eq__(self, other: Any) -> bool:
        return isinstance(other, self.__class__) and self.to_dict() == other.to_dict()

    def __repr__(self):
        params = ", ".join(f"{k}={v}" for k, v in self.to_dict().items() if k != "type")
        return self.__class__.__name__ + f"({params})"


class ExactSolver(Solver):
    def __init__(self, max_feasible: int = int(1e7)) -> None:
        self.max_feasible = int(max_feasible)

    def solve(self, q: QuboProblem, rng: np.random.Generator | None = None) -> SolverResult:
        return solve_exact(q, max_feasible=self.max_feasible)

    def to_dict(self) -> dict[str, Any]:
        return {"type": "exact", "max_feasible": self.max_feasible}

    @staticmethod
    def from_dict(data: dict[str, Any]) -> "ExactSolver":
        return ExactSolver(max_feasible=data.get("max_feasible", int(1e7)))


class BruteForceSolver(Solver):
    def __init__(self, max_variables: int = 24) -> None:
        self.max_variables = int(max_variables)

    def solve(self, q: QuboProblem, rng: np.random.Generator | None = None) -> SolverResult:
        return solve_brute(q, max_variables=self.max_variables)

    def to_dict(self) -> dict[str, Any]:
        return {"type": "brute", "max_variables": self.max_variables}

    @staticmethod
    def from_dict(data: dict[str, Any]) -> "BruteForceSolver":
        return BruteForceSolver(max_variables=data.get("max_variables", 24))


class SimulatedAnnealingSolver(Solver):
    """
    Software stand-in for an annealer. A search run passes its own generator so that results follow the
    run seed; ``cfg.seed`` is used only when none is given.
    """

    def __init__(self, cfg: SaConfig | None = None) -> None:
        self.cfg = cfg if cfg is not None else SaConfig()

    def solve(self, q: QuboProblem, rng: np.random.Generator | None = None) -> SolverResult:
        return solve_sa(q, self.cfg, rng=rng)

    def to_dict(self) -> dict[str, Any]:
        return {"type": "sa", **self.cfg.to_dict()}

    @staticmethod
    def from_dict(data: dict[str, Any]) -> "SimulatedAnnealingSolver":
        params = {k: data[k] for k in ("reads", "sweeps", "beta_initial", "beta_final", "seed") if k in data}
        return SimulatedAnnealingSolver(SaConfig(**params))


class RemoteSolver(Solver):
    def __init__(self, endpoint: str, timeout: float = 30.0) -> None:
        self.endpoint = endpoint
        self.timeout = float(timeout)

    def solve(self, q: QuboProblem, rng: np.random.Generator | None = None) -> SolverResult:
        return solve_remote(q, self.endpoint, timeout=self.timeout)

    def to_dict(self) -> dict[str, Any]:
        return {"type": "remote", "endpoint": self.endpoint, "timeout": self.timeout}

    @staticmethod
    def from_dict(data: dict[str, Any]) -> "RemoteSolver":
        return RemoteSolver(endpoint=data["endpoint"], timeout=data.get("timeout", 30.0))


SOLVERS = {
    "exact": ExactSolver,
    "brute": BruteForceSolver,
    "sa": SimulatedAnnealingSolver,
    "remote": RemoteSolver,
}


def create_solver(data: dict[str, Any] | str) -> Solver:
    """
    Create a Solver from its dictionary form, e.g. ``{"type": "sa", "reads": 1000}``, or from a bare type name.
    """
    if isinstance(data, str):
        data = {"type": data}
    solver_type = data["type"]
    if solver_type not in SOLVERS:
        raise ConfigurationError(f"Unknown solver type: {solver_type}")
    return SOLVERS[solver_type].from_dict(data)
