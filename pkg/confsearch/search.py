import itertools
import math
import time
from collections.abc import Callable
from dataclasses import dataclass, field
from enum import Enum
from logging import getLogger
from typing import Any

import networkx as nx
import numpy as np

from confsearch.config import PtmcConfig, SearchConfig
from confsearch.encoding import Discretization, build_neighbourhood_qubo, decode_bits, feasible_energy
from confsearch.energy import EnergyModel, EvalCounter
from confsearch.errors import ConfigurationError
from confsearch.neighbourhoods import allocate_levels, neighbourhood_change
from confsearch.solvers import RemoteSolverError, Solver

logger = getLogger(__name__)

IMPROVEMENT_TOLERANCE = 1e-9


class TerminatedBy(Enum):
    ITER_BUDGET = "iter_budget"
    NO_IMPROVE = "no_improve"
    TARGET_REACHED = "target_reached"


@dataclass(frozen=True)
class IterationRecord:
    """One VND iteration: the neighbourhood searched and what came of it."""

    iteration: int
    torsions: tuple[int, ...]
    sizes: tuple[int, ...]
    evals: int
    candidate_energy: float | None
    accepted: bool
    energy: float

    def to_dict(self) -> dict[str, Any]:
        return {
            "iteration": self.iteration,
            "torsions": list(self.torsions),
            "sizes": list(self.sizes),
            "evals": self.evals,
            "candidate_energy": self.candidate_energy,
            "accepted": self.accepted,
            "energy": self.energy,
        }


@dataclass
class RunResult:
    """
    Outcome of a single search run.

    :param best_t: Best torsion vector found [degrees].
    :param best_energy: Its energy [kcal/mol].
    :param trajectory: ``(iteration, energy)`` at every improvement, starting with the initial conformation.
    :param energy_evals: Energy evaluations spent over the whole run.
    :param evals_to_best: Energy evaluations spent when the best conformation was first reached.
    :param wall_time: Run time [s].
    :param time_to_best: Time until the best conformation was first reached [s].
    :param terminated_by: Stopping rule that ended the run.
    :param iterations: Per-iteration log of VND phases.
    """

    best_t: tuple[float, ...]
    best_energy: float
    trajectory: list[tuple[int, float]]
    energy_evals: int
    evals_to_best: int
    wall_time: float
    time_to_best: float
    terminated_by: TerminatedBy
    iterations: list[IterationRecord] = field(default_factory=list)
    method: str = ""

    def to_dict(self) -> dict[str, Any]:
        return {
            "method": self.method,
            "best_t": list(self.best_t),
            "best_energy": self.best_energy,
            "trajectory": [[i, e] for i, e in self.trajectory],
            "energy_evals": self.energy_evals,
            "evals_to_best": self.evals_to_best,
            "wall_time": self.wall_time,
            "time_to_best": self.time_to_best,
            "terminated_by": self.terminated_by.value,
            "iterations": [record.to_dict() for record in self.iterations],
        }


class _Tracker:
    """Best-so-far bookkeeping shared by the phases of one run."""

    def __init__(self, counter: EvalCounter, target_energy: float | None = None):
        self.counter = counter
        self.target_energy = target_energy
        self.start = time.perf_counter()
        self.best_t: np.ndarray | None = None
        self.best_energy = math.inf
        self.evals_to_best = 0
        self.time_to_best = 0.0
        self.trajectory: list[tuple[int, float]] = []
        self.iterations: list[IterationRecord] = []

    def offer(self, iteration: int, t: np.ndarray, energy: float) -> bool:
        if energy >= self.best_energy:
            return False
        self.best_t = np.array(t, dtype=float)
        self.best_energy = float(energy)
        self.evals_to_best = self.counter.count
        self.time_to_best = time.perf_counter() - self.start
        self.trajectory.append((iteration, float(energy)))
        return True

    def target_reached(self, energy: float) -> bool:
        return self.target_energy is not None and energy <= self.target_energy

    def result(self, terminated_by: TerminatedBy, method: str) -> RunResult:
        return RunResult(
            best_t=tuple(float(x) for x in self.best_t),
            best_energy=self.best_energy,
            trajectory=list(self.trajectory),
            energy_evals=self.counter.count,
            evals_to_best=self.evals_to_best,
            wall_time=time.perf_counter() - self.start,
            time_to_best=self.time_to_best,
            terminated_by=terminated_by,
            iterations=list(self.iterations),
            method=method,
        )


def greedy_start(model: EnergyModel, theta: Discretization, counter: EvalCounter) -> np.ndarray:
    """
    Build a start from the all-zero vector one torsion at a time, in breadth-first order from body 0: each
    torsion takes its lowest-energy level with the torsions before it already fixed.
    """
    graph = model.graph
    order = [graph.tree.edges[u, v]["torsion"] for u, v in nx.bfs_edges(graph.tree, 0)]
    t = np.zeros(model.n_torsions)
    energy = model.total_energy(t, counter)
    for i in order:
        trial = t.copy()
        for angle in theta.theta:
            trial[i] = angle
            e = model.total_energy(trial, counter)
            if e < energy:
                t[i], energy = angle, e
    return t


def _initial(
    model: EnergyModel, cfg: SearchConfig, rng: np.random.Generator, t_init, counter: EvalCounter
) -> np.ndarray:
    theta = cfg.theta
    if t_init is None:
        if cfg.initial == "greedy":
            return greedy_start(model, theta, counter)
        return theta.random_vector(model.n_torsions, rng)
    t = np.asarray(t_init, dtype=float).reshape(-1)
    if t.shape[0] != model.n_torsions:
        raise ConfigurationError(f"initial vector has length {t.shape[0]}, molecule has {model.n_torsions} torsions")
    return np.array([theta.theta[theta.index_of(angle)] for angle in t])


def _vnd_phase(
    model: EnergyModel,
    cfg: SearchConfig,
    solver: Solver,
    rng: np.random.Generator,
    t: np.ndarray,
    energy: float,
    tracker: _Tracker,
    first_iteration: int = 1,
    max_iters: int | None = None,
) -> tuple[np.ndarray, float, TerminatedBy]:
    if tracker.target_reached(energy):
        return t, energy, TerminatedBy.TARGET_REACHED
    if model.n_torsions == 0:
        return t, energy, TerminatedBy.NO_IMPROVE

    theta = cfg.theta
    counter = tracker.counter
    iteration, no_improve = 0, 0
    budget = cfg.max_iters if max_iters is None else max_iters
    while iteration < budget and no_improve < cfg.max_no_improve:
        iteration += 1
        subset = neighbourhood_change(model.graph, rng)
        layout = allocate_levels(subset, cfg.s, theta, t, rng)

        before = counter.count
        q = build_neighbourhood_qubo(model, t, subset, layout, cfg.penalty, counter)
        evals = counter.count - before

        candidate, t_new = None, None
        try:
            result = solver.solve(q, rng=rng)
        except RemoteSolverError as err:
            logger.warning("Solver failed in iteration %d: %s", iteration, err)
            result = None
        if result is not None and result.feasible_bits is not None:
            t_new = decode_bits(result.feasible_bits, layout, t)
            candidate = feasible_energy(q, result.feasible_bits)
        elif result is not None:
            logger.warning("Iteration %d: no one-hot feasible sample among %d", iteration, result.samples_total)

        # The candidate is assembled from QUBO blocks, so returning the current point must not count as a move.
        accepted = (
            candidate is not None
            and not np.array_equal(t_new, t)
            and candidate < energy - IMPROVEMENT_TOLERANCE * (1.0 + abs(energy))
        )
        if accepted:
            t, energy = t_new, candidate
            no_improve = 0
            tracker.offer(first_iteration + iteration - 1, t, energy)
        else:
            no_improve += 1

        tracker.iterations.append(
            IterationRecord(
                iteration=first_iteration + iteration - 1,
                torsions=layout.torsions,
                sizes=layout.sizes,
                evals=evals,
                candidate_energy=candidate,
                accepted=accepted,
                energy=energy,
            )
        )
        logger.debug(
            "VND iteration %d: torsions %s sizes %s, %d evaluations, energy %.6f%s",
            iteration,
            layout.torsions,
            layout.sizes,
            evals,
            energy,
            " (accepted)" if accepted else "",
        )
        if tracker.target_reached(energy):
            return t, energy, TerminatedBy.TARGET_REACHED

    terminated_by = TerminatedBy.NO_IMPROVE if no_improve >= cfg.max_no_improve else TerminatedBy.ITER_BUDGET
    return t, energy, terminated_by


def _local_search_phase(
    model: EnergyModel,
    cfg: SearchConfig,
    rng: np.random.Generator,
    t: np.ndarray,
    energy: float,
    tracker: _Tracker,
) -> tuple[np.ndarray, float, TerminatedBy, int]:
    if tracker.target_reached(energy):
        return t, energy, TerminatedBy.TARGET_REACHED, 0

    levels = cfg.theta.theta
    counter = tracker.counter
    t = np.array(t, dtype=float)
    passes = 0
    while passes < cfg.max_iters:
        passes += 1
        improved = False
        for i in rng.permutation(model.n_torsions):
            best_angle, best_energy = None, energy
            trial = t.copy()
            for angle in levels:
                trial[i] = angle
                e = model.total_energy(trial, counter)
                if e < best_energy:
                    best_angle, best_energy = angle, e
            if best_angle is not None:
                t[i] = best_angle
                energy = best_energy
                improved = True
                tracker.offer(passes, t, energy)
                if tracker.target_reached(energy):
                    return t, energy, TerminatedBy.TARGET_REACHED, passes
        logger.debug("LS pass %d: energy %.6f", passes, energy)
        if not improved:
            return t, energy, TerminatedBy.NO_IMPROVE, passes
    return t, energy, TerminatedBy.ITER_BUDGET, passes


def vnd(
    model: EnergyModel,
    cfg: SearchConfig,
    solver: Solver,
    rng: np.random.Generator,
    t_init=None,
    counter: EvalCounter | None = None,
) -> RunResult:
    """
    Variable neighbourhood descent over the discretized torsion space.

    Each iteration draws a random maximal 2-torsion dependent subset, offers ``cfg.s`` levels over its
    torsions, solves the neighbourhood QUBO and moves when the decoded conformation is strictly lower.
    """
    counter = counter if counter is not None else EvalCounter()
    tracker = _Tracker(counter, cfg.target_energy)
    t = _initial(model, cfg, rng, t_init, counter)
    energy = model.total_energy(t, counter)
    tracker.offer(0, t, energy)
    _, _, terminated_by = _vnd_phase(model, cfg, solver, rng, t, energy, tracker)
    return tracker.result(terminated_by, method="vnd")


def local_search(
    model: EnergyModel, cfg: SearchConfig, rng: np.random.Generator, t_init=None, counter: EvalCounter | None = None
) -> RunResult:
    """
    Single-torsion descent: each pass visits the torsions in random order, scans all d levels of each and
    moves to the best strictly improving one. Every scanned level costs one full energy evaluation.
    """
    counter = counter if counter is not None else EvalCounter()
    tracker = _Tracker(counter, cfg.target_energy)
    t = _initial(model, cfg, rng, t_init, counter)
    energy = model.total_energy(t, counter)
    tracker.offer(0, t, energy)
    _, _, terminated_by, _ = _local_search_phase(model, cfg, rng, t, energy, tracker)
    return tracker.result(terminated_by, method="ls")


def ls_vnd(
    model: EnergyModel,
    cfg: SearchConfig,
    solver: Solver,
    rng: np.random.Generator,
    t_init=None,
    counter: EvalCounter | None = None,
) -> RunResult:
    """
    Local search from the configured start, then VND from the local optimum.

    Both phases share one counter, one clock and one iteration budget: VND gets the ``cfg.max_iters`` iterations
    left over after the LS passes.
    """
    counter = counter if counter is not None else EvalCounter()
    tracker = _Tracker(counter, cfg.target_energy)
    t = _initial(model, cfg, rng, t_init, counter)
    energy = model.total_energy(t, counter)
    tracker.offer(0, t, energy)
    t, energy, terminated_by, passes = _local_search_phase(model, cfg, rng, t, energy, tracker)
    if terminated_by is not TerminatedBy.TARGET_REACHED:
        logger.debug("LS phase ended after %d passes at %.6f, continuing with VND", passes, energy)
        _, _, terminated_by = _vnd_phase(
            model, cfg, solver, rng, t, energy, tracker, first_iteration=passes + 1, max_iters=cfg.max_iters - passes
        )
    return tracker.result(terminated_by, method="lsvnd")


def metropolis_accept(delta: float, temperature: float, rng: np.random.Generator) -> bool:
    if delta <= 0:
        return True
    return bool(rng.random() < math.exp(-delta / temperature))


def exchange_probability(e_i: float, e_j: float, t_i: float, t_j: float) -> float:
    """Acceptance probability of swapping the states of replicas at temperatures ``t_i`` and ``t_j``."""
    x = (1.0 / t_i - 1.0 / t_j) * (e_i - e_j)
    return 1.0 if x >= 0 else math.exp(x)


def temperature_ladder(cfg: PtmcConfig) -> np.ndarray:
    return np.geomspace(cfg.t_min, cfg.t_max, cfg.replicas)


def ptmc(
    model: EnergyModel,
    cfg: PtmcConfig,
    rng: np.random.Generator,
    counter: EvalCounter | None = None,
    callback: Callable[[int, list[np.ndarray], list[float]], None] | None = None,
) -> RunResult:
    """
    Parallel tempering Monte Carlo on a fixed geometric temperature ladder.

    A sweep proposes, in every replica, one uniformly drawn level per torsion. Adjacent replicas attempt a
    swap every ``cfg.exchange_interval`` sweeps. ``callback(sweep, states, energies)`` is called after each
    sweep, coldest replica first.
    """
    counter = counter if counter is not None else EvalCounter()
    tracker = _Tracker(counter, cfg.target_energy)
    theta = np.asarray(cfg.theta.theta)
    temperatures = temperature_ladder(cfg)
    m = model.n_torsions

    states = [cfg.theta.random_vector(m, rng) for _ in range(cfg.replicas)]
    energies = [model.total_energy(state, counter) for state in states]
    for state, energy in zip(states, energies):
        tracker.offer(0, state, energy)
    if tracker.target_reached(tracker.best_energy):
        return tracker.result(TerminatedBy.TARGET_REACHED, method="ptmc")
    if m == 0:
        return tracker.result(TerminatedBy.NO_IMPROVE, method="ptmc")

    for sweep in range(1, cfg.sweeps + 1):
        for r in range(cfg.replicas):
            for i in range(m):
                proposal = states[r].copy()
                proposal[i] = theta[rng.integers(len(theta))]
                e_new = model.total_energy(proposal, counter)
                if metropolis_accept(e_new - energies[r], temperatures[r], rng):
                    states[r], energies[r] = proposal, e_new
                    tracker.offer(sweep, proposal, e_new)
                    if tracker.target_reached(e_new):
                        return tracker.result(TerminatedBy.TARGET_REACHED, method="ptmc")

        if sweep % cfg.exchange_interval == 0:
            for r in range(cfg.replicas - 1):
                p = exchange_probability(energies[r], energies[r + 1], temperatures[r], temperatures[r + 1])
                if rng.random() < p:
                    states[r], states[r + 1] = states[r + 1], states[r]
                    energies[r], energies[r + 1] = energies[r + 1], energies[r]

        if callback is not None:
            callback(sweep, states, energies)

    return tracker.result(TerminatedBy.ITER_BUDGET, method="ptmc")


def grid_minimum(
    model: EnergyModel, theta: Discretization, counter: EvalCounter, max_points: int = int(1e6)
) -> tuple[np.ndarray, float]:
    """Exhaustive scan of Θ^M; the first grid point in lexicographic level order wins ties."""
    m = model.n_torsions
    points = theta.d**m
    if points > max_points:
        raise ValueError(f"grid of {points} points exceeds the limit of {max_points}")
    best_t, best_energy = np.zeros(m), math.inf
    for levels in itertools.product(theta.theta, repeat=m):
        t = np.asarray(levels, dtype=float)
        energy = model.total_energy(t, counter)
        if energy < best_energy:
            best_t, best_energy = t, energy
    return best_t, best_energy
