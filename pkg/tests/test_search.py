import math

import numpy as np
import pytest

from confsearch.config import PtmcConfig, SearchConfig
from confsearch.encoding import Discretization, build_neighbourhood_qubo, encode_levels, feasible_energy
from confsearch.energy import EnergyModel, EvalCounter
from confsearch.errors import ConfigurationError
from confsearch.neighbourhoods import allocate_levels, neighbourhood_change, neighbourhood_counts
from confsearch.search import (
    TerminatedBy,
    exchange_probability,
    greedy_start,
    grid_minimum,
    local_search,
    ls_vnd,
    metropolis_accept,
    ptmc,
    temperature_ladder,
    vnd,
)
from confsearch.solvers import ExactSolver, RemoteSolverError, SaConfig, SimulatedAnnealingSolver, Solver, solve_exact


class FailingSolver(Solver):
    def solve(self, q, rng=None):
        raise RemoteSolverError("endpoint unreachable")

    def to_dict(self):
        return {"type": "failing"}


def _grid(spec, d):
    model = EnergyModel(spec)
    return grid_minimum(model, Discretization.uniform(d), EvalCounter())


def test_grid_minimum_limit(decane):
    with pytest.raises(ValueError):
        grid_minimum(EnergyModel(decane), Discretization.uniform(16), EvalCounter(), max_points=1000)


def test_vnd_single_torsion(butane):
    _, reference = _grid(butane, 4)
    cfg = SearchConfig(d=4, s=4)
    for seed in range(5):
        result = vnd(EnergyModel(butane), cfg, ExactSolver(), np.random.default_rng(seed))
        assert result.best_energy == pytest.approx(reference, abs=1e-9)
        assert result.terminated_by is TerminatedBy.NO_IMPROVE
        assert len(result.iterations) <= cfg.max_no_improve + 1


def test_vnd_covers_whole_grid_of_pentane(pentane):
    _, reference = _grid(pentane, 4)
    cfg = SearchConfig(d=4, s=8)
    for seed in range(10):
        result = vnd(EnergyModel(pentane), cfg, ExactSolver(), np.random.default_rng(seed))
        assert result.best_energy == pytest.approx(reference, abs=1e-9)


def test_vnd_reaches_grid_minimum_at_eight_levels(pentane):
    _, reference = _grid(pentane, 8)
    cfg = SearchConfig(d=8, s=16)
    for seed in range(20):
        result = vnd(EnergyModel(pentane), cfg, ExactSolver(), np.random.default_rng(seed))
        assert result.best_energy == pytest.approx(reference, abs=1e-9)


def test_vnd_trajectory_is_monotone(decane):
    model = EnergyModel(decane)
    cfg = SearchConfig(d=16, s=20, max_iters=15)
    result = vnd(model, cfg, ExactSolver(), np.random.default_rng(3))
    energies = [e for _, e in result.trajectory]
    assert all(b < a for a, b in zip(energies, energies[1:]))
    assert result.best_energy == energies[-1]
    assert result.best_energy == pytest.approx(model.total_energy(result.best_t, EvalCounter()), rel=1e-9, abs=1e-9)
    assert all(a.energy >= b.energy for a, b in zip(result.iterations, result.iterations[1:]))
    assert result.evals_to_best <= result.energy_evals
    assert result.time_to_best <= result.wall_time


def test_vnd_counts_every_coefficient_evaluation(hexane):
    model = EnergyModel(hexane, memoize=False)
    cfg = SearchConfig(d=8, s=12, max_iters=50, max_no_improve=50)
    result = vnd(model, cfg, ExactSolver(), np.random.default_rng(0))
    assert len(result.iterations) == 50
    for record in result.iterations:
        assert record.sizes == (6, 6)
        assert record.evals == 6 * 6 + 6 + 6
    assert result.energy_evals == 1 + sum(record.evals for record in result.iterations)


def test_neighbourhood_contains_current_point(decane):
    model = EnergyModel(decane)
    theta = Discretization.uniform(16)
    rng = np.random.default_rng(11)
    for _ in range(10):
        current = theta.random_vector(decane.n_torsions, rng)
        subset = neighbourhood_change(decane.rigid_bodies, rng)
        layout = allocate_levels(subset, 24, theta, current, rng)
        counter = EvalCounter()
        q = build_neighbourhood_qubo(model, current, subset, layout, "auto", counter)
        here = feasible_energy(q, encode_levels(layout, current))
        assert here == pytest.approx(model.total_energy(current, counter), rel=1e-9, abs=1e-9)
        best = solve_exact(q)
        assert feasible_energy(q, best.best_bits) <= here + 1e-9
        assert neighbourhood_counts(layout)[0] == best.samples_total


def test_vnd_with_simulated_annealing(pentane):
    model = EnergyModel(pentane)
    cfg = SearchConfig(d=8, s=16)
    solver = SimulatedAnnealingSolver(SaConfig(reads=500))
    result = vnd(model, cfg, solver, np.random.default_rng(0))
    assert any(record.candidate_energy is not None for record in result.iterations)
    assert result.best_energy <= result.trajectory[0][1]
    assert result.best_energy == pytest.approx(model.total_energy(result.best_t, EvalCounter()), rel=1e-9, abs=1e-9)


def test_vnd_survives_solver_failures(pentane):
    cfg = SearchConfig(d=8, s=16, max_no_improve=3)
    result = vnd(EnergyModel(pentane), cfg, FailingSolver(), np.random.default_rng(0))
    assert result.terminated_by is TerminatedBy.NO_IMPROVE
    assert len(result.iterations) == 3
    assert all(record.candidate_energy is None for record in result.iterations)
    assert result.trajectory == [(0, result.best_energy)]


def test_vnd_stops_at_target(pentane):
    _, reference = _grid(pentane, 8)
    cfg = SearchConfig(d=8, s=16, target_energy=reference + 0.1)
    result = vnd(EnergyModel(pentane), cfg, ExactSolver(), np.random.default_rng(0))
    assert result.terminated_by is TerminatedBy.TARGET_REACHED
    assert result.best_energy <= reference + 0.1


def test_vnd_iteration_budget(decane):
    cfg = SearchConfig(d=16, s=10, max_iters=2, max_no_improve=5)
    result = vnd(EnergyModel(decane), cfg, ExactSolver(), np.random.default_rng(0))
    assert len(result.iterations) == 2
    assert result.terminated_by is TerminatedBy.ITER_BUDGET


def test_vnd_without_torsions(ethane):
    result = vnd(EnergyModel(ethane), SearchConfig(), ExactSolver(), np.random.default_rng(0))
    assert result.best_t == ()
    assert result.energy_evals == 1


def test_vnd_is_reproducible(decane):
    cfg = SearchConfig(d=16, s=20, max_iters=5)
    first = vnd(EnergyModel(decane), cfg, ExactSolver(), np.random.default_rng(42))
    second = vnd(EnergyModel(decane), cfg, ExactSolver(), np.random.default_rng(42))
    assert first.best_t == second.best_t
    assert first.trajectory == second.trajectory
    assert first.energy_evals == second.energy_evals


def test_local_search_single_torsion(butane):
    _, reference = _grid(butane, 16)
    result = local_search(EnergyModel(butane), SearchConfig(d=16), np.random.default_rng(0))
    assert result.best_energy == reference


def test_local_search_ends_in_a_single_torsion_optimum(decane):
    model = EnergyModel(decane)
    cfg = SearchConfig(d=8)
    result = local_search(model, cfg, np.random.default_rng(5))
    assert result.terminated_by is TerminatedBy.NO_IMPROVE
    counter = EvalCounter()
    t = np.array(result.best_t)
    for i in range(decane.n_torsions):
        for angle in cfg.theta.theta:
            trial = t.copy()
            trial[i] = angle
            assert model.total_energy(trial, counter) >= result.best_energy
    assert result.energy_evals % 8 == 1


def test_hinge_defeats_local_search_but_not_vnd(hinge):
    model = EnergyModel(hinge)
    cfg = SearchConfig(d=8, s=16)
    counter = EvalCounter()
    start = model.total_energy([0.0, 0.0], counter)
    for i in range(2):
        for angle in cfg.theta.theta[1:]:
            t = np.zeros(2)
            t[i] = angle
            assert model.total_energy(t, counter) > start
    _, reference = grid_minimum(model, cfg.theta, counter)
    assert reference < start - 0.2

    stuck = local_search(EnergyModel(hinge), cfg, np.random.default_rng(0), t_init=(0.0, 0.0))
    assert stuck.best_t == (0.0, 0.0)
    assert stuck.best_energy - reference > 0.1

    escaped = vnd(EnergyModel(hinge), cfg, ExactSolver(), np.random.default_rng(0), t_init=(0.0, 0.0))
    assert escaped.best_energy == pytest.approx(reference, abs=1e-9)

    combined = ls_vnd(EnergyModel(hinge), cfg, ExactSolver(), np.random.default_rng(0), t_init=(0.0, 0.0))
    assert combined.best_energy == pytest.approx(reference, abs=1e-9)
    assert combined.method == "lsvnd"
    assert combined.energy_evals > stuck.energy_evals


def test_ls_vnd_improves_on_its_local_search(decane):
    cfg = SearchConfig(d=8, s=16, max_iters=20)
    only_ls = local_search(EnergyModel(decane), cfg, np.random.default_rng(9))
    both = ls_vnd(EnergyModel(decane), cfg, ExactSolver(), np.random.default_rng(9))
    assert both.best_energy <= only_ls.best_energy


@pytest.mark.parametrize("seed", range(5))
def test_ls_vnd_shares_the_iteration_budget(decane, seed):
    cfg = SearchConfig(d=8, s=16, max_iters=3, max_no_improve=50)
    result = ls_vnd(EnergyModel(decane), cfg, ExactSolver(), np.random.default_rng(seed))
    assert all(record.iteration <= cfg.max_iters for record in result.iterations)
    assert all(iteration <= cfg.max_iters for iteration, _ in result.trajectory)
    assert result.terminated_by is TerminatedBy.ITER_BUDGET


@pytest.mark.parametrize("molecule", ["decane", "spider", "hinge"])
def test_greedy_start_is_no_worse_than_all_zero(molecule, request):
    spec = request.getfixturevalue(molecule)
    model = EnergyModel(spec)
    cfg = SearchConfig(d=8, s=16, max_iters=1, initial="greedy")
    zero = model.total_energy(np.zeros(spec.n_torsions), EvalCounter())

    counter = EvalCounter()
    t = greedy_start(model, cfg.theta, counter)
    assert model.total_energy(t, EvalCounter()) <= zero
    assert counter.count == 1 + spec.n_torsions * 8
    assert set(t) <= set(cfg.theta.theta)

    runs = [vnd(EnergyModel(spec), cfg, ExactSolver(), np.random.default_rng(seed)) for seed in range(3)]
    starts = {result.trajectory[0] for result in runs}
    assert len(starts) == 1
    assert starts.pop()[1] <= zero


def test_initial_vector_of_wrong_length(decane):
    with pytest.raises(ConfigurationError):
        vnd(EnergyModel(decane), SearchConfig(), ExactSolver(), np.random.default_rng(0), t_init=(0.0, 0.0))
    with pytest.raises(ConfigurationError):
        t_init = np.zeros(decane.n_torsions + 1)
        local_search(EnergyModel(decane), SearchConfig(), np.random.default_rng(0), t_init=t_init)


def test_metropolis_accept():
    rng = np.random.default_rng(0)
    assert all(metropolis_accept(-1.0, 0.1, rng) for _ in range(100))
    assert metropolis_accept(0.0, 0.1, rng)
    hot = sum(metropolis_accept(float(delta), 1e9, rng) for delta in rng.uniform(-1e3, 1e3, 10000))
    assert hot >= 9990
    cold = sum(metropolis_accept(10.0, 0.1, rng) for _ in range(1000))
    assert cold == 0


def test_exchange_probability():
    assert exchange_probability(5.0, -3.0, 1.0, 1.0) == 1.0
    assert exchange_probability(2.0, 1.0, 1.0, 2.0) == 1.0
    assert exchange_probability(1.0, 2.0, 1.0, 2.0) == pytest.approx(math.exp(-0.5))


def test_temperature_ladder():
    ladder = temperature_ladder(PtmcConfig(replicas=3, t_min=1.0, t_max=100.0))
    np.testing.assert_allclose(ladder, [1.0, 10.0, 100.0])


def test_ptmc_finds_small_grid_minimum(pentane):
    _, reference = _grid(pentane, 8)
    cfg = PtmcConfig(replicas=4, sweeps=300, d=8)
    for seed in range(10):
        result = ptmc(EnergyModel(pentane), cfg, np.random.default_rng(seed))
        assert result.best_energy == pytest.approx(reference, abs=1e-9)
        assert result.energy_evals == cfg.replicas * (1 + cfg.sweeps * pentane.n_torsions)


def test_ptmc_stops_at_target(pentane):
    _, reference = _grid(pentane, 8)
    cfg = PtmcConfig(replicas=4, sweeps=2000, d=8, target_energy=reference + 0.1)
    result = ptmc(EnergyModel(pentane), cfg, np.random.default_rng(1))
    assert result.terminated_by is TerminatedBy.TARGET_REACHED
    assert result.energy_evals < cfg.replicas * (1 + cfg.sweeps * pentane.n_torsions)


def test_ptmc_samples_the_boltzmann_distribution(butane):
    d = 4
    model = EnergyModel(butane)
    counter = EvalCounter()
    levels = Discretization.uniform(d).theta
    energies = np.array([model.total_energy([angle], counter) for angle in levels])
    t_cold = (energies.max() - energies.min()) / 4.0
    cfg = PtmcConfig(replicas=2, sweeps=20000, t_min=t_cold, t_max=2.0 * t_cold, d=d)

    visits = np.zeros(d)
    burn_in = 1000

    def record(sweep, states, _energies):
        if sweep > burn_in:
            visits[levels.index(float(states[0][0]))] += 1

    ptmc(model, cfg, np.random.default_rng(2024), callback=record)
    weights = np.exp(-(energies - energies.min()) / t_cold)
    expected = weights / weights.sum()
    observed = visits / visits.sum()
    samples = cfg.sweeps - burn_in
    tolerance = 5.0 * np.sqrt(expected * (1 - expected) / (samples / 10.0)) + 0.005
    assert np.all(np.abs(observed - expected) <= tolerance)


def test_ptmc_is_reproducible(pentane):
    cfg = PtmcConfig(replicas=3, sweeps=50, d=8)
    first = ptmc(EnergyModel(pentane), cfg, np.random.default_rng(8))
    second = ptmc(EnergyModel(pentane), cfg, np.random.default_rng(8))
    assert first.best_t == second.best_t
    assert first.trajectory == second.trajectory
